use super::{join, BatchNorm, Conv2d, Module, Pass};
use crate::error::Result;
use crate::tensor::{Float, Tensor, Var};
use rand::Rng;

/// Basic residual block: `relu(bn2(conv2(relu(bn1(conv1 x)))) + shortcut(x))`
/// with a 1×1 projection shortcut when the stride or width changes.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T: Float> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, 0, false),
                BatchNorm::new(out_channels),
            )
        });
        Self {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, false),
            bn1: BatchNorm::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, false),
            bn2: BatchNorm::new(out_channels),
            projection,
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.conv1.init_fan_out(rng);
        self.conv2.init_fan_out(rng);
        if let Some((c, _)) = &mut self.projection {
            c.init_fan_out(rng);
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(pass, x)?;
        let h = self.bn1.forward(pass, h)?;
        let h = pass.graph.relu(h)?;
        let h = self.conv2.forward(pass, h)?;
        let h = self.bn2.forward(pass, h)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(pass, x)?;
                bn.forward(pass, s)?
            }
            None => x,
        };
        let sum = pass.graph.add(h, shortcut)?;
        pass.graph.relu(sum)
    }
}

impl<T: Float> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &self.projection {
            c.visit(&join(prefix, "proj.conv"), f);
            b.visit(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((c, b)) = &mut self.projection {
            c.visit_mut(&join(prefix, "proj.conv"), f);
            b.visit_mut(&join(prefix, "proj.bn"), f);
        }
    }

    fn visit_batchnorms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        if let Some((_, b)) = &mut self.projection {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{finite_diff_check, Graph};
    use crate::testutil::rand_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_branch_identity_shortcut_is_relu() {
        let block = ResidualBlock::<f64>::new(3, 3, 1);
        let x = rand_tensor::<f64>(&[2, 3, 4, 4], 5);
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new();
            let mut pass = Pass::new(&mut g, mode, 0);
            let xv = pass.graph.constant(&x);
            let y = block.forward(&mut pass, xv).unwrap();
            let expected: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
            assert_eq!(pass.graph.value(y), expected.as_slice());
        }
    }

    #[test]
    fn stride_two_halves_spatial_dims() {
        let mut block = ResidualBlock::<f32>::new(4, 8, 2);
        block.init(&mut ChaCha8Rng::seed_from_u64(1));
        for (h, expect) in [(8usize, 4usize), (7, 4), (5, 3)] {
            let mut g = Graph::new();
            let mut pass = Pass::eval(&mut g);
            let xv = pass.graph.constant(&rand_tensor(&[1, 4, h, h], 2));
            let y = block.forward(&mut pass, xv).unwrap();
            assert_eq!(pass.graph.shape(y), &[1, 8, expect, expect]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut block = ResidualBlock::<f64>::new(2, 3, 2);
            block.init(&mut ChaCha8Rng::seed_from_u64(seed));
            let x = rand_tensor::<f64>(&[2, 2, 5, 5], seed + 10);
            let target = rand_tensor::<f64>(&[2, 3, 3, 3], seed + 20);
            let loss = |g: &mut Graph<f64>, xv: Var, w: Option<Var>| -> Result<Var> {
                let mut pass = Pass::train(g, 0);
                if let Some(w) = w {
                    pass.bind(&block.conv1.weight, w);
                }
                let y = block.forward(&mut pass, xv)?;
                let t = pass.graph.constant(&target);
                let p = pass.graph.mul(y, t)?;
                pass.graph.sum_all(p)
            };
            let ex = finite_diff_check(|g, v| loss(g, v, None), &x, 1e-5).unwrap();
            let ew = finite_diff_check(
                |g, v| {
                    let xv = g.constant(&x);
                    loss(g, xv, Some(v))
                },
                &block.conv1.weight,
                1e-5,
            )
            .unwrap();
            assert!(ex < 1e-4 && ew < 1e-4, "seed {seed}: {ex} {ew}");
        }
    }
}
