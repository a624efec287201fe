use super::{join, Module, Pass};
use crate::error::Result;
use crate::tensor::{ConvGeom, Float, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// 2-D convolution layer (cross-correlation, zero padding).
#[derive(Clone, Debug)]
pub struct Conv2d<T: Float> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, kh, kw]`
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    /// Zero-initialized layer.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]).trainable(),
            bias: bias.then(|| Tensor::zeros(&[out_channels]).trainable()),
        }
    }

    /// Gaussian weights with std `sqrt(2 / fan_out)`, zero bias.
    pub fn init_fan_out<R: Rng>(&mut self, rng: &mut R) {
        let fan_out = self.out_channels * self.kernel.0 * self.kernel.1;
        let std = (2.0 / fan_out as f64).sqrt();
        for w in self.weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::lit(z * std);
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel.0) / self.stride + 1,
            (w + 2 * self.padding - self.kernel.1) / self.stride + 1,
        )
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let w = pass.param(&self.weight);
        let b = self.bias.as_ref().map(|b| pass.param(b));
        pass.graph.conv2d(
            x,
            w,
            b,
            ConvGeom {
                stride: self.stride,
                pad: self.padding,
            },
        )
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Pass;
    use crate::tensor::{finite_diff_check, Graph};
    use crate::testutil::{int_tensor, rand_tensor};

    /// Direct quadruple loop over output positions and window taps.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for bi in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut conv = Conv2d::<f64>::new(3, 3, 1, 1, 0, false);
        for c in 0..3 {
            conv.weight.data_mut()[c * 3 + c] = 1.0;
        }
        let x = rand_tensor::<f64>(&[2, 3, 4, 5], 1);
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let xv = pass.graph.constant(&x);
        let y = conv.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.graph.value(y), x.data());
    }

    #[test]
    fn matches_naive_loop_exactly() {
        let mut seed = 0;
        for &k in &[1usize, 3, 7] {
            for &stride in &[1usize, 2] {
                for &pad in &[0usize, 1] {
                    seed += 1;
                    let x = int_tensor::<f64>(&[2, 2, 9, 8], seed);
                    let w = int_tensor::<f64>(&[3, 2, k, k], seed + 100);
                    let b = int_tensor::<f64>(&[3], seed + 200);
                    let mut g = Graph::new();
                    let (xv, wv, bv) = (g.constant(&x), g.constant(&w), g.constant(&b));
                    let y = g.conv2d(xv, wv, Some(bv), ConvGeom { stride, pad }).unwrap();
                    assert_eq!(g.value(y), naive_conv(&x, &w, Some(b.data()), stride, pad).as_slice(), "k={k} s={stride} p={pad}");
                }
            }
        }
        // the 2 -> 3 channel, 6x6 case
        let x = int_tensor::<f64>(&[1, 2, 6, 6], 77);
        let w = int_tensor::<f64>(&[3, 2, 3, 3], 78);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(&x), g.constant(&w));
        let y = g.conv2d(xv, wv, None, ConvGeom { stride: 1, pad: 0 }).unwrap();
        assert_eq!(g.value(y), naive_conv(&x, &w, None, 1, 0).as_slice());
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let conv = Conv2d::<f64>::new(3, 4, 3, 1, 1, false);
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let x = pass.graph.constant(&Tensor::zeros(&[1, 2, 5, 5]));
        assert!(matches!(conv.forward(&mut pass, x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let x = rand_tensor::<f64>(&[2, 2, 5, 5], seed);
            let w = rand_tensor::<f64>(&[3, 2, 3, 3], seed + 50);
            let b = rand_tensor::<f64>(&[3], seed + 60);
            let target = rand_tensor::<f64>(&[2, 3, 3, 3], seed + 70);
            let geom = ConvGeom { stride: 2, pad: 1 };
            let loss = |g: &mut Graph<f64>, xv: Var, wv: Var, bv: Var| -> Result<Var> {
                let y = g.conv2d(xv, wv, Some(bv), geom)?;
                let t = g.constant(&target);
                let d = g.mul(y, t)?;
                let sq = g.mul(y, y)?;
                let s = g.add(d, sq)?;
                g.sum_all(s)
            };
            let ex = finite_diff_check(|g, v| {
                let (wv, bv) = (g.constant(&w), g.constant(&b));
                loss(g, v, wv, bv)
            }, &x, 1e-5).unwrap();
            let ew = finite_diff_check(|g, v| {
                let (xv, bv) = (g.constant(&x), g.constant(&b));
                loss(g, xv, v, bv)
            }, &w, 1e-5).unwrap();
            let eb = finite_diff_check(|g, v| {
                let (xv, wv) = (g.constant(&x), g.constant(&w));
                loss(g, xv, wv, v)
            }, &b, 1e-5).unwrap();
            assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "seed {seed}: {ex} {ew} {eb}");
        }
    }
}
