use super::{join, Mode, Module, Pass};
use crate::error::Result;
use crate::tensor::{Float, Tensor, Var};

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Float> {
    pub channels: usize,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Tensor::full(&[channels], T::one()).trainable(),
            beta: Tensor::zeros(&[channels]).trainable(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(0.1),
            epsilon: T::lit(1e-5),
        }
    }

    /// Train mode normalizes with (biased) batch statistics and queues them
    /// for [`Pass::absorb`]; eval mode applies the running statistics.
    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let gamma = pass.param(&self.gamma);
        let beta = pass.param(&self.beta);
        match pass.mode() {
            Mode::Train => {
                let (y, stats) = pass.graph.batch_norm(x, gamma, beta, None, self.epsilon)?;
                let (mean, var) = stats.expect("train-mode batch norm returns statistics");
                pass.record_bn(&self.running_mean, mean, var);
                Ok(y)
            }
            Mode::Eval => {
                let running = Some((self.running_mean.data(), self.running_var.data()));
                Ok(pass.graph.batch_norm(x, gamma, beta, running, self.epsilon)?.0)
            }
        }
    }

    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

impl<T: Float> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit_batchnorms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Pass;
    use crate::tensor::{finite_diff_check, Graph};
    use crate::testutil::rand_tensor;

    #[test]
    fn train_mode_standardizes() {
        let bn = BatchNorm::<f64>::new(3);
        let x = rand_tensor::<f64>(&[4, 3, 5, 5], 3);
        let mut g = Graph::new();
        let mut pass = Pass::train(&mut g, 0);
        let xv = pass.graph.constant(&x);
        let y = bn.forward(&mut pass, xv).unwrap();
        let v = pass.graph.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| v[(b * 3 + c) * 25..(b * 3 + c + 1) * 25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3, "{var}"); // epsilon shrinks var slightly
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.gamma = Tensor::full(&[1], 2.0).trainable();
        bn.beta = Tensor::full(&[1], 3.0).trainable();
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let xv = pass.graph.constant(&Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = bn.forward(&mut pass, xv).unwrap();
        let expected = 2.0 / (1.0f64 + 1e-5).sqrt() + 3.0;
        assert!((pass.graph.value(y)[0] - expected).abs() < 1e-12);
        let y2 = bn.forward(&mut pass, xv).unwrap();
        assert_eq!(pass.graph.value(y), pass.graph.value(y2));
    }

    #[test]
    fn momentum_update() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut g = Graph::new();
        let mut pass = Pass::train(&mut g, 0);
        let xv = pass.graph.constant(&x);
        bn.forward(&mut pass, xv).unwrap();
        pass.absorb(&mut bn).unwrap();
        // batch mean 3, biased var (4+1+0+9)/4 = 3.5
        assert!((bn.running_mean.data()[0] - 0.3).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_variance_is_rejected() {
        let bn = BatchNorm::<f64>::new(2);
        let mut g = Graph::new();
        let mut pass = Pass::train(&mut g, 0);
        let xv = pass.graph.constant(&Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(bn.forward(&mut pass, xv), Err(crate::Error::Degenerate(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let x = rand_tensor::<f64>(&[3, 2, 3, 3], seed);
            let mut bn = BatchNorm::<f64>::new(2);
            bn.gamma = rand_tensor::<f64>(&[2], seed + 1).trainable();
            bn.beta = rand_tensor::<f64>(&[2], seed + 2).trainable();
            let target = rand_tensor::<f64>(&[3, 2, 3, 3], seed + 3);
            for mode in [Mode::Train, Mode::Eval] {
                let run = |g: &mut Graph<f64>, xv: Var, gv: Option<Var>| -> Result<Var> {
                    let mut pass = Pass::new(g, mode, 0);
                    if let Some(gv) = gv {
                        pass.bind(&bn.gamma, gv);
                    }
                    let y = bn.forward(&mut pass, xv)?;
                    let t = pass.graph.constant(&target);
                    let p = pass.graph.mul(y, t)?;
                    let e = pass.graph.exp(p)?;
                    pass.graph.sum_all(e)
                };
                let ex = finite_diff_check(|g, v| run(g, v, None), &x, 1e-5).unwrap();
                let eg = finite_diff_check(
                    |g, v| {
                        let xv = g.constant(&x);
                        run(g, xv, Some(v))
                    },
                    &bn.gamma,
                    1e-5,
                )
                .unwrap();
                assert!(ex < 1e-4 && eg < 1e-4, "seed {seed} {mode:?}: {ex} {eg}");
            }
        }
    }
}
