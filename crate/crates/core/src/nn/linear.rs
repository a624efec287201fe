use super::{join, Module, Pass};
use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor, Var};
use rand::Rng;

/// Affine map `y = x·Wᵀ + b` over `x[B, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]).trainable(),
            bias: Tensor::zeros(&[outputs]).trainable(),
        }
    }

    /// Uniform `±1/√fan_in` for weights and bias.
    pub fn init_uniform<R: Rng>(&mut self, rng: &mut R) {
        let bound = 1.0 / (self.inputs() as f64).sqrt();
        for v in self.weight.data_mut().iter_mut().chain(self.bias.data_mut()) {
            *v = T::lit(rng.random_range(-bound..bound));
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let s = pass.graph.shape(x);
        if s.len() != 2 || s[1] != self.inputs() {
            return Err(shape_err!("linear expects [B, {}], got {s:?}", self.inputs()));
        }
        let w = pass.param(&self.weight);
        let b = pass.param(&self.bias);
        let y = pass.graph.matmul(x, w, true)?;
        pass.graph.add(y, b)
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Graph};
    use crate::testutil::{int_tensor, rand_tensor};

    fn run(lin: &Linear<f64>, x: &Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let xv = pass.graph.constant(x);
        let y = lin.forward(&mut pass, xv).unwrap();
        pass.graph.value(y).to_vec()
    }

    #[test]
    fn identity_and_worked_example() {
        let mut lin = Linear::<f64>::zeros(3, 3);
        for i in 0..3 {
            lin.weight.data_mut()[i * 3 + i] = 1.0;
        }
        let x = rand_tensor::<f64>(&[2, 3], 4);
        assert_eq!(run(&lin, &x), x.data());

        let mut lin = Linear::<f64>::zeros(2, 1);
        lin.weight.data_mut().copy_from_slice(&[1.0, 1.0]);
        lin.bias.data_mut()[0] = 0.5;
        let x = Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap();
        assert_eq!(run(&lin, &x), vec![5.5]);
    }

    #[test]
    fn matches_naive_loop_exactly() {
        let mut lin = Linear::<f64>::zeros(5, 4);
        lin.weight = int_tensor(&[4, 5], 1).trainable();
        lin.bias = int_tensor(&[4], 2).trainable();
        let x = int_tensor::<f64>(&[3, 5], 3);
        let mut expected = vec![0.0; 12];
        for b in 0..3 {
            for o in 0..4 {
                let mut acc = lin.bias.data()[o];
                for i in 0..5 {
                    acc += lin.weight.data()[o * 5 + i] * x.data()[b * 5 + i];
                }
                expected[b * 4 + o] = acc;
            }
        }
        assert_eq!(run(&lin, &x), expected);
    }

    #[test]
    fn mismatch_is_shape_error() {
        let lin = Linear::<f64>::zeros(3, 2);
        let mut g = Graph::new();
        let mut pass = Pass::eval(&mut g);
        let xv = pass.graph.constant(&Tensor::zeros(&[2, 4]));
        assert!(matches!(lin.forward(&mut pass, xv), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut lin = Linear::<f64>::zeros(4, 3);
            lin.weight = rand_tensor(&[3, 4], seed).trainable();
            lin.bias = rand_tensor(&[3], seed + 1).trainable();
            let x = rand_tensor::<f64>(&[2, 4], seed + 2);
            let loss = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| -> Result<Var> {
                let mut pass = Pass::train(g, 0);
                if let Some((t, v)) = bind {
                    pass.bind(t, v);
                }
                let y = lin.forward(&mut pass, xv)?;
                let s = pass.graph.sigmoid(y)?;
                pass.graph.sum_all(s)
            };
            let ex = finite_diff_check(|g, v| loss(g, v, None), &x, 1e-5).unwrap();
            let ew = finite_diff_check(|g, v| { let xv = g.constant(&x); loss(g, xv, Some((&lin.weight, v))) }, &lin.weight, 1e-5).unwrap();
            let eb = finite_diff_check(|g, v| { let xv = g.constant(&x); loss(g, xv, Some((&lin.bias, v))) }, &lin.bias, 1e-5).unwrap();
            assert!(ex < 1e-4 && ew < 1e-4 && eb < 1e-4, "seed {seed}: {ex} {ew} {eb}");
        }
    }
}
