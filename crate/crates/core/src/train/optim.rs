use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Float;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every trainable tensor from its accumulated gradient.
    /// Tensors without a gradient are treated as having a zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) -> Result<()> {
        let mut bad = None;
        let mut names = Vec::new();
        let mut lens = Vec::new();
        module.visit("", &mut |name, t| {
            if !t.requires_grad {
                return;
            }
            if bad.is_none() && t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                bad = Some(name.to_string());
            }
            names.push(name.to_string());
            lens.push(t.len());
        });
        if let Some(name) = bad {
            return Err(Error::Training(format!("non-finite gradient in `{name}`")));
        }
        if self.t == 0 {
            self.m = lens.iter().map(|&n| vec![T::zero(); n]).collect();
            self.v = self.m.clone();
            self.names = names;
        } else if names != self.names || lens.iter().zip(&self.m).any(|(&n, m)| n != m.len()) {
            return Err(Error::Contract("optimizer state does not match the module's parameters".into()));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr_t, decay, eps) = (T::lit(lr), T::lit(lr * self.weight_decay), T::lit(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_mut("", &mut |_, t| {
            if !t.requires_grad {
                return;
            }
            let g = t.grad().map(<[T]>::to_vec);
            let (m, v) = (&mut ms[i], &mut vs[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let (m_hat, v_hat) = (m[j] / c1, v[j] / c2);
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *w;
            }
            i += 1;
        });
        Ok(())
    }
}
