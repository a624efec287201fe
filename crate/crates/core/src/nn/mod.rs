//! Layers built on the differentiation tape.
//!
//! Layers own their parameters as [`Tensor`]s and read them into a graph
//! through a [`Pass`], which remembers which graph node each parameter was
//! bound to. After `backward`, [`Pass::absorb`] moves gradients (and
//! train-mode batch-norm statistics) back into the module.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod residual;

pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use dropout::dropout;
pub use linear::Linear;
pub use residual::ResidualBlock;

use crate::error::Result;
use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns named tensors.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
    fn visit_batchnorms_mut(&mut self, _f: &mut dyn FnMut(&mut BatchNorm<T>)) {}

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| {
            if t.requires_grad {
                n += t.len()
            }
        });
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn key<T>(t: &Tensor<T>) -> usize
where
    T: Float,
{
    t.data().as_ptr() as usize
}

/// State of one forward pass: the graph, the mode, parameter bindings,
/// pending batch-norm statistics and the dropout RNG.
pub struct Pass<'g, T: Float> {
    pub graph: &'g mut Graph<T>,
    mode: Mode,
    bound: HashMap<usize, Var>,
    bn_stats: HashMap<usize, (Vec<T>, Vec<T>)>,
    rng: ChaCha8Rng,
}

impl<'g, T: Float> Pass<'g, T> {
    pub fn new(graph: &'g mut Graph<T>, mode: Mode, seed: u64) -> Self {
        Self {
            graph,
            mode,
            bound: HashMap::new(),
            bn_stats: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn train(graph: &'g mut Graph<T>, seed: u64) -> Self {
        Self::new(graph, Mode::Train, seed)
    }

    pub fn eval(graph: &'g mut Graph<T>) -> Self {
        Self::new(graph, Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Graph and RNG borrowed together.
    pub fn graph_and_rng(&mut self) -> (&mut Graph<T>, &mut ChaCha8Rng) {
        (self.graph, &mut self.rng)
    }

    /// Graph node for a parameter; repeated uses share one node. Gradients
    /// are tracked only in train mode.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&key(t)) {
            return v;
        }
        let v = if self.mode == Mode::Train && t.requires_grad {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(key(t), v);
        v
    }

    /// Routes a parameter to an existing node (used to differentiate with
    /// respect to weights from outside the module).
    pub fn bind(&mut self, t: &Tensor<T>, v: Var) {
        self.bound.insert(key(t), v);
    }

    fn record_bn(&mut self, running_mean: &Tensor<T>, mean: Vec<T>, var: Vec<T>) {
        self.bn_stats.insert(key(running_mean), (mean, var));
    }

    /// Accumulates graph gradients into the module's trainable tensors and
    /// applies recorded batch-norm statistics. Returns the number of
    /// trainable tensors that received a gradient.
    pub fn absorb<M: Module<T> + ?Sized>(&mut self, module: &mut M) -> Result<usize> {
        let mut touched = 0;
        let mut failure = None;
        let graph = &*self.graph;
        let bound = &self.bound;
        module.visit_mut("", &mut |_, t| {
            if !t.requires_grad {
                return;
            }
            if let Some(g) = bound.get(&key(t)).and_then(|&v| graph.grad(v)) {
                match t.accumulate_grad(g) {
                    Ok(()) => touched += 1,
                    Err(e) => failure = Some(e),
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let stats = &mut self.bn_stats;
        module.visit_batchnorms_mut(&mut |bn| {
            if let Some((m, v)) = stats.remove(&key(&bn.running_mean)) {
                bn.update_running(&m, &v);
            }
        });
        Ok(touched)
    }
}

/// `(B,C,H,W) → (B,C,1,1)` spatial means.
pub fn global_avg_pool<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.mean(x, &[2, 3], true)
}

pub fn max_pool<T: Float>(g: &mut Graph<T>, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
    g.max_pool2d(x, window, ConvGeom { stride, pad })
}
