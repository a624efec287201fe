//! Convolutional block attention: channel gating followed by spatial gating.

use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Conv2d, Module, Pass};
use crate::tensor::{Float, Tensor, Var};
use rand::Rng;

/// Shared bottleneck MLP over global average- and max-pooled descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttention<T: Float> {
    pub channels: usize,
    pub reduction: usize,
    /// `[C/r, C]`
    pub w1: Tensor<T>,
    /// `[C, C/r]`
    pub w2: Tensor<T>,
}

impl<T: Float> ChannelAttention<T> {
    /// Zero-initialized; rejects `channels % reduction != 0`.
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 || channels / reduction == 0 {
            return Err(Error::config(
                "cbam.reduction",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            reduction,
            w1: Tensor::zeros(&[hidden, channels]).trainable(),
            w2: Tensor::zeros(&[channels, hidden]).trainable(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        uniform_fan_in(&mut self.w1, self.channels, rng);
        let hidden = self.hidden();
        uniform_fan_in(&mut self.w2, hidden, rng);
    }

    fn mlp(&self, pass: &mut Pass<'_, T>, v: Var) -> Result<Var> {
        let w1 = pass.param(&self.w1);
        let w2 = pass.param(&self.w2);
        let h = pass.graph.matmul(v, w1, true)?;
        let h = pass.graph.relu(h)?;
        pass.graph.matmul(h, w2, true)
    }

    /// Channel weights `M_c = σ(MLP(avg(F)) + MLP(max(F)))`, shape `[B,C,1,1]`.
    pub fn weights(&self, pass: &mut Pass<'_, T>, f: Var) -> Result<Var> {
        let s = pass.graph.shape(f).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(shape_err!("channel attention for {} channels got {s:?}", self.channels));
        }
        let avg = pass.graph.mean(f, &[2, 3], false)?;
        let max = pass.graph.max(f, &[2, 3], false)?;
        let a = self.mlp(pass, avg)?;
        let m = self.mlp(pass, max)?;
        let sum = pass.graph.add(a, m)?;
        let w = pass.graph.sigmoid(sum)?;
        pass.graph.reshape(w, &[s[0], s[1], 1, 1])
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, f: Var) -> Result<Var> {
        let w = self.weights(pass, f)?;
        pass.graph.mul(f, w)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// Channel-wise mean/max map through a single large-kernel convolution.
#[derive(Clone, Debug)]
pub struct SpatialAttention<T: Float> {
    pub conv: Conv2d<T>,
}

impl<T: Float> SpatialAttention<T> {
    pub fn new(kernel: usize) -> Self {
        Self {
            conv: Conv2d::new(2, 1, kernel, 1, kernel / 2, true),
        }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = 2 * self.conv.kernel.0 * self.conv.kernel.1;
        uniform_fan_in(&mut self.conv.weight, fan_in, rng);
        if let Some(b) = &mut self.conv.bias {
            uniform_fan_in(b, fan_in, rng);
        }
    }

    /// Spatial map `M_s = σ(conv([mean_c F; max_c F]))`, shape `[B,1,H,W]`.
    pub fn map(&self, pass: &mut Pass<'_, T>, f: Var) -> Result<Var> {
        if pass.graph.shape(f).len() != 4 {
            return Err(shape_err!("spatial attention expects [B,C,H,W], got {:?}", pass.graph.shape(f)));
        }
        let mean = pass.graph.mean(f, &[1], true)?;
        let max = pass.graph.max(f, &[1], true)?;
        let both = pass.graph.concat(&[mean, max], 1)?;
        let logits = self.conv.forward(pass, both)?;
        pass.graph.sigmoid(logits)
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, f: Var) -> Result<Var> {
        let m = self.map(pass, f)?;
        pass.graph.mul(f, m)
    }

    pub fn num_params(&self) -> usize {
        self.conv.weight.len() + self.conv.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Channel attention, then spatial attention.
#[derive(Clone, Debug)]
pub struct Cbam<T: Float> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

impl<T: Float> Cbam<T> {
    pub fn new(channels: usize, reduction: usize, spatial_kernel: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(channels, reduction)?,
            spatial: SpatialAttention::new(spatial_kernel),
        })
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        self.channel.init(rng);
        self.spatial.init(rng);
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, f: Var) -> Result<Var> {
        let c = self.channel.forward(pass, f)?;
        self.spatial.forward(pass, c)
    }

    pub fn num_params(&self) -> usize {
        self.channel.num_params() + self.spatial.num_params()
    }
}

fn uniform_fan_in<T: Float, R: Rng>(t: &mut Tensor<T>, fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in t.data_mut() {
        *v = T::lit(rng.random_range(-bound..bound));
    }
}

impl<T: Float> Module<T> for Cbam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "channel.w1"), &self.channel.w1);
        f(&join(prefix, "channel.w2"), &self.channel.w2);
        self.spatial.conv.visit(&join(prefix, "spatial.conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "channel.w1"), &mut self.channel.w1);
        f(&join(prefix, "channel.w2"), &mut self.channel.w2);
        self.spatial.conv.visit_mut(&join(prefix, "spatial.conv"), f);
    }
}
