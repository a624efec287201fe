//! The classifier network assembled from an [`ArchConfig`].

use crate::arch::ArchConfig;
use crate::cbam::Cbam;
use crate::error::{shape_err, Result};
use crate::nn::{dropout, global_avg_pool, join, max_pool, BatchNorm, Conv2d, Linear, Module, Pass, ResidualBlock};
use crate::tensor::{Float, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `stem → stages → [attention] → global average pool → dropout → linear`.
#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ArchConfig,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    /// `stages[i][j]` is block `j` of stage `i`.
    pub stages: Vec<Vec<ResidualBlock<T>>>,
    pub cbam: Option<Cbam<T>>,
    pub fc: Linear<T>,
}

impl<T: Float> Model<T> {
    /// Builds and initializes the network; identical seeds give identical weights.
    pub fn new(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &config.stem;
        let mut stem_conv = Conv2d::new(config.in_channels, s.channels, s.kernel, s.stride, s.kernel / 2, false);
        stem_conv.init_fan_out(&mut rng);
        let mut channels = s.channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for stage in &config.stages {
            let mut blocks = Vec::with_capacity(stage.blocks);
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let mut block = ResidualBlock::new(channels, stage.channels, stride);
                block.init(&mut rng);
                blocks.push(block);
                channels = stage.channels;
            }
            stages.push(blocks);
        }
        let cbam = if config.cbam.enabled {
            let mut c = Cbam::new(channels, config.cbam.reduction, config.cbam.spatial_kernel)?;
            c.init(&mut rng);
            Some(c)
        } else {
            None
        };
        let mut fc = Linear::zeros(channels, config.head.num_classes);
        fc.init_uniform(&mut rng);
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn: BatchNorm::new(s.channels),
            stages,
            cbam,
            fc,
        })
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let hw = self.config.input_hw;
        [batch, self.config.in_channels, hw, hw]
    }

    /// Post-attention feature map `[B, C, h, w]` before pooling.
    pub fn forward_features(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let s = pass.graph.shape(x);
        if s.len() != 4 || s[1..] != self.input_shape(1)[1..] {
            return Err(shape_err!(
                "model `{}` expects [B, {}, {hw}, {hw}], got {s:?}",
                self.config.name,
                self.config.in_channels,
                hw = self.config.input_hw
            ));
        }
        let h = self.stem_conv.forward(pass, x)?;
        let h = self.stem_bn.forward(pass, h)?;
        let mut h = pass.graph.relu(h)?;
        if self.config.stem.max_pool {
            h = max_pool(pass.graph, h, 3, 2, 1)?;
        }
        for block in self.stages.iter().flatten() {
            h = block.forward(pass, h)?;
        }
        match &self.cbam {
            Some(c) => c.forward(pass, h),
            None => Ok(h),
        }
    }

    /// Classifier on pooled features `[B, C, 1, 1]`, returning logits `[B, K]`.
    pub fn head(&self, pass: &mut Pass<'_, T>, pooled: Var) -> Result<Var> {
        let b = pass.graph.shape(pooled)[0];
        let flat = pass.graph.reshape(pooled, &[b, self.fc.inputs()])?;
        let mode = pass.mode();
        let (graph, rng) = pass.graph_and_rng();
        let dropped = dropout(graph, flat, self.config.head.dropout, mode, rng)?;
        self.fc.forward(pass, dropped)
    }

    pub fn forward(&self, pass: &mut Pass<'_, T>, x: Var) -> Result<Var> {
        let f = self.forward_features(pass, x)?;
        let pooled = global_avg_pool(pass.graph, f)?;
        self.head(pass, pooled)
    }

    /// Eval-mode logits for a batch tensor.
    pub fn predict_logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = crate::tensor::Graph::new();
        let mut pass = Pass::eval(&mut g);
        let x = pass.graph.constant(batch);
        let y = self.forward(&mut pass, x)?;
        Ok(pass.graph.tensor(y))
    }
}

impl<T: Float> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem_conv.visit(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit(&join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
        if let Some(c) = &self.cbam {
            c.visit(&join(prefix, "cbam"), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem_conv.visit_mut(&join(prefix, "stem.conv"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem.bn"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{j}", i + 1)), f);
            }
        }
        if let Some(c) = &mut self.cbam {
            c.visit_mut(&join(prefix, "cbam"), f);
        }
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }

    fn visit_batchnorms_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm<T>)) {
        f(&mut self.stem_bn);
        for block in self.stages.iter_mut().flatten() {
            block.visit_batchnorms_mut(f);
        }
    }
}
