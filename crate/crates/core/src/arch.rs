//! Declarative network description and analytic cost accounting.
//!
//! Counting conventions (all per image):
//! - convolution: `out_elems · in_channels · kh · kw` MACs; biases are free
//! - linear: `in · out`
//! - batch norm, relu, residual add, sigmoid, attention multiply: one op per output element
//! - pooling: one op per input element read (max pool: `out_elems · k²`)

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pool after the stem.
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub enabled: bool,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub dropout: f64,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub name: String,
    pub in_channels: usize,
    pub input_hw: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub cbam: AttentionSpec,
    pub head: HeadSpec,
}

pub const PRESETS: [&str; 4] = ["resnet18", "resnet18-cbam", "tiny", "tiny-cbam"];

impl ArchConfig {
    pub fn resnet18() -> Self {
        Self {
            name: "resnet18".into(),
            in_channels: 3,
            input_hw: 224,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            stages: [(2, 64, 1), (2, 128, 2), (2, 256, 2), (2, 512, 2)]
                .map(|(blocks, channels, stride)| StageSpec { blocks, channels, stride })
                .to_vec(),
            cbam: AttentionSpec {
                enabled: false,
                reduction: 16,
                spatial_kernel: 7,
            },
            head: HeadSpec {
                dropout: 0.2,
                num_classes: 2,
            },
        }
    }

    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            input_hw: 64,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            stages: [(1, 16, 1), (1, 32, 2), (1, 64, 2), (1, 128, 2)]
                .map(|(blocks, channels, stride)| StageSpec { blocks, channels, stride })
                .to_vec(),
            ..Self::resnet18()
        }
    }

    /// Same network with the attention module switched on or off.
    pub fn with_cbam(mut self, enabled: bool) -> Self {
        let base = self.name.trim_end_matches("-cbam").to_string();
        self.name = if enabled { format!("{base}-cbam") } else { base };
        self.cbam.enabled = enabled;
        self
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet18" => Ok(Self::resnet18()),
            "resnet18-cbam" => Ok(Self::resnet18().with_cbam(true)),
            "tiny" => Ok(Self::tiny()),
            "tiny-cbam" => Ok(Self::tiny().with_cbam(true)),
            other => Err(Error::config(
                "arch",
                format!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
            )),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| Err(Error::config(format!("arch.{path}"), msg));
        if self.in_channels == 0 || self.input_hw == 0 {
            return bad("input_hw", "input channels and size must be positive");
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return bad("stem", "stem extents must be positive");
        }
        if self.stages.is_empty() {
            return bad("stages", "at least one stage required");
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return bad(&format!("stages[{i}]"), "blocks, channels and stride must be positive");
            }
        }
        if self.cbam.enabled {
            let c = self.feature_channels();
            let r = self.cbam.reduction;
            if r == 0 || c % r != 0 {
                return bad("cbam.reduction", &format!("{c} channels not divisible by {r}"));
            }
            if self.cbam.spatial_kernel % 2 == 0 {
                return bad("cbam.spatial_kernel", "kernel must be odd");
            }
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return bad("head.dropout", "dropout must lie in [0, 1)");
        }
        if self.head.num_classes < 2 {
            return bad("head.num_classes", "need at least two classes");
        }
        Ok(())
    }
}

/// Per-component totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub backbone: u64,
    pub attention: u64,
    pub head: u64,
    pub total: u64,
}

impl Breakdown {
    fn new(backbone: u64, attention: u64, head: u64) -> Self {
        Self {
            backbone,
            attention,
            head,
            total: backbone + attention + head,
        }
    }

    pub fn attention_share(&self) -> f64 {
        self.attention as f64 / self.total as f64
    }

    pub fn head_share(&self) -> f64 {
        self.head as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub arch: String,
    pub input_hw: usize,
    pub params: Breakdown,
    pub macs: Breakdown,
}

impl ModelStats {
    pub fn summary(&self) -> String {
        let p = &self.params;
        let m = &self.macs;
        format!(
            "{name}\n  params {pt} ({ptm:.2}M)  backbone {pb}  attention {pa}  head {ph}\n  \
             MACs @{hw}x{hw} {mt} ({mtg:.2}G)  backbone {mb}  attention {ma}  head {mh}\n  \
             attention share: params {aps:.4}%  MACs {ams:.4}%   head share: params {hps:.2e}",
            name = self.arch,
            pt = p.total,
            ptm = p.total as f64 / 1e6,
            pb = p.backbone,
            pa = p.attention,
            ph = p.head,
            hw = self.input_hw,
            mt = m.total,
            mtg = m.total as f64 / 1e9,
            mb = m.backbone,
            ma = m.attention,
            mh = m.head,
            aps = 100.0 * p.attention_share(),
            ams = 100.0 * m.attention_share(),
            hps = p.head_share(),
        )
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < kernel {
        return Err(crate::error::shape_err!("{size}px input too small for kernel {kernel}"));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

/// MACs of one convolution producing an `out_h × out_w` map.
pub fn conv_macs(in_channels: usize, out_channels: usize, kernel: usize, out_h: usize, out_w: usize) -> u64 {
    (out_channels * out_h * out_w * in_channels * kernel * kernel) as u64
}

/// Exact trainable parameter count from shapes alone.
pub fn count_params(config: &ArchConfig) -> Breakdown {
    let conv = |i: usize, o: usize, k: usize| (i * o * k * k) as u64;
    let bn = |c: usize| 2 * c as u64;
    let mut backbone = conv(config.in_channels, config.stem.channels, config.stem.kernel) + bn(config.stem.channels);
    let mut c = config.stem.channels;
    for stage in &config.stages {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let o = stage.channels;
            backbone += conv(c, o, 3) + bn(o) + conv(o, o, 3) + bn(o);
            if stride != 1 || c != o {
                backbone += conv(c, o, 1) + bn(o);
            }
            c = o;
        }
    }
    let attention = if config.cbam.enabled {
        let k = config.cbam.spatial_kernel;
        (2 * c * (c / config.cbam.reduction) + 2 * k * k + 1) as u64
    } else {
        0
    };
    let head = (c * config.head.num_classes + config.head.num_classes) as u64;
    Breakdown::new(backbone, attention, head)
}

/// MAC count for one `input_hw × input_hw` image.
pub fn count_macs(config: &ArchConfig, input_hw: usize) -> Result<Breakdown> {
    let mut hw = conv_out(input_hw, config.stem.kernel, config.stem.stride, config.stem.kernel / 2)?;
    let mut c = config.stem.channels;
    let plane = |hw: usize| (hw * hw) as u64;
    // conv + bn + relu
    let mut backbone = plane(hw) * (config.in_channels * c * config.stem.kernel.pow(2)) as u64 + 2 * plane(hw) * c as u64;
    if config.stem.max_pool {
        hw = conv_out(hw, 3, 2, 1)?;
        backbone += plane(hw) * c as u64 * 9;
    }
    for stage in &config.stages {
        for b in 0..stage.blocks {
            let stride = if b == 0 { stage.stride } else { 1 };
            let o = stage.channels;
            let out = conv_out(hw, 3, stride, 1)?;
            let elems = plane(out) * o as u64;
            backbone += elems * (c * 9) as u64 + 2 * elems; // conv1, bn1, relu
            backbone += elems * (o * 9) as u64 + elems; // conv2, bn2
            if stride != 1 || c != o {
                backbone += elems * c as u64 + elems;
            }
            backbone += 2 * elems; // add, relu
            c = o;
            hw = out;
        }
    }
    let elems = plane(hw) * c as u64;
    let attention = if config.cbam.enabled {
        let hidden = c / config.cbam.reduction;
        let k = config.cbam.spatial_kernel;
        let channel = 2 * elems + 2 * (2 * c * hidden) as u64 + 2 * c as u64 + elems; // pools, mlp×2, add+sigmoid, gate
        let spatial = 2 * elems + plane(hw) * (2 * k * k) as u64 + plane(hw) + elems; // pools, conv, sigmoid, gate
        channel + spatial
    } else {
        0
    };
    let head = elems + (c * config.head.num_classes) as u64;
    Ok(Breakdown::new(backbone, attention, head))
}

pub fn model_stats(config: &ArchConfig, input_hw: usize) -> Result<ModelStats> {
    config.validate()?;
    Ok(ModelStats {
        arch: config.name.clone(),
        input_hw,
        params: count_params(config),
        macs: count_macs(config, input_hw)?,
    })
}
