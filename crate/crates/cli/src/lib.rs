//! Command-line front end for training, evaluation, screening and analysis.

pub mod bench;
pub mod commands;
pub mod config;

use clap::{Args, Parser, Subcommand};
use crackscreen::Error;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "crackscreen", version, about = "Lightweight crack classification for bridge inspection imagery")]
pub struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration layering shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Architecture preset (resnet18, resnet18-cbam, tiny, tiny-cbam).
    #[arg(long)]
    pub preset: Option<String>,
    /// Named ablation (baseline-ce, fl, ra, weighted-ce, weighted-sampler, ra-fl, ra-fl-cbam).
    #[arg(long)]
    pub ablation: Option<String>,
    /// Dotted-path override, e.g. `train.lr_max=0.0005`; repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
    /// Dataset root (shorthand for `--set data.root=...`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default: $CRACKSCREEN_OUT or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed (shorthand for `--set train.seed=...`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> crackscreen::Result<config::RunConfig> {
        let mut cfg = config::resolve(self.config.as_deref(), self.preset.as_deref(), self.ablation.as_deref(), &self.set)?;
        if let Some(d) = &self.data {
            cfg.data.root = Some(d.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SubsetName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, history and a test summary.
    Train(ConfigArgs),
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: SubsetName,
        /// Evaluate on a fixed degraded copy drawn with this seed.
        #[arg(long)]
        degrade_seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// k-fold paired comparison of two ablations.
    Cv {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value = "ra-fl")]
        baseline: String,
        #[arg(long, default_value = "ra-fl-cbam")]
        treatment: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sliding-window screening of full-resolution images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = crackscreen::inspect::DEFAULT_PATCH)]
        patch: usize,
        /// Defaults to the patch size.
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = crackscreen::inspect::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Also write annotated images.
        #[arg(long)]
        overlay: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Parameter and MAC accounting.
    ArchStats {
        /// Preset name; defaults to the configured architecture.
        name: Option<String>,
        #[arg(long)]
        input_hw: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Inference latency and throughput.
    Bench {
        /// Benchmark a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Class activation maps for images.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// `crack`, `predicted` or a class index.
        #[arg(long, default_value = "crack")]
        target: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Before/after images for each degradation.
    AugmentPreview {
        image: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic crack dataset.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Process exit status for an error: 2 for configuration, 3 for data.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Domain(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Layout(_) | Error::Split(_) | Error::Format(_) | Error::Json(_) | Error::Tiling(_) => 3,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> crackscreen::Result<()> {
    use commands::*;
    match cli.command {
        Command::Train(cfg) => cmd_train(&cfg.resolve()?).map(|_| ()),
        Command::Eval {
            checkpoint,
            subset,
            degrade_seed,
            cfg,
        } => cmd_eval(&cfg.resolve()?, &checkpoint, subset, degrade_seed).map(|_| ()),
        Command::Cv {
            k,
            baseline,
            treatment,
            cfg,
        } => cmd_cv(&cfg.resolve()?, k, &baseline, &treatment).map(|_| ()),
        Command::Infer {
            checkpoint,
            images,
            patch,
            stride,
            threshold,
            batch,
            overlay,
            cfg,
        } => cmd_infer(
            &cfg.resolve()?,
            &InferArgs {
                checkpoint,
                images,
                patch,
                stride: stride.unwrap_or(patch),
                threshold,
                batch,
                overlay,
            },
        )
        .map(|_| ()),
        Command::ArchStats { name, input_hw, cfg } => cmd_arch_stats(&cfg.resolve()?, name.as_deref(), input_hw).map(|_| ()),
        Command::Bench {
            checkpoint,
            batch,
            iters,
            warmup,
            cfg,
        } => cmd_bench(&cfg.resolve()?, checkpoint.as_deref(), batch, iters, warmup).map(|_| ()),
        Command::Gradcam {
            checkpoint,
            images,
            target,
            cfg,
        } => cmd_gradcam(&cfg.resolve()?, &checkpoint, &images, &target).map(|_| ()),
        Command::AugmentPreview { image, cfg } => cmd_augment_preview(&cfg.resolve()?, &image).map(|_| ()),
        Command::Synth { n, cfg } => cmd_synth(&cfg.resolve()?, n).map(|_| ()),
    }
}
