//! Subcommand implementations. Each writes JSON into the output directory
//! and prints a short human-readable summary.

use crate::bench::{bench, BenchResult};
use crate::config::{apply_ablation, RunConfig};
use crate::SubsetName;
use crackscreen::arch::{model_stats, ArchConfig, ModelStats};
use crackscreen::augment::{write_previews, ImageBuffer};
use crackscreen::data::{
    crack_count, generate_synthetic, scan_dataset, stratified_split, write_synthetic, DatasetIndex, Split, SplitManifest, SyntheticSpec,
};
use crackscreen::gradcam::{grad_cam_images, overlay, CamMap};
use crackscreen::inspect::{classify_tiles, draw_candidates, emit_report, plan_tiles, InspectionReport, ReportHeader, REPORT_VERSION};
use crackscreen::metrics::{ComparisonReport, ConfusionMatrix, Metrics};
use crackscreen::model::Model;
use crackscreen::train::{
    crossval_compare, evaluate, load_checkpoint, save_checkpoint, train, Degraded, DiskSource, ImageSource, Subset, System,
};
use crackscreen::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Dataset index and split: the configured manifest, else a fresh
/// stratified split.
fn dataset(cfg: &RunConfig) -> Result<(DatasetIndex, Split, SplitManifest)> {
    let index = scan_dataset(cfg.data_root()?)?;
    if index.skipped > 0 {
        log::warn!("skipped {} unreadable image(s)", index.skipped);
    }
    let (split, manifest) = match &cfg.data.split {
        Some(p) => {
            let m = SplitManifest::load(p)?;
            (m.resolve(&index)?, m)
        }
        None => {
            let s = stratified_split(&index.labels(), &cfg.data.fractions, cfg.data.split_seed)?;
            let m = SplitManifest::new(&index, &s, cfg.data.fractions, cfg.data.split_seed);
            (s, m)
        }
    };
    Ok((index, split, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arch: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub test: Scores,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (index, split, manifest) = dataset(cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    cfg.save(&out.join("config.json"))?;
    manifest.save(&out.join("split.json"))?;
    let source = DiskSource { index };
    let (tr, va, te) = (
        Subset::new(&source, split.train.clone()),
        Subset::new(&source, split.val.clone()),
        Subset::new(&source, split.test.clone()),
    );
    let started = Instant::now();
    let outcome = train(&cfg.arch, &cfg.train, &tr, &va, &cfg.normalization, Some(&out.join("history.jsonl")))?;
    save_checkpoint(&out.join("best.ckpt"), &outcome.best, outcome.best_epoch, cfg.train.seed, Some(outcome.best_val))?;
    let last_epoch = outcome.history.len() - 1;
    let last_val = outcome.history.last().map(|r| r.val);
    save_checkpoint(&out.join("last.ckpt"), &outcome.last, last_epoch, cfg.train.seed, last_val)?;
    let ev = evaluate(&outcome.best, &te, cfg.train.batch_size, &cfg.normalization)?;
    let summary = TrainSummary {
        arch: cfg.arch.name.clone(),
        seed: cfg.train.seed,
        best_epoch: outcome.best_epoch,
        best_val: outcome.best_val,
        test: Scores {
            n: te.len(),
            confusion: ev.confusion,
            metrics: ev.metrics,
            loss: ev.loss,
        },
    };
    write_json(&out.join("summary.json"), &summary)?;
    log::info!("trained in {:.1}s", started.elapsed().as_secs_f64());
    println!(
        "{}: best epoch {} (val F1 {:.4}); test {}",
        summary.arch,
        summary.best_epoch,
        summary.best_val.f1_or_zero(),
        format_metrics(&summary.test.metrics)
    );
    println!("outputs in {}", out.display());
    Ok(summary)
}

fn format_metrics(m: &Metrics) -> String {
    let f = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "accuracy {} precision {} recall {} F1 {}",
        f(m.accuracy),
        f(m.precision),
        f(m.recall),
        f(m.f1)
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub subset: String,
    pub degrade_seed: Option<u64>,
    pub scores: Scores,
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, subset: SubsetName, degrade_seed: Option<u64>) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (index, split, _) = dataset(cfg)?;
    let ids = match subset {
        SubsetName::Train => split.train,
        SubsetName::Val => split.val,
        SubsetName::Test => split.test,
        SubsetName::All => (0..index.len()).collect(),
    };
    let source = DiskSource { index };
    let part = Subset::new(&source, ids);
    let degraded = degrade_seed.map(|s| Degraded::new(&part, cfg.degradations(), s)).transpose()?;
    let view: &dyn ImageSource = match &degraded {
        Some(d) => d,
        None => &part,
    };
    let ev = evaluate(&model, view, cfg.train.batch_size, &cfg.normalization)?;
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        subset: format!("{subset:?}").to_lowercase(),
        degrade_seed,
        scores: Scores {
            n: view.len(),
            confusion: ev.confusion,
            metrics: ev.metrics,
            loss: ev.loss,
        },
    };
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("eval.json"), &report)?;
    println!("{} images ({}): {}", report.scores.n, report.subset, format_metrics(&report.scores.metrics));
    Ok(report)
}

pub fn cmd_cv(cfg: &RunConfig, k: usize, baseline: &str, treatment: &str) -> Result<ComparisonReport> {
    let system = |name: &str| -> Result<System> {
        let mut c = cfg.clone();
        apply_ablation(&mut c, name)?;
        c.validate()?;
        Ok(System {
            name: name.to_string(),
            arch: c.arch,
            train: c.train,
        })
    };
    let (a, b) = (system(baseline)?, system(treatment)?);
    let index = scan_dataset(cfg.data_root()?)?;
    let source = DiskSource { index };
    let report = crossval_compare(&a, &b, &source, k, cfg.train.seed, &cfg.normalization)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("cv.json"), &report)?;
    let text = report.to_text();
    std::fs::write(cfg.output_dir.join("cv.txt"), &text).map_err(|e| Error::io(cfg.output_dir.join("cv.txt"), e))?;
    print!("{text}");
    Ok(report)
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub images: Vec<PathBuf>,
    pub patch: usize,
    pub stride: usize,
    pub threshold: f64,
    pub batch: usize,
    pub overlay: bool,
}

pub fn cmd_infer(cfg: &RunConfig, args: &InferArgs) -> Result<InspectionReport> {
    let started = Instant::now();
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let mut candidates = Vec::new();
    let mut annotated = Vec::new();
    for path in &args.images {
        let img = ImageBuffer::load(path)?;
        let grid = plan_tiles(img.width(), img.height(), args.patch, args.stride)?;
        let id = path.display().to_string();
        let found = classify_tiles(&model, &id, &img, &grid, args.batch, args.threshold, &cfg.normalization)?;
        println!("{id}: {} of {} tiles flagged", found.len(), grid.tiles.len());
        if args.overlay {
            annotated.push((stem(path), draw_candidates(&img, &found)));
        }
        candidates.extend(found);
    }
    let report = InspectionReport {
        header: ReportHeader {
            version: REPORT_VERSION,
            checkpoint: args.checkpoint.display().to_string(),
            patch: args.patch,
            stride: args.stride,
            threshold: args.threshold,
            timing_ms: started.elapsed().as_secs_f64() * 1000.0,
        },
        candidates,
    };
    create_dir(&cfg.output_dir)?;
    emit_report(&report, &cfg.output_dir.join("report.jsonl"))?;
    for (name, img) in annotated {
        img.save_png(&cfg.output_dir.join(format!("{name}_candidates.png")))?;
    }
    Ok(report)
}

pub fn cmd_arch_stats(cfg: &RunConfig, name: Option<&str>, input_hw: Option<usize>) -> Result<ModelStats> {
    let arch = match name {
        Some(n) => ArchConfig::preset(n).map_err(|e| Error::config("arch", e.to_string()))?,
        None => cfg.arch.clone(),
    };
    let stats = model_stats(&arch, input_hw.unwrap_or(arch.input_hw))?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("arch-stats-{}.json", arch.name)), &stats)?;
    println!("{}", stats.summary());
    Ok(stats)
}

pub fn cmd_bench(cfg: &RunConfig, checkpoint: Option<&Path>, batch: usize, iters: usize, warmup: usize) -> Result<BenchResult> {
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.0,
        None => Model::new(&cfg.arch, cfg.train.seed)?,
    };
    let result = bench(&model, batch, iters, warmup)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("bench-{}.json", model.config.name)), &result)?;
    println!("{}", result.summary());
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub image: String,
    pub target_class: usize,
    pub is_zero: bool,
    pub feature_hw: (usize, usize),
    pub heatmap: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub upsampled: Vec<f32>,
}

fn parse_target(target: &str, classes: usize) -> Result<Option<usize>> {
    match target {
        "crack" => Ok(Some(crackscreen::loss::CRACK)),
        "predicted" => Ok(None),
        t => match t.parse::<usize>() {
            Ok(c) if c < classes => Ok(Some(c)),
            _ => Err(Error::config("gradcam.target", format!("`{t}` is not crack, predicted or a class below {classes}"))),
        },
    }
}

pub fn cmd_gradcam(cfg: &RunConfig, checkpoint: &Path, images: &[PathBuf], target: &str) -> Result<Vec<CamMap>> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let fixed = parse_target(target, model.config.head.num_classes)?;
    let hw = model.config.input_hw;
    create_dir(&cfg.output_dir)?;
    let mut maps = Vec::new();
    for path in images {
        let img = ImageBuffer::load(path)?.resize(hw, hw)?;
        let class = match fixed {
            Some(c) => c,
            None => {
                let x = crackscreen::augment::preprocess(&img, hw, &cfg.normalization)?;
                let logits = model.predict_logits(&crackscreen::tensor::Tensor::stack(&[x])?)?;
                let row = logits.data();
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            }
        };
        let cam = grad_cam_images(&model, std::slice::from_ref(&img), &cfg.normalization, class)?.remove(0);
        let name = stem(path);
        overlay(&cam, &img)?.save_png(&cfg.output_dir.join(format!("{name}_overlay.png")))?;
        let heat_path = cfg.output_dir.join(format!("{name}_heat.png"));
        cam.to_gray16().save(&heat_path).map_err(|e| Error::Image {
            path: heat_path.clone(),
            msg: e.to_string(),
        })?;
        write_json(
            &cfg.output_dir.join(format!("{name}_heat.json")),
            &CamRecord {
                image: path.display().to_string(),
                target_class: cam.target_class,
                is_zero: cam.is_zero,
                feature_hw: cam.feature_hw,
                heatmap: cam.heatmap.clone(),
                height: cam.height,
                width: cam.width,
                upsampled: cam.upsampled.clone(),
            },
        )?;
        println!("{}: class {}{}", path.display(), cam.target_class, if cam.is_zero { " (zero map)" } else { "" });
        maps.push(cam);
    }
    Ok(maps)
}

pub fn cmd_augment_preview(cfg: &RunConfig, image: &Path) -> Result<Vec<PathBuf>> {
    let img = ImageBuffer::load(image)?;
    let spec = cfg.degradations();
    spec.validate()?;
    let written = write_previews(&img, &spec, &cfg.output_dir, cfg.train.seed)?;
    write_json(&cfg.output_dir.join("preview.json"), &written)?;
    println!("{} preview images in {}", written.len(), cfg.output_dir.display());
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub n: usize,
    pub crack: usize,
    pub non_crack: usize,
    pub seed: u64,
    pub spec: SyntheticSpec,
}

pub fn cmd_synth(cfg: &RunConfig, n: usize) -> Result<SynthSummary> {
    let samples = generate_synthetic(&cfg.synth, n, cfg.train.seed)?;
    write_synthetic(&cfg.output_dir, &samples)?;
    let crack = crack_count(n, cfg.synth.crack_fraction);
    let summary = SynthSummary {
        n,
        crack,
        non_crack: n - crack,
        seed: cfg.train.seed,
        spec: cfg.synth.clone(),
    };
    write_json(&cfg.output_dir.join("synth.json"), &summary)?;
    println!("{n} images ({crack} crack) in {}", cfg.output_dir.display());
    Ok(summary)
}
