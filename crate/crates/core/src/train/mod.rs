//! Training loop, evaluation and cross-validated comparison.

mod checkpoint;
mod optim;
mod schedule;
mod source;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, CheckpointMeta, TensorEntry, FORMAT_VERSION, MAGIC,
};
pub use optim::AdamW;
pub use schedule::lr_at;
pub use source::{load_batch, Degraded, DiskSource, ImageSource, MemorySource, Subset};

use crate::arch::ArchConfig;
use crate::augment::{DegradationSpec, Normalization};
use crate::data::stratified_kfold;
use crate::error::{Error, Result};
use crate::loss::{validate_strategy, weighted_sampler_indices, LossConfig, Sampler, CRACK};
use crate::metrics::{ComparisonReport, ConfusionMatrix, FoldResults, Metrics};
use crate::model::Model;
use crate::nn::{Module, Pass};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub loss: LossConfig,
    /// `None` trains on clean images.
    pub augmentation: Option<DegradationSpec>,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr_max: 1e-3,
            weight_decay: 1e-4,
            warmup_epochs: 3,
            loss: LossConfig::default(),
            augmentation: Some(DegradationSpec::default()),
            sampler: Sampler::Uniform,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "train.warmup_epochs",
                format!("{} must be smaller than epochs = {}", self.warmup_epochs, self.epochs),
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2 for batch statistics"));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::config("train.lr_max", format!("{} must be positive", self.lr_max)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", format!("{} must be ≥ 0", self.weight_decay)));
        }
        if let Some(spec) = &self.augmentation {
            spec.validate()?;
        }
        validate_strategy(&self.loss, self.sampler)
    }
}

/// SplitMix64 of `seed` combined with `stream`; used to derive independent
/// seeds for epochs, steps and folds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1 << 40;
const AUGMENT_STREAM: u64 = 2 << 40;
const DROPOUT_STREAM: u64 = 3 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val: Metrics,
    pub val_confusion: ConfusionMatrix,
    /// Training samples that went through the degradation pipeline.
    pub augmented: usize,
    /// Same count for the validation pass; always 0.
    pub val_augmented: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub epoch: usize,
    pub step: usize,
    pub abort: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub last: Model<f32>,
    pub history: Vec<EpochRecord>,
}

/// Scores of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    /// Mean cross-entropy.
    pub loss: f64,
    /// Crack probability per sample.
    pub scores: Vec<f64>,
    pub augmented: usize,
}

/// Softmax probability of the crack class for each row of `logits[B, 2]`.
pub fn crack_probabilities(logits: &Tensor<f32>) -> Vec<f64> {
    logits
        .data()
        .chunks(logits.shape()[1])
        .map(|row| {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            (row[CRACK] as f64 - m).exp() / z
        })
        .collect()
}

/// Eval-mode pass over a source with preprocessing only.
pub fn evaluate(model: &Model<f32>, source: &dyn ImageSource, batch_size: usize, norm: &Normalization) -> Result<Evaluation> {
    let ids: Vec<usize> = (0..source.len()).collect();
    let mut scores = Vec::with_capacity(ids.len());
    let mut loss = 0.0;
    let mut augmented = 0;
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = load_batch(source, chunk, None, model.config.input_hw, norm)?;
        augmented += batch.augmented;
        let logits = model.predict_logits(&batch.images)?;
        for (row, &label) in logits.data().chunks(logits.shape()[1]).zip(&batch.labels) {
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            loss -= row[label] as f64 - lse;
        }
        scores.extend(crack_probabilities(&logits));
    }
    let labels: Vec<usize> = ids.iter().map(|&i| source.label(i)).collect();
    let predictions: Vec<usize> = scores.iter().map(|&p| if p >= 0.5 { CRACK } else { 1 - CRACK }).collect();
    let confusion = ConfusionMatrix::from_predictions(&labels, &predictions)?;
    Ok(Evaluation {
        metrics: confusion.metrics(),
        confusion,
        loss: loss / ids.len().max(1) as f64,
        scores,
        augmented,
    })
}

fn write_line<T: Serialize>(out: &mut Option<std::fs::File>, path: Option<&Path>, rec: &T) -> Result<()> {
    if let (Some(f), Some(p)) = (out.as_mut(), path) {
        let line = serde_json::to_string(rec)?;
        writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

/// Trains `arch` from scratch; the best model is picked by validation F1
/// with ties going to the earlier epoch. When `history` is given, one JSON
/// line per epoch is written there.
pub fn train(
    arch: &ArchConfig,
    config: &TrainConfig,
    train_set: &dyn ImageSource,
    val_set: &dyn ImageSource,
    norm: &Normalization,
    history: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Training("empty training or validation split".into()));
    }
    let labels: Vec<usize> = (0..train_set.len()).map(|i| train_set.label(i)).collect();
    let counts = [labels.iter().filter(|&&l| l != CRACK).count(), labels.iter().filter(|&&l| l == CRACK).count()];
    if counts.contains(&0) {
        return Err(Error::Training(format!("training split has an empty class: counts {counts:?}")));
    }
    let mut file = match history {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };

    let mut model = Model::<f32>::new(arch, config.seed)?;
    let mut opt = AdamW::new(config.weight_decay);
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut best: Option<(usize, Metrics, Model<f32>)> = None;
    let mut records = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, SHUFFLE_STREAM + epoch as u64));
        let order = match config.sampler {
            Sampler::Uniform => {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut rng);
                o
            }
            Sampler::Weighted => weighted_sampler_indices(&labels, n, &mut rng)?,
        };
        let aug_seed = derive_seed(config.seed, AUGMENT_STREAM + epoch as u64);
        let (mut loss_sum, mut augmented, mut lr) = (0.0, 0, 0.0);
        for (b, ids) in order.chunks(config.batch_size).enumerate() {
            let aug = config.augmentation.as_ref().map(|s| (s, aug_seed, (b * config.batch_size) as u64));
            let batch = load_batch(train_set, ids, aug, arch.input_hw, norm)?;
            augmented += batch.augmented;
            lr = lr_at(step, steps_per_epoch, config.epochs, config.warmup_epochs, config.lr_max);

            let mut g = Graph::new();
            let mut pass = Pass::train(&mut g, derive_seed(config.seed, DROPOUT_STREAM + step as u64));
            let shape = batch.images.shape().to_vec();
            let x = pass.graph.input(&shape, batch.images.into_data(), false)?;
            let logits = model.forward(&mut pass, x)?;
            let loss = config.loss.compute(pass.graph, logits, &batch.labels, &counts)?;
            let value = pass.graph.value(loss)[0] as f64;
            if !value.is_finite() {
                let reason = format!("non-finite loss {value} at step {step}");
                write_line(&mut file, history, &AbortRecord { epoch, step, abort: reason.clone() })?;
                return Err(Error::Training(reason));
            }
            pass.graph.backward(loss)?;
            pass.absorb(&mut model)?;
            drop(pass);
            if let Err(e) = opt.step(&mut model, lr) {
                write_line(&mut file, history, &AbortRecord { epoch, step, abort: e.to_string() })?;
                return Err(e);
            }
            model.zero_grad();
            loss_sum += value * ids.len() as f64;
            step += 1;
        }

        let eval = evaluate(&model, val_set, config.batch_size, norm)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n as f64,
            val_loss: eval.loss,
            val: eval.metrics,
            val_confusion: eval.confusion,
            augmented,
            val_augmented: eval.augmented,
        };
        write_line(&mut file, history, &record)?;
        log::info!(
            "epoch {epoch}: loss {:.4} val_f1 {:.4} val_recall {:.4} ({:.1}s)",
            record.train_loss,
            eval.metrics.f1_or_zero(),
            eval.metrics.recall_or_zero(),
            started.elapsed().as_secs_f64()
        );
        if best.as_ref().is_none_or(|(_, m, _)| eval.metrics.f1_or_zero() > m.f1_or_zero()) {
            best = Some((epoch, eval.metrics, model.clone()));
        }
        records.push(record);
    }
    let (best_epoch, best_val, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_val,
        last: model,
        history: records,
    })
}

/// A named architecture + training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub name: String,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

/// Trains both systems on each of `k` stratified folds (same fold seed for
/// both) and compares validation F1 and recall.
pub fn crossval_compare(baseline: &System, treatment: &System, source: &dyn ImageSource, k: usize, seed: u64, norm: &Normalization) -> Result<ComparisonReport> {
    let labels: Vec<usize> = (0..source.len()).map(|i| source.label(i)).collect();
    let folds = stratified_kfold(&labels, k, seed)?;
    let mut f1 = FoldResults {
        metric: "f1".into(),
        baseline: Vec::new(),
        treatment: Vec::new(),
    };
    let mut recall = FoldResults {
        metric: "recall".into(),
        ..f1.clone()
    };
    for (i, (train_ids, val_ids)) in folds.iter().enumerate() {
        let (tr, va) = (Subset::new(source, train_ids.clone()), Subset::new(source, val_ids.clone()));
        let fold_seed = derive_seed(seed, i as u64);
        for (system, is_treatment) in [(baseline, false), (treatment, true)] {
            let cfg = TrainConfig {
                seed: fold_seed,
                ..system.train.clone()
            };
            let out = train(&system.arch, &cfg, &tr, &va, norm, None)?;
            let eval = evaluate(&out.best, &va, cfg.batch_size, norm)?;
            let (f, r) = (eval.metrics.f1_or_zero(), eval.metrics.recall_or_zero());
            if is_treatment {
                f1.treatment.push(f);
                recall.treatment.push(r);
            } else {
                f1.baseline.push(f);
                recall.baseline.push(r);
            }
        }
    }
    ComparisonReport::new(&baseline.name, &treatment.name, vec![f1, recall])
}
