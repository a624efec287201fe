//! Classification losses and class-imbalance treatments.

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

/// Label of the minority (crack) class.
pub const CRACK: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    WeightedCe,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uniform,
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the crack class under focal loss; `1 − alpha` goes to the other class.
    pub alpha: f64,
    pub gamma: f64,
    /// Per-class weights for weighted CE; `None` means inverse frequency of the training split.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Focal,
            alpha: 0.75,
            gamma: 2.0,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn ce() -> Self {
        Self {
            kind: LossKind::Ce,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("loss.alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("loss.gamma", format!("{} must be finite and ≥ 0", self.gamma)));
        }
        if let Some(w) = &self.class_weights {
            check_weights(w)?;
        }
        Ok(())
    }

    /// Scalar loss for `logits[B,K]`. `train_counts` supplies inverse-frequency
    /// weights when weighted CE has no explicit weights.
    pub fn compute<T: Float>(&self, g: &mut Graph<T>, logits: Var, targets: &[usize], train_counts: &[usize]) -> Result<Var> {
        match self.kind {
            LossKind::Ce => cross_entropy(g, logits, targets),
            LossKind::Focal => focal_loss(g, logits, targets, self.alpha, self.gamma),
            LossKind::WeightedCe => {
                let w = match &self.class_weights {
                    Some(w) => w.clone(),
                    None => inverse_frequency_weights(train_counts)?,
                };
                weighted_ce(g, logits, targets, &w)
            }
        }
    }
}

/// Focal loss and weighted sampling are alternatives, never combined.
pub fn validate_strategy(loss: &LossConfig, sampler: Sampler) -> Result<()> {
    if loss.kind == LossKind::Focal && sampler == Sampler::Weighted {
        return Err(Error::config(
            "train.sampler",
            "weighted sampling cannot be combined with focal loss",
        ));
    }
    loss.validate()
}

fn check_weights(w: &[f64]) -> Result<()> {
    if let Some(bad) = w.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::config("loss.class_weights", format!("weight {bad} must be positive")));
    }
    Ok(())
}

fn target_log_probs<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<(Var, Var)> {
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, targets)?;
    Ok((logp, picked))
}

/// Mean negative log-likelihood of the targets.
pub fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (_, lpt) = target_log_probs(g, logits, targets)?;
    let m = g.mean_all(lpt)?;
    g.neg(m)
}

/// `mean(α_t · (1 − p_t)^γ · −log p_t)` for two classes, `α` on the crack class.
pub fn focal_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize], alpha: f64, gamma: f64) -> Result<Var> {
    if g.shape(logits).get(1) != Some(&2) {
        return Err(crate::error::shape_err!("focal loss is binary, got logits {:?}", g.shape(logits)));
    }
    let (logp, lpt) = target_log_probs(g, logits, targets)?;
    // 1 − p_t is the other class's probability; reading it from log space keeps it exact near p_t = 1
    let others: Vec<usize> = targets.iter().map(|&t| 1 - t).collect();
    let lpo = g.gather(logp, &others)?;
    let one_minus = g.exp(lpo)?;
    let modulating = g.powf(one_minus, T::lit(gamma))?;
    let nll = g.neg(lpt)?;
    let weighted = g.mul(modulating, nll)?;
    let alpha_t = Tensor::from_fn(&[targets.len()], |i| T::lit(if targets[i] == CRACK { alpha } else { 1.0 - alpha }));
    let a = g.constant(&alpha_t);
    let per_sample = g.mul(weighted, a)?;
    g.mean_all(per_sample)
}

/// `Σ w_t · nll / Σ w_t`.
pub fn weighted_ce<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize], class_weights: &[f64]) -> Result<Var> {
    check_weights(class_weights)?;
    let k = g.shape(logits).get(1).copied().unwrap_or(0);
    if class_weights.len() != k {
        return Err(Error::config(
            "loss.class_weights",
            format!("{} weights for {k} classes", class_weights.len()),
        ));
    }
    let (_, lpt) = target_log_probs(g, logits, targets)?;
    let w: Vec<f64> = targets.iter().map(|&t| class_weights[t]).collect();
    let total: f64 = w.iter().sum();
    let wt = Tensor::from_fn(&[w.len()], |i| T::lit(-w[i] / total));
    let wv = g.constant(&wt);
    let terms = g.mul(lpt, wv)?;
    g.sum_all(terms)
}

/// `w_c = N / (K · N_c)`.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.contains(&0) {
        return Err(Error::Degenerate(format!("empty class in counts {counts:?}")));
    }
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&c| n as f64 / (k * c as f64)).collect())
}

/// I.i.d. draws with replacement, `P(i) ∝ 1 / count(label_i)`.
pub fn weighted_sampler_indices<R: rand::Rng>(labels: &[usize], n_draws: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n_draws == 0 || labels.is_empty() {
        return Err(Error::Domain("sampler needs at least one label and one draw".into()));
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        log::warn!("weighted sampler over a single class degenerates to uniform sampling");
    }
    let weights: Vec<f64> = labels.iter().map(|&l| 1.0 / counts[l] as f64).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((0..n_draws).map(|_| dist.sample(rng)).collect())
}
