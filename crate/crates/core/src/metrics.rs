//! Confusion-matrix metrics and paired significance tests.
//!
//! The crack class is the positive class throughout.

use crate::error::{Error, Result};
use crate::loss::CRACK;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Domain(format!("{} labels vs {} predictions", labels.len(), predictions.len())));
        }
        let mut cm = Self::default();
        for (&l, &p) in labels.iter().zip(predictions) {
            match (l == CRACK, p == CRACK) {
                (true, true) => cm.tp += 1,
                (false, true) => cm.fp += 1,
                (true, false) => cm.fn_ += 1,
                (false, false) => cm.tn += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        Metrics {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision: ratio(self.tp, self.tp + self.fp),
            recall: ratio(self.tp, self.tp + self.fn_),
            f1: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
        }
    }
}

/// `None` marks a metric whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    /// F1 with the undefined case read as 0, for model selection.
    pub fn f1_or_zero(&self) -> f64 {
        self.f1.unwrap_or(0.0)
    }

    pub fn recall_or_zero(&self) -> f64 {
        self.recall.unwrap_or(0.0)
    }
}

/// All confusion matrices over `positives`/`negatives` samples whose
/// precision and recall round to the given values at `decimals`.
pub fn reconstruct_confusion(precision: f64, recall: f64, positives: u64, negatives: u64, decimals: i32) -> Vec<ConfusionMatrix> {
    let scale = 10f64.powi(decimals);
    let matches = |v: f64, target: f64| (v * scale).round() == (target * scale).round();
    let mut out = Vec::new();
    for tp in 1..=positives {
        if !matches(tp as f64 / positives as f64, recall) {
            continue;
        }
        for fp in 0..=negatives {
            if matches(tp as f64 / (tp + fp) as f64, precision) {
                out.push(ConfusionMatrix::new(tp, fp, positives - tp, negatives - fp));
            }
        }
    }
    out
}

fn differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Domain(format!("paired samples need equal length ≥ 2, got {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

fn mean_sd(d: &[f64]) -> (f64, f64) {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    let d = differences(a, b)?;
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let dof = (d.len() - 1) as f64;
    let t = mean / (sd / (d.len() as f64).sqrt());
    Ok(TTest {
        t,
        dof,
        p: student_t_two_sided(t, dof),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

/// `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    // the fraction converges fast for x below the mean a/(a+b)
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let even = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 / clamp(1.0 + even * d);
        c = clamp(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 / clamp(1.0 + odd * d);
        c = clamp(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, 9 terms), ~1e-15 relative.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = COEF[1..].iter().enumerate().fold(COEF[0], |s, (i, &c)| s + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W−)`.
    pub w: f64,
    /// Non-zero differences used.
    pub n: usize,
    pub p: f64,
}

pub const WILCOXON_MAX_N: usize = 25;

/// Exact two-sided signed-rank test on `a − b`; zero differences are
/// dropped and tied magnitudes share their average rank.
pub fn wilcoxon_signed_rank_exact(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    let d: Vec<f64> = differences(a, b)?.into_iter().filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::Domain(format!("exact signed-rank test limited to n ≤ {WILCOXON_MAX_N}, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    // doubled ranks stay integral under averaging
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for &k in &order[i..=j] {
            rank2[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    let plus: u64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let total: u64 = rank2.iter().sum();
    let w2 = plus.min(total - plus);
    // number of sign assignments reaching each doubled positive-rank sum
    let mut ways = vec![0u64; total as usize + 1];
    ways[0] = 1;
    for &r in &rank2 {
        for s in (r as usize..=total as usize).rev() {
            ways[s] += ways[s - r as usize];
        }
    }
    let tail: u64 = ways[..=w2 as usize].iter().sum();
    let p = (2.0 * tail as f64 / 2f64.powi(n as i32)).min(1.0);
    Ok(Wilcoxon { w: w2 as f64 / 2.0, n, p })
}

/// Mean paired difference over its sample standard deviation.
pub fn cohens_d_paired(a: &[f64], b: &[f64]) -> Result<f64> {
    let d = differences(a, b)?;
    let (mean, sd) = mean_sd(&d);
    if sd == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    Ok(mean / sd)
}

/// Paired per-fold values of one metric for two systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResults {
    pub metric: String,
    pub baseline: Vec<f64>,
    pub treatment: Vec<f64>,
}

/// A statistic, or why it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome<T> {
    Value(T),
    Undefined(String),
}

impl<T> From<Result<T>> for Outcome<T> {
    fn from(r: Result<T>) -> Self {
        match r {
            Ok(v) => Outcome::Value(v),
            Err(e) => Outcome::Undefined(e.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub metric: String,
    pub baseline_mean: f64,
    pub treatment_mean: f64,
    pub t_test: Outcome<TTest>,
    pub wilcoxon: Outcome<Wilcoxon>,
    pub cohens_d: Outcome<f64>,
}

impl FoldResults {
    pub fn compare(&self) -> Result<Comparison> {
        differences(&self.treatment, &self.baseline)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Comparison {
            metric: self.metric.clone(),
            baseline_mean: mean(&self.baseline),
            treatment_mean: mean(&self.treatment),
            t_test: paired_t_test(&self.treatment, &self.baseline).into(),
            wilcoxon: wilcoxon_signed_rank_exact(&self.treatment, &self.baseline).into(),
            cohens_d: cohens_d_paired(&self.treatment, &self.baseline).into(),
        })
    }
}

/// Cross-validation comparison of two configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub treatment: String,
    pub folds: Vec<FoldResults>,
    pub comparisons: Vec<Comparison>,
}

impl ComparisonReport {
    pub fn new(baseline: &str, treatment: &str, folds: Vec<FoldResults>) -> Result<Self> {
        let comparisons = folds.iter().map(FoldResults::compare).collect::<Result<_>>()?;
        Ok(Self {
            baseline: baseline.to_string(),
            treatment: treatment.to_string(),
            folds,
            comparisons,
        })
    }

    pub fn to_text(&self) -> String {
        fn show<T>(o: &Outcome<T>, f: impl Fn(&T) -> String) -> String {
            match o {
                Outcome::Value(v) => f(v),
                Outcome::Undefined(_) => "undefined".into(),
            }
        }
        let mut s = format!("baseline: {}\ntreatment: {}\n", self.baseline, self.treatment);
        for r in &self.folds {
            s += &format!("\n{:<6} {:>10} {:>10} {:>10}\n", "fold", "baseline", "treatment", "diff");
            for (i, (b, t)) in r.baseline.iter().zip(&r.treatment).enumerate() {
                s += &format!("{:<6} {:>10.4} {:>10.4} {:>+10.4}\n", i, b, t, t - b);
            }
        }
        for c in &self.comparisons {
            s += &format!(
                "\n{}: mean {:.4} -> {:.4}\n  paired t: {}\n  wilcoxon: {}\n  cohen's d: {}\n",
                c.metric,
                c.baseline_mean,
                c.treatment_mean,
                show(&c.t_test, |t| format!("t = {:.4}, dof = {}, p = {:.4}", t.t, t.dof, t.p)),
                show(&c.wilcoxon, |w| format!("W = {}, n = {}, p = {:.4}", w.w, w.n, w.p)),
                show(&c.cohens_d, |d| format!("{d:.3}")),
            );
        }
        s
    }
}
