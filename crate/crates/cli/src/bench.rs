//! Inference latency measurement.

use crackscreen::model::Model;
use crackscreen::tensor::Tensor;
use crackscreen::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub arch: String,
    pub batch_size: usize,
    pub threads: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub latencies_ms: Vec<f64>,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Images per second at the median latency.
    pub throughput: f64,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

impl BenchResult {
    pub fn from_latencies(arch: &str, batch_size: usize, threads: usize, warmup: usize, latencies_ms: Vec<f64>) -> Self {
        let mut sorted = latencies_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median_ms = median(&sorted);
        Self {
            arch: arch.to_string(),
            batch_size,
            threads,
            iterations: latencies_ms.len(),
            warmup,
            median_ms,
            p95_ms: percentile(&sorted, 0.95),
            throughput: batch_size as f64 * 1000.0 / median_ms,
            latencies_ms,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: batch {} on {} thread(s), {} iterations after {} warmup\n  median {:.3} ms  p95 {:.3} ms  {:.1} images/s",
            self.arch, self.batch_size, self.threads, self.iterations, self.warmup, self.median_ms, self.p95_ms, self.throughput
        )
    }
}

/// Times eval-mode forward passes on a fixed random batch in the current
/// thread pool.
pub fn bench(model: &Model<f32>, batch_size: usize, iterations: usize, warmup: usize) -> Result<BenchResult> {
    if iterations < 10 {
        return Err(Error::config("bench.iterations", format!("{iterations} < 10")));
    }
    if warmup < 1 {
        return Err(Error::config("bench.warmup", "must be at least 1"));
    }
    if batch_size == 0 {
        return Err(Error::config("bench.batch", "must be at least 1"));
    }
    let shape = model.input_shape(batch_size);
    let x = Tensor::from_fn(&shape, |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0);
    for _ in 0..warmup {
        model.predict_logits(&x)?;
    }
    let mut latencies = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        std::hint::black_box(model.predict_logits(&x)?);
        latencies.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(BenchResult::from_latencies(&model.config.name, batch_size, rayon::current_num_threads(), warmup, latencies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crackscreen::arch::ArchConfig;

    #[test]
    fn statistics_of_known_latencies() {
        let r = BenchResult::from_latencies("m", 1, 1, 1, (1..=20).map(f64::from).collect());
        assert_eq!(r.median_ms, 10.5);
        assert_eq!(r.p95_ms, 19.0);
        assert!((r.throughput - 1000.0 / 10.5).abs() < 1e-9);
        let r = BenchResult::from_latencies("m", 4, 1, 1, vec![2.0; 11]);
        assert_eq!(r.throughput, 2000.0);
    }

    #[test]
    fn argument_bounds() {
        let m = Model::new(&ArchConfig::preset("tiny").unwrap(), 0).unwrap();
        assert!(bench(&m, 1, 9, 1).is_err());
        assert!(bench(&m, 1, 10, 0).is_err());
        let r = bench(&m, 1, 10, 1).unwrap();
        assert_eq!(r.latencies_ms.len(), 10);
        assert!((r.throughput - 1000.0 / r.median_ms).abs() <= 0.01 * r.throughput);
    }
}
