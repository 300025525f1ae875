//! Repetition statistics for wall-clock measurements.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Warm-up runs before timing starts.
pub const DEFAULT_WARMUP: usize = 1;
/// Timed repetitions per configuration.
pub const DEFAULT_REPS: usize = 5;

/// Order statistics of a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    /// Interquartile range.
    pub iqr: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Summary::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let count = sorted.len();
        let mean = sorted.iter().sum::<f64>() / count as f64;
        Summary {
            count,
            median: quantile(&sorted, 0.5),
            iqr: quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
            mean,
            min: sorted[0],
            max: sorted[count - 1],
        }
    }

    /// Coefficient of variation estimated from the samples' standard
    /// deviation; recomputed by the caller since `Summary` keeps no samples.
    pub fn coefficient_of_variation(samples: &[f64]) -> f64 {
        if samples.len() < 2 {
            return 0.0;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        if mean == 0.0 {
            0.0
        } else {
            var.sqrt() / mean
        }
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Runs `f` `warmup` times untimed, then `reps` times timed, and returns
/// the per-run seconds.
pub fn time_runs<T>(warmup: usize, reps: usize, mut f: impl FnMut() -> T) -> Vec<f64> {
    for _ in 0..warmup {
        std::hint::black_box(f());
    }
    (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(f());
            start.elapsed().as_secs_f64()
        })
        .collect()
}
