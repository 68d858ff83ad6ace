//! Resampling machinery shared by the clinical-score tests and the census.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Resamples drawn per seeded substream. Block boundaries are fixed so that
/// results do not depend on the number of worker threads.
const BLOCK: usize = 1024;

/// How resampled index tuples are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resampling {
    /// `resamples` draws with replacement from a seeded generator.
    Random { resamples: usize, seed: u64 },
    /// Every one of the `n^n` index tuples, once each.
    Exhaustive,
}

impl Resampling {
    pub fn random(resamples: usize, seed: u64) -> Self {
        Resampling::Random { resamples, seed }
    }
}

/// Upper bound on tuples enumerated by [`Resampling::Exhaustive`].
pub const MAX_EXHAUSTIVE: usize = 1 << 22;

/// Means of every bootstrap resample of `values`, in deterministic order.
///
/// Panics if `values` is empty or the exhaustive enumeration would exceed
/// [`MAX_EXHAUSTIVE`] tuples.
pub fn resampled_means(values: &[f64], scheme: Resampling) -> Vec<f64> {
    let n = values.len();
    assert!(n > 0, "cannot resample an empty sample");
    match scheme {
        Resampling::Random { resamples, seed } => {
            let blocks = resamples.div_ceil(BLOCK);
            let per_block: Vec<Vec<f64>> = (0..blocks)
                .into_par_iter()
                .map(|b| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(b as u64);
                    let count = BLOCK.min(resamples - b * BLOCK);
                    (0..count)
                        .map(|_| {
                            let mut acc = 0.0;
                            for _ in 0..n {
                                acc += values[rng.gen_range(0..n)];
                            }
                            acc / n as f64
                        })
                        .collect()
                })
                .collect();
            per_block.into_iter().flatten().collect()
        }
        Resampling::Exhaustive => {
            let total = (n as u32)
                .checked_pow(n as u32)
                .map(|t| t as usize)
                .filter(|&t| t <= MAX_EXHAUSTIVE)
                .expect("exhaustive bootstrap too large");
            let mut idx = vec![0usize; n];
            let mut out = Vec::with_capacity(total);
            for _ in 0..total {
                let acc: f64 = idx.iter().map(|&i| values[i]).sum();
                out.push(acc / n as f64);
                // odometer increment, last digit fastest
                for digit in idx.iter_mut().rev() {
                    *digit += 1;
                    if *digit < n {
                        break;
                    }
                    *digit = 0;
                }
            }
            out
        }
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice, with `q` in
/// `[0, 1]`. Position `q * (len - 1)` is interpolated between neighbours.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let w = pos - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Two-sided percentile interval at `level` (e.g. 0.95).
pub fn percentile_interval(samples: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (
        percentile_sorted(&sorted, tail),
        percentile_sorted(&sorted, 1.0 - tail),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileCi {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Percentile-bootstrap interval for the mean of `values`.
pub fn mean_ci(values: &[f64], scheme: Resampling, level: f64) -> PercentileCi {
    let means = resampled_means(values, scheme);
    let (ci_low, ci_high) = percentile_interval(&means, level);
    PercentileCi {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        ci_low,
        ci_high,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhaustive_count_and_order() {
        let m = resampled_means(&[0.0, 3.0], Resampling::Exhaustive);
        assert_eq!(m, vec![0.0, 1.5, 1.5, 3.0]);
    }

    #[test]
    fn random_is_thread_count_independent() {
        let vals: Vec<f64> = (0..17).map(|i| (i * i) as f64 * 0.3).collect();
        let a = resampled_means(&vals, Resampling::random(5000, 9));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| resampled_means(&vals, Resampling::random(5000, 9)));
        assert_eq!(a.len(), 5000);
        assert_eq!(a, b);
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&s, 0.0), 1.0);
        assert_eq!(percentile_sorted(&s, 1.0), 5.0);
        assert_eq!(percentile_sorted(&s, 0.5), 3.0);
        assert!((percentile_sorted(&s, 0.1) - 1.4).abs() < 1e-12);
    }
}
