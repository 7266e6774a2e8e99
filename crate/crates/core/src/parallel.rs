//! Order-preserving parallel maps.
//!
//! Work items are keyed by index, results are collected in index order and
//! every reduction afterwards runs sequentially, so sums do not depend on the
//! number of workers.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maximum paths held in memory at once by chunked Monte Carlo estimators.
pub const CHUNK: u64 = 8192;

/// Runs `f` over `range` in parallel and returns results in index order.
pub fn map_indexed<T, F>(range: Range<u64>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    range.into_par_iter().map(f).collect()
}

/// Runs `body` on a dedicated pool with `workers` threads (0 means rayon's default).
pub fn with_workers<T: Send>(workers: usize, body: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("workers", e.to_string()))?;
    Ok(pool.install(body))
}

/// Splits `0..n` into consecutive chunks of at most [`CHUNK`] indices.
pub fn chunks(n: u64) -> impl Iterator<Item = Range<u64>> {
    (0..n.div_ceil(CHUNK)).map(move |c| c * CHUNK..((c + 1) * CHUNK).min(n))
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_index_order() {
        let v = map_indexed(0..1000, |i| Ok(i * 3)).unwrap();
        assert!(v.iter().enumerate().all(|(i, x)| *x == 3 * i as u64));
    }

    #[test]
    fn chunks_cover_range() {
        let c: Vec<_> = chunks(2 * CHUNK + 5).collect();
        assert_eq!(c.len(), 3);
        assert_eq!(c[2], 2 * CHUNK..2 * CHUNK + 5);
        assert_eq!(chunks(0).count(), 0);
    }

    #[test]
    fn worker_count_does_not_change_sums() {
        let sum = |w| {
            with_workers(w, || {
                map_indexed(0..5000, |i| Ok((i as f64).sqrt().sin()))
                    .unwrap()
                    .iter()
                    .sum::<f64>()
            })
            .unwrap()
        };
        assert_eq!(sum(1).to_bits(), sum(3).to_bits());
    }

    #[test]
    fn standard_error_of_constant_is_zero() {
        assert_eq!(mean_and_se(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
