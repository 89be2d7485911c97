//! Thinking-minus-Instruct deltas and the median-magnitude sparsifier.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Above this element count the median uses selection instead of a full sort.
const SORT_LIMIT: usize = 1 << 22;

/// Elementwise `think - inst` in `f64`.
pub fn delta(name: &str, inst: &Tensor, think: &Tensor) -> Result<Vec<f64>> {
    if inst.shape() != think.shape() {
        return Err(Error::ShapeMismatch {
            name: name.into(),
            expected: inst.shape().to_vec(),
            found: think.shape().to_vec(),
        });
    }
    Ok(think
        .to_f64()
        .into_iter()
        .zip(inst.to_f64())
        .map(|(t, i)| t - i)
        .collect())
}

/// Median of `values`; the mean of the two middle order statistics for even
/// counts. Returns 0 for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    if n <= SORT_LIMIT {
        v.sort_unstable_by(cmp);
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    } else {
        let (_, hi, _) = v.select_nth_unstable_by(n / 2, cmp);
        let hi = *hi;
        if n % 2 == 1 {
            hi
        } else {
            let lo = v[..n / 2]
                .iter()
                .copied()
                .max_by(|a, b| a.total_cmp(b))
                .unwrap_or(hi);
            (lo + hi) / 2.0
        }
    }
}

/// Keeps `2·δ_j` where `|δ_j|` is strictly above the median magnitude of this
/// tensor, zero elsewhere.
pub fn sparsify(delta: &[f64]) -> Vec<f64> {
    let mags: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    let threshold = median(&mags);
    delta
        .iter()
        .zip(&mags)
        .map(|(&d, &m)| {
            if m.partial_cmp(&threshold) == Some(Ordering::Greater) {
                2.0 * d
            } else {
                0.0
            }
        })
        .collect()
}
