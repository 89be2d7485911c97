//! Dense symmetric eigendecomposition and thin SVD by Jacobi rotations.
//!
//! Matrices are row-major `f64` slices. Sizes here are activation widths of
//! desk-scale models, so the O(n³) sweeps are cheap and the accuracy of
//! Jacobi methods matters more than speed.

use alloc::vec;
use alloc::vec::Vec;

const MAX_SWEEPS: usize = 100;

/// Eigenvalues and unit eigenvectors of a symmetric `n × n` matrix, sorted
/// by descending eigenvalue. `vectors[i]` pairs with `values[i]`.
pub fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(a.len(), n * n, "matrix must be n x n");
    let mut a = a.to_vec();
    // Columns of v accumulate the rotations.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off <= 1e-32 * frob || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

/// Right singular vectors and singular values of an `rows × cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// Descending, all above the truncation floor.
    pub sigma: Vec<f64>,
    /// Orthonormal, each of length `cols`.
    pub v: Vec<Vec<f64>>,
}

/// Relative floor below which singular values are treated as zero.
pub const RANK_FLOOR: f64 = 1e-10;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

fn mat_vec(h: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| dot(&h[i * cols..(i + 1) * cols], x))
        .collect()
}

/// Thin SVD keeping singular values above `RANK_FLOOR · σ_1`.
///
/// Tall matrices start from the eigenvectors of the `cols × cols` Gram matrix
/// and polish `H V` with one-sided Jacobi; singular values are the resulting
/// column norms. Wide or square matrices use one-sided Jacobi on `Hᵀ`.
pub fn thin_svd(h: &[f64], rows: usize, cols: usize) -> Svd {
    assert_eq!(h.len(), rows * cols, "matrix must be rows x cols");
    if rows == 0 || cols == 0 {
        return Svd {
            sigma: Vec::new(),
            v: Vec::new(),
        };
    }
    let mut pairs = if rows > cols {
        gram_route(h, rows, cols)
    } else {
        jacobi_route(h, rows, cols)
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = pairs.first().map_or(0.0, |p| p.0);
    if !(top > 0.0) {
        return Svd {
            sigma: Vec::new(),
            v: Vec::new(),
        };
    }
    pairs.retain(|p| p.0 > RANK_FLOOR * top);
    let (sigma, mut v): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    reorthonormalize(&mut v);
    Svd { sigma, v }
}

fn gram_route(h: &[f64], rows: usize, cols: usize) -> Vec<(f64, Vec<f64>)> {
    let mut g = vec![0.0; cols * cols];
    for r in 0..rows {
        let row = &h[r * cols..(r + 1) * cols];
        for i in 0..cols {
            if row[i] == 0.0 {
                continue;
            }
            for j in i..cols {
                g[i * cols + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            g[i * cols + j] = g[j * cols + i];
        }
    }
    let (_, mut v) = sym_eigen(&g, cols);
    // Gram eigenvectors leave ~sqrt(eps)·σ_1 residue in null directions.
    // A one-sided Jacobi polish on H V removes it and converges in a sweep
    // or two from this starting point.
    let mut b: Vec<Vec<f64>> = v.iter().map(|x| mat_vec(h, rows, cols, x)).collect();
    one_sided_jacobi(&mut b, Some(&mut v));
    b.iter().zip(v).map(|(col, x)| (norm(col), x)).collect()
}

fn jacobi_route(h: &[f64], rows: usize, cols: usize) -> Vec<(f64, Vec<f64>)> {
    // Columns of Hᵀ are the rows of H. Orthogonalizing them gives Hᵀ W = V Σ.
    let mut b: Vec<Vec<f64>> = (0..rows)
        .map(|r| h[r * cols..(r + 1) * cols].to_vec())
        .collect();
    one_sided_jacobi(&mut b, None);
    b.into_iter()
        .map(|col| {
            let s = norm(&col);
            let v = if s > 0.0 {
                col.iter().map(|x| x / s).collect()
            } else {
                col
            };
            (s, v)
        })
        .collect()
}

fn rotate(x: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = x.split_at_mut(j);
    for (a, b) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (ai, bj) = (*a, *b);
        *a = c * ai - s * bj;
        *b = s * ai + c * bj;
    }
}

/// Hestenes rotations until the columns of `b` are mutually orthogonal;
/// `accum` receives the same rotations.
fn one_sided_jacobi(b: &mut [Vec<f64>], mut accum: Option<&mut Vec<Vec<f64>>>) {
    let n = b.len();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&b[i], &b[i]);
                let beta = dot(&b[j], &b[j]);
                let gamma = dot(&b[i], &b[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(b, i, j, c, s);
                if let Some(v) = accum.as_deref_mut() {
                    rotate(v, i, j, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// Two passes of modified Gram-Schmidt in the given order.
fn reorthonormalize(v: &mut [Vec<f64>]) {
    for _ in 0..2 {
        for i in 0..v.len() {
            let (done, rest) = v.split_at_mut(i);
            let cur = &mut rest[0];
            for prev in done.iter() {
                let c = dot(prev, cur);
                for (x, p) in cur.iter_mut().zip(prev) {
                    *x -= c * p;
                }
            }
            let n = norm(cur);
            for x in cur.iter_mut() {
                *x /= n;
            }
        }
    }
}
