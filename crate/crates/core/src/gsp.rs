//! Soft spectral protection of format-critical activation directions.
//!
//! For each activation space the Instruct activations at the format
//! neighbourhood are stacked into `H`. Its right singular vectors `v_r` with
//! relative strength `a_r = σ_r / σ_1` get a protection weight
//! `w_r = sigmoid(k (a_r - τ))`, `k = ln 99 / τ`, and an edit whose input
//! dimension reads that space is filtered as `Δ - Δ V diag(w) Vᵀ`.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::calibration::Neighborhood;
use crate::linalg::{dot, thin_svd};
use crate::micro::{CaptureRequest, ForwardTrace};
use crate::schema::InputSide;
use crate::{Error, Result};

/// Exponent arguments are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 60.0;
/// Protection weights are clamped to `[W_FLOOR, 1 - W_FLOOR]`.
pub const W_FLOOR: f64 = 1e-12;

/// Steepness that maps `a = 0` to 0.01 and `a = 2τ` to 0.99.
pub fn steepness(tau: f64) -> f64 {
    libm::log(99.0) / tau
}

pub fn protection_weight(a: f64, tau: f64, k: f64) -> f64 {
    let z = (-k * (a - tau)).clamp(-EXP_CLAMP, EXP_CLAMP);
    let w = 1.0 / (1.0 + libm::exp(z));
    w.clamp(W_FLOOR, 1.0 - W_FLOOR)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidValue {
            what: "tau",
            value: tau,
        })
    }
}

/// Row-major activation matrix for one space.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    pub space: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Capture requests that record `spaces` at every neighbourhood position.
pub fn capture_requests(
    neighborhood: &Neighborhood,
    examples: usize,
    spaces: &[String],
) -> Vec<CaptureRequest> {
    (0..examples)
        .map(|i| {
            let positions: BTreeSet<usize> = neighborhood.positions_of(i).collect();
            if positions.is_empty() {
                return CaptureRequest::new();
            }
            spaces
                .iter()
                .map(|s| (s.clone(), positions.clone()))
                .collect()
        })
        .collect()
}

/// Stacks captured rows in (example, position) order.
pub fn build_activation_matrix(
    traces: &[ForwardTrace],
    space: &str,
    neighborhood: &Neighborhood,
) -> Result<ActivationMatrix> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for &(example, position) in &neighborhood.positions {
        let missing = || Error::MissingCapture {
            space: space.into(),
            example,
            position,
        };
        let row = traces
            .get(example)
            .and_then(|t| t.captured.get(space))
            .and_then(|m| m.get(&position))
            .ok_or_else(missing)?;
        if rows == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: row.len(),
            });
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "activation {bad} in {space} at example {example}, position {position}"
            )));
        }
        data.extend_from_slice(row);
        rows += 1;
    }
    Ok(ActivationMatrix {
        space: space.into(),
        rows,
        cols,
        data,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GspProjector {
    pub space: String,
    /// Input dimension `d_q`.
    pub dim: usize,
    /// Retained right singular vectors, each of length `dim`.
    pub v: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub w: Vec<f64>,
    pub tau: f64,
    pub k: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projector {
    Soft(GspProjector),
    Identity,
}

/// SVD of `H` and sigmoid weights; identity for an empty or all-zero `H`.
pub fn build_projector(h: &ActivationMatrix, tau: f64) -> Result<Projector> {
    check_tau(tau)?;
    if let Some(bad) = h.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!(
            "activation {bad} in {}",
            h.space
        )));
    }
    let svd = thin_svd(&h.data, h.rows, h.cols);
    if svd.sigma.is_empty() {
        return Ok(Projector::Identity);
    }
    let k = steepness(tau);
    let s1 = svd.sigma[0];
    let w = svd
        .sigma
        .iter()
        .map(|&s| protection_weight(s / s1, tau, k))
        .collect();
    Ok(Projector::Soft(GspProjector {
        space: h.space.clone(),
        dim: h.cols,
        v: svd.v,
        sigma: svd.sigma,
        w,
        tau,
        k,
    }))
}

impl GspProjector {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `a_r = σ_r / σ_1`
    pub fn relative_strengths(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s / self.sigma[0]).collect()
    }

    /// Filters every row of a row-major `rows × dim` matrix in place.
    pub fn project_rows(&self, delta: &mut [f64]) -> Result<()> {
        if self.dim == 0 || !delta.len().is_multiple_of(self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: delta.len(),
            });
        }
        let mut coeff = vec![0.0; self.rank()];
        for row in delta.chunks_exact_mut(self.dim) {
            for (c, (v, w)) in coeff.iter_mut().zip(self.v.iter().zip(&self.w)) {
                *c = w * dot(row, v);
            }
            for (c, v) in coeff.iter().zip(&self.v) {
                if *c != 0.0 {
                    for (x, vi) in row.iter_mut().zip(v) {
                        *x -= c * vi;
                    }
                }
            }
        }
        Ok(())
    }

    /// `Σ_r σ_r² ‖Δ v_r‖²`
    pub fn format_energy(&self, delta: &[f64]) -> Result<f64> {
        self.spectral_energy(delta, |_| 1.0)
    }

    /// Energy left after projection, `Σ_r σ_r² (1 - w_r)² ‖Δ v_r‖²`.
    pub fn post_energy(&self, delta: &[f64]) -> Result<f64> {
        self.spectral_energy(delta, |r| {
            let s = 1.0 - self.w[r];
            s * s
        })
    }

    fn spectral_energy(&self, delta: &[f64], factor: impl Fn(usize) -> f64) -> Result<f64> {
        if self.dim == 0 || !delta.len().is_multiple_of(self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: delta.len(),
            });
        }
        let mut total = 0.0;
        for (r, (v, s)) in self.v.iter().zip(&self.sigma).enumerate() {
            let mut dv2 = 0.0;
            for row in delta.chunks_exact(self.dim) {
                let c = dot(row, v);
                dv2 += c * c;
            }
            total += s * s * factor(r) * dv2;
        }
        Ok(total)
    }
}

/// `‖H Δᵀ‖_F²` for a row-major `rows × d` edit.
pub fn format_energy_direct(delta: &[f64], h: &ActivationMatrix) -> Result<f64> {
    if h.cols == 0 {
        return Ok(0.0);
    }
    if !delta.len().is_multiple_of(h.cols) {
        return Err(Error::DimensionMismatch {
            expected: h.cols,
            found: delta.len(),
        });
    }
    let mut total = 0.0;
    for hrow in h.data.chunks_exact(h.cols) {
        for drow in delta.chunks_exact(h.cols) {
            let x = dot(hrow, drow);
            total += x * x;
        }
    }
    Ok(total)
}

/// Row-major transpose.
pub fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Input dimension of a stored 2-D weight, or `None` when the tensor is not
/// a matrix (biases and higher-order tensors are never projected).
pub fn input_dim(shape: &[usize], side: InputSide) -> Option<usize> {
    match (shape, side) {
        ([_, d], InputSide::Right) => Some(*d),
        ([d, _], InputSide::Left) => Some(*d),
        _ => None,
    }
}

/// Projects an edit stored with the given layout. Returns `Ok(false)` and
/// leaves the edit untouched when the tensor is not 2-D.
pub fn apply_projector(
    proj: &GspProjector,
    edit: &mut Vec<f64>,
    shape: &[usize],
    side: InputSide,
) -> Result<bool> {
    let Some(d) = input_dim(shape, side) else {
        return Ok(false);
    };
    if d != proj.dim {
        return Err(Error::DimensionMismatch {
            expected: proj.dim,
            found: d,
        });
    }
    match side {
        InputSide::Right => proj.project_rows(edit)?,
        InputSide::Left => {
            let (rows, cols) = (shape[0], shape[1]);
            let mut t = transpose(edit, rows, cols);
            proj.project_rows(&mut t)?;
            *edit = transpose(&t, cols, rows);
        }
    }
    Ok(true)
}

/// Projectors keyed by space; spaces without usable activations map to the
/// identity.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GspProjectorSet {
    pub projectors: BTreeMap<String, GspProjector>,
    pub identity_spaces: BTreeSet<String>,
    pub tau: f64,
    pub k: f64,
}

impl GspProjectorSet {
    pub fn build(matrices: impl IntoIterator<Item = ActivationMatrix>, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let mut set = GspProjectorSet {
            tau,
            k: steepness(tau),
            ..Default::default()
        };
        for h in matrices {
            set.insert(h.space.clone(), build_projector(&h, tau)?);
        }
        Ok(set)
    }

    pub fn insert(&mut self, space: String, projector: Projector) {
        match projector {
            Projector::Soft(p) => {
                self.identity_spaces.remove(&space);
                self.projectors.insert(space, p);
            }
            Projector::Identity => {
                self.projectors.remove(&space);
                self.identity_spaces.insert(space);
            }
        }
    }

    pub fn get(&self, space: &str) -> Option<&GspProjector> {
        self.projectors.get(space)
    }

    /// Same spectra with weights recomputed for another τ.
    pub fn retune(&self, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        let k = steepness(tau);
        let mut out = self.clone();
        out.tau = tau;
        out.k = k;
        for p in out.projectors.values_mut() {
            p.w = p
                .relative_strengths()
                .iter()
                .map(|&a| protection_weight(a, tau, k))
                .collect();
            p.tau = tau;
            p.k = k;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if let Some(s) = self
            .projectors
            .keys()
            .find(|k| self.identity_spaces.contains(*k))
        {
            return Err(Error::InvalidConfig(alloc::format!(
                "space {s} is both projected and identity"
            )));
        }
        for p in self.projectors.values() {
            let r = p.sigma.len();
            if p.v.len() != r || p.w.len() != r || p.v.iter().any(|v| v.len() != p.dim) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "projector {} has inconsistent rank or width",
                    p.space
                )));
            }
            if p.w.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
                return Err(Error::InvalidConfig(alloc::format!(
                    "projector {} has weights outside (0, 1)",
                    p.space
                )));
            }
        }
        Ok(())
    }
}
