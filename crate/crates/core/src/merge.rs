//! The three-stage merge and the baseline merge rules.
//!
//! Every rule works tensor by tensor in `f64` and narrows the result to the
//! Instruct dtype. Coordinates whose edit is exactly zero keep the Instruct
//! bytes, so a degenerate merge reproduces the Instruct archive bit for bit.
//! The per-tensor functions are pure; callers may evaluate them in any order
//! or in parallel.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::delta::{delta, sparsify};
use crate::gsp::{apply_projector, input_dim, GspProjectorSet};
use crate::schema::{Binding, BoundSchema, ComponentKind, Layer};
use crate::taylor::{arch_normalize, SalienceTable};
use crate::tensor::{check_paired, Tensor, TensorMap};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MergeConfig {
    pub alpha: f64,
    pub tau: f64,
    pub rho: usize,
    pub use_sparsifier: bool,
    pub use_taylor: bool,
    pub use_gsp: bool,
    pub arch_normalize: bool,
}

impl MergeConfig {
    pub fn crane_30b() -> Self {
        MergeConfig {
            alpha: 0.25,
            tau: 0.03,
            rho: 2,
            use_sparsifier: true,
            use_taylor: true,
            use_gsp: true,
            arch_normalize: false,
        }
    }

    pub fn crane_80b() -> Self {
        MergeConfig {
            alpha: 0.15,
            arch_normalize: true,
            ..Self::crane_30b()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "crane-30b" => Some(Self::crane_30b()),
            "crane-80b" => Some(Self::crane_80b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidValue {
                what: "alpha",
                value: self.alpha,
            });
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidValue {
                what: "tau",
                value: self.tau,
            });
        }
        Ok(())
    }
}

/// Adds `edit` to the Instruct tensor, keeping Instruct bytes where the edit
/// is exactly zero.
pub fn apply_edit(inst: &Tensor, edit: &[f64]) -> Tensor {
    let dtype = inst.dtype();
    let w = dtype.width();
    let mut bytes = inst.bytes().to_vec();
    for (j, (&e, chunk)) in edit.iter().zip(bytes.chunks_exact_mut(w)).enumerate() {
        if e != 0.0 {
            dtype.encode(inst.get(j) + e, chunk);
        }
    }
    Tensor::from_bytes(dtype, inst.shape().to_vec(), bytes).expect("layout unchanged")
}

/// Salience, projectors and schema shared by every tensor of one merge.
#[derive(Clone, Debug)]
pub struct MergeContext<'a> {
    pub bound: &'a BoundSchema,
    salience: Option<SalienceTable>,
    pub projectors: Option<&'a GspProjectorSet>,
    pub cfg: MergeConfig,
}

impl<'a> MergeContext<'a> {
    /// Arch-normalizes the table here unless it already was.
    pub fn new(
        bound: &'a BoundSchema,
        salience: Option<&SalienceTable>,
        projectors: Option<&'a GspProjectorSet>,
        cfg: MergeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let salience = match salience {
            Some(t)
                if cfg.arch_normalize
                    && t.metadata.get("arch_normalized").map(String::as_str) != Some("true") =>
            {
                Some(arch_normalize(t, bound)?)
            }
            Some(t) => Some(t.clone()),
            None => None,
        };
        if cfg.use_taylor && salience.is_none() {
            return Err(Error::InvalidConfig(
                "the Taylor stage needs a salience table".into(),
            ));
        }
        if cfg.use_gsp && projectors.is_none() {
            return Err(Error::InvalidConfig(
                "the projection stage needs a projector set".into(),
            ));
        }
        Ok(MergeContext {
            bound,
            salience,
            projectors,
            cfg,
        })
    }

    pub fn salience(&self) -> Option<&SalienceTable> {
        self.salience.as_ref()
    }
}

/// What happened to one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub numel: usize,
    /// Coordinates left nonzero by the sparsifier (all nonzero delta
    /// coordinates when it is off).
    pub surviving: usize,
    /// `α · S` applied to this tensor.
    pub scale: f64,
    pub projected: bool,
    pub warning: Option<String>,
}

fn binding<'b>(bound: &'b BoundSchema, name: &str) -> Result<&'b Binding> {
    bound
        .get(name)
        .ok_or_else(|| Error::UnmatchedName(name.into()))
}

/// Edit for a single tensor before and after the projection stage.
pub fn crane_edit(
    name: &str,
    inst: &Tensor,
    think: &Tensor,
    ctx: &MergeContext<'_>,
) -> Result<(Vec<f64>, Vec<f64>, TensorReport)> {
    let cfg = &ctx.cfg;
    let b = binding(ctx.bound, name)?;
    let d = delta(name, inst, think)?;
    let t = if cfg.use_sparsifier { sparsify(&d) } else { d };
    let surviving = t.iter().filter(|v| **v != 0.0).count();
    let s = if cfg.use_taylor {
        let table = ctx.salience.as_ref().expect("checked in MergeContext::new");
        table
            .coefficient(b.component.kind, b.component.layer)
            .ok_or_else(|| Error::MissingSalience {
                kind: b.component.kind.name().into(),
                layer: format!("{}", b.component.layer),
            })?
    } else {
        1.0
    };
    let scale = cfg.alpha * s;
    let unprojected: Vec<f64> = t.iter().map(|v| scale * v).collect();
    let mut edit = unprojected.clone();
    let mut projected = false;
    let mut warning = None;
    if cfg.use_gsp && input_dim(inst.shape(), b.input_side).is_some() {
        if let Some(space) = &b.space {
            let set = ctx.projectors.expect("checked in MergeContext::new");
            if let Some(p) = set.get(space) {
                match apply_projector(p, &mut edit, inst.shape(), b.input_side) {
                    Ok(done) => projected = done,
                    Err(Error::DimensionMismatch { expected, found }) => {
                        warning = Some(format!(
                            "{name}: input width {found} does not match projector {space} width {expected}; left unprojected"
                        ));
                    }
                    Err(e) => return Err(e),
                }
            } else if !set.identity_spaces.contains(space) {
                return Err(Error::MissingProjector(space.clone()));
            }
        }
    }
    let report = TensorReport {
        name: name.into(),
        numel: inst.numel(),
        surviving,
        scale,
        projected,
        warning,
    };
    Ok((unprojected, edit, report))
}

/// The merge for a single tensor.
pub fn crane_tensor(
    name: &str,
    inst: &Tensor,
    think: &Tensor,
    ctx: &MergeContext<'_>,
) -> Result<(Tensor, TensorReport)> {
    let (_, edit, report) = crane_edit(name, inst, think, ctx)?;
    Ok((apply_edit(inst, &edit), report))
}

/// Per-stage statistics of a merge.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MergeStats {
    pub tensors: usize,
    pub coordinates: usize,
    /// Fraction of coordinates nonzero after the sparsifier.
    pub surviving_fraction: f64,
    /// `kind@layer` → coefficient used.
    pub salience: BTreeMap<String, f64>,
    /// space → mean protection weight.
    pub mean_w: BTreeMap<String, f64>,
    pub projected_tensors: usize,
    pub warnings: Vec<String>,
}

impl MergeStats {
    /// Folds reports in the given order.
    pub fn collect<'r>(
        reports: impl IntoIterator<Item = &'r TensorReport>,
        ctx: &MergeContext<'_>,
    ) -> Self {
        let mut st = MergeStats::default();
        let mut surviving = 0usize;
        for r in reports {
            st.tensors += 1;
            st.coordinates += r.numel;
            surviving += r.surviving;
            if r.projected {
                st.projected_tensors += 1;
            }
            if let Some(w) = &r.warning {
                st.warnings.push(w.clone());
            }
        }
        if st.coordinates > 0 {
            st.surviving_fraction = surviving as f64 / st.coordinates as f64;
        }
        if ctx.cfg.use_taylor {
            if let Some(t) = &ctx.salience {
                for e in t.grid() {
                    st.salience
                        .insert(format!("{}@{}", e.row, e.layer), e.value);
                }
            }
        }
        if ctx.cfg.use_gsp {
            if let Some(set) = ctx.projectors {
                for (space, p) in &set.projectors {
                    let mean = p.w.iter().sum::<f64>() / p.w.len() as f64;
                    st.mean_w.insert(space.clone(), mean);
                }
            }
        }
        st
    }
}

/// Whole-archive merge, tensor by tensor in name order.
pub fn crane_merge(
    inst: &TensorMap,
    think: &TensorMap,
    ctx: &MergeContext<'_>,
) -> Result<(TensorMap, MergeStats)> {
    check_paired(inst, think)?;
    let mut out = TensorMap::new();
    let mut reports = Vec::with_capacity(inst.len());
    for (name, ti) in inst {
        let (t, r) = crane_tensor(name, ti, &think[name], ctx)?;
        out.insert(name.clone(), t);
        reports.push(r);
    }
    let stats = MergeStats::collect(&reports, ctx);
    for w in &stats.warnings {
        log::warn!("{w}");
    }
    Ok((out, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BaselineMethod {
    TaskArithmetic,
    Ties,
    Slerp,
    AimTa,
    AimTies,
}

impl BaselineMethod {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ta" | "task_arithmetic" => BaselineMethod::TaskArithmetic,
            "ties" => BaselineMethod::Ties,
            "slerp" => BaselineMethod::Slerp,
            "aim-ta" | "aim_ta" => BaselineMethod::AimTa,
            "aim-ties" | "aim_ties" => BaselineMethod::AimTies,
            _ => return None,
        })
    }

    pub fn uses_aim(self) -> bool {
        matches!(self, BaselineMethod::AimTa | BaselineMethod::AimTies)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub alpha: f64,
    pub t: f64,
    pub density: f64,
    pub omega: f64,
}

impl BaselineConfig {
    /// Settings used for the 30B baselines.
    pub fn paper_30b(method: BaselineMethod) -> Self {
        BaselineConfig {
            method,
            alpha: 0.30,
            t: 0.30,
            density: 0.50,
            omega: 0.40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidValue {
                what: "alpha",
                value: self.alpha,
            });
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidValue {
                what: "density",
                value: self.density,
            });
        }
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidValue {
                what: "t",
                value: self.t,
            });
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidValue {
                what: "omega",
                value: self.omega,
            });
        }
        Ok(())
    }
}

/// Number of coordinates TIES keeps at `density`.
pub fn ties_keep_count(density: f64, len: usize) -> usize {
    // The small slack keeps products like 0.3 · 10 from flooring to 2.
    let k = libm::floor(density * len as f64 + 1e-9) as usize;
    k.min(len)
}

/// Zeroes all but the `k` largest magnitudes; equal magnitudes favour the
/// lower index.
pub fn ties_trim(delta: &[f64], density: f64) -> Vec<f64> {
    let k = ties_keep_count(density, delta.len());
    let mut idx: Vec<usize> = (0..delta.len()).collect();
    idx.sort_by(|&i, &j| delta[j].abs().total_cmp(&delta[i].abs()).then(i.cmp(&j)));
    let mut out = alloc::vec![0.0; delta.len()];
    for &i in &idx[..k] {
        out[i] = delta[i];
    }
    out
}

/// Full TIES combination of several task vectors: trim, elect the sign of
/// the summed trimmed values, average the entries that agree with it.
pub fn ties_combine(deltas: &[Vec<f64>], density: f64) -> Vec<f64> {
    let trimmed: Vec<Vec<f64>> = deltas.iter().map(|d| ties_trim(d, density)).collect();
    let n = trimmed.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let total: f64 = trimmed.iter().map(|t| t[j]).sum();
            let sign = if total > 0.0 {
                1.0
            } else if total < 0.0 {
                -1.0
            } else {
                return 0.0;
            };
            let mut sum = 0.0;
            let mut count = 0;
            for t in &trimmed {
                if t[j] * sign > 0.0 {
                    sum += t[j];
                    count += 1;
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Spherical interpolation of two flattened tensors.
pub fn slerp_values(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let lerp = || {
        a.iter()
            .zip(b)
            .map(|(x, y)| (1.0 - t) * x + t * y)
            .collect()
    };
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return lerp();
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let omega = libm::acos(cos);
    if omega < 1e-7 {
        return lerp();
    }
    let s = libm::sin(omega);
    let ca = libm::sin((1.0 - t) * omega) / s;
    let cb = libm::sin(t * omega) / s;
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

/// Scales input channel `j` of a 2-D edit by `1 - (1 - ω)·m_j / max m`.
/// Returns `Ok(false)` when the tensor is not 2-D or `m` is all zero.
pub fn aim_relax(
    edit: &mut [f64],
    shape: &[usize],
    side: crate::schema::InputSide,
    m: &[f64],
    omega: f64,
) -> Result<bool> {
    let Some(d) = input_dim(shape, side) else {
        return Ok(false);
    };
    if m.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.len(),
        });
    }
    if let Some(bad) = m.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidValue {
            what: "channel importance",
            value: *bad,
        });
    }
    let max = m.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(false);
    }
    let r: Vec<f64> = m.iter().map(|v| 1.0 - (1.0 - omega) * (v / max)).collect();
    let (rows, cols) = (shape[0], shape[1]);
    for i in 0..rows {
        for j in 0..cols {
            let channel = match side {
                crate::schema::InputSide::Right => j,
                crate::schema::InputSide::Left => i,
            };
            edit[i * cols + j] *= r[channel];
        }
    }
    Ok(true)
}

/// One baseline-merged tensor and an optional warning.
pub fn baseline_tensor(
    name: &str,
    inst: &Tensor,
    think: &Tensor,
    cfg: &BaselineConfig,
    binding: Option<&Binding>,
    importance: Option<&[f64]>,
) -> Result<(Tensor, Option<String>)> {
    let d = delta(name, inst, think)?;
    let mut edit: Vec<f64> = match cfg.method {
        BaselineMethod::TaskArithmetic | BaselineMethod::AimTa => {
            d.iter().map(|v| cfg.alpha * v).collect()
        }
        BaselineMethod::Ties | BaselineMethod::AimTies => ties_combine(&[d], cfg.density)
            .iter()
            .map(|v| cfg.alpha * v)
            .collect(),
        BaselineMethod::Slerp => {
            if cfg.t == 0.0 {
                return Ok((inst.clone(), None));
            }
            if cfg.t == 1.0 && think.dtype() == inst.dtype() {
                return Ok((think.clone(), None));
            }
            let v = slerp_values(&inst.to_f64(), &think.to_f64(), cfg.t);
            return Ok((
                Tensor::from_f64(inst.dtype(), inst.shape().to_vec(), &v)?,
                None,
            ));
        }
    };
    let mut warning = None;
    if cfg.method.uses_aim() {
        let side = binding.map(|b| b.input_side).unwrap_or_default();
        let exempt = binding.is_some_and(|b| {
            matches!(
                b.component.kind,
                ComponentKind::Embedding | ComponentKind::Norm
            )
        });
        if !exempt && input_dim(inst.shape(), side).is_some() {
            match importance {
                Some(m) => {
                    aim_relax(&mut edit, inst.shape(), side, m, cfg.omega)?;
                }
                None => {
                    warning = Some(format!(
                        "{name}: no channel importance; update left unrelaxed"
                    ))
                }
            }
        }
    }
    Ok((apply_edit(inst, &edit), warning))
}

/// Whole-archive baseline merge in name order.
pub fn baseline_merge(
    inst: &TensorMap,
    think: &TensorMap,
    cfg: &BaselineConfig,
    bound: Option<&BoundSchema>,
    importance: &BTreeMap<String, Vec<f64>>,
) -> Result<(TensorMap, Vec<String>)> {
    cfg.validate()?;
    check_paired(inst, think)?;
    let mut out = TensorMap::new();
    let mut warnings = Vec::new();
    for (name, ti) in inst {
        let b = bound.and_then(|b| b.get(name));
        let (t, w) = baseline_tensor(
            name,
            ti,
            &think[name],
            cfg,
            b,
            importance.get(name).map(Vec::as_slice),
        )?;
        out.insert(name.clone(), t);
        warnings.extend(w);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((out, warnings))
}

/// Total token count with cached input at a tenth and output at five times
/// the input weight.
pub fn ttc(n_input: u64, n_cached: u64, n_output: u64) -> f64 {
    n_input as f64 + 0.1 * n_cached as f64 + 5.0 * n_output as f64
}

/// Tensor name → importance vector, via each tensor's activation space.
pub fn importance_by_tensor(
    bound: &BoundSchema,
    by_space: &BTreeMap<String, Vec<f64>>,
) -> BTreeMap<String, Vec<f64>> {
    bound
        .bindings
        .iter()
        .filter_map(|(name, b)| {
            let space = b.space.as_ref()?;
            Some((name.clone(), by_space.get(space)?.clone()))
        })
        .collect()
}

/// `(kind, layer)` of a bound tensor.
pub fn component_of(bound: &BoundSchema, name: &str) -> Option<(ComponentKind, Layer)> {
    bound
        .get(name)
        .map(|b| (b.component.kind, b.component.layer))
}
