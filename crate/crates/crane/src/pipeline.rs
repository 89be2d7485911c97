//! Parallel drivers over the core stages.
//!
//! Work is split per tensor, per example or per activation space and always
//! gathered back in a fixed order, so results do not depend on the thread
//! count.

use std::collections::{BTreeMap, BTreeSet};

use crane_core::calibration::{expand_neighborhood, format_support, CalibrationExample};
use crane_core::delta::delta;
use crane_core::dtype::DType;
use crane_core::gsp::{
    build_activation_matrix, build_projector, capture_requests, steepness, ActivationMatrix,
    GspProjectorSet,
};
use crane_core::merge::{baseline_tensor, crane_tensor, BaselineConfig, MergeContext, MergeStats};
use crane_core::micro::{
    example_gradient, forward, reduce_gradients, GradientSet, MicroConfig, MicroWeights,
};
use crane_core::schema::BoundSchema;
use crane_core::taylor::{aggregate, arch_normalize, coordinate_scores, SalienceTable};
use crane_core::tensor::check_paired;
use crane_core::{Error, Tensor, TensorMap};
use rayon::prelude::*;

use crate::error::Result;

/// Runs `f` over `items` in parallel and returns results in input order,
/// reporting the first error in that order.
pub fn ordered<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&T) -> crane_core::Result<U> + Sync + Send,
) -> crane_core::Result<Vec<U>> {
    items
        .par_iter()
        .map(f)
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

pub fn delta_archive(inst: &TensorMap, think: &TensorMap) -> Result<TensorMap> {
    check_paired(inst, think)?;
    let names: Vec<&String> = inst.keys().collect();
    let tensors = ordered(&names, |name| {
        let i = &inst[*name];
        let d = delta(name, i, &think[*name])?;
        Tensor::from_f64(DType::F64, i.shape().to_vec(), &d)
    })?;
    Ok(names.into_iter().cloned().zip(tensors).collect())
}

fn reindex(e: Error, index: usize) -> Error {
    match e {
        Error::InvalidExample { reason, .. } => Error::InvalidExample { index, reason },
        other => other,
    }
}

/// Per-example gradients in parallel, reduced sequentially in dataset order.
pub fn micro_gradients(
    w: &MicroWeights,
    cfg: &MicroConfig,
    data: &[CalibrationExample],
) -> Result<GradientSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let indexed: Vec<(usize, &CalibrationExample)> = data.iter().enumerate().collect();
    let parts = ordered(&indexed, |(i, ex)| {
        example_gradient(w, cfg, ex).map_err(|e| reindex(e, *i))
    })?;
    Ok(reduce_gradients(cfg, parts)?)
}

/// Coordinate scores per tensor in parallel, then the sequential aggregation.
pub fn salience(
    inst: &TensorMap,
    deltas: &TensorMap,
    g_r: &TensorMap,
    g_a: &TensorMap,
    bound: &BoundSchema,
    normalize: bool,
) -> Result<(SalienceTable, Vec<String>)> {
    let names: Vec<&String> = deltas.keys().collect();
    let scores = ordered(&names, |name| {
        let d = &deltas[*name];
        let mut grads = Vec::with_capacity(2);
        for g in [g_r, g_a] {
            let t = g.get(*name).ok_or_else(|| Error::MissingTensor {
                name: (*name).clone(),
                side: "gradient",
            })?;
            if t.shape() != d.shape() {
                return Err(Error::ShapeMismatch {
                    name: (*name).clone(),
                    expected: d.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            grads.push(t.to_f64());
        }
        coordinate_scores(&grads[0], &grads[1], &d.to_f64())
    })?;
    let scores = names.into_iter().cloned().zip(scores).collect();
    let (mut table, warnings) = aggregate(&scores, bound, inst)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    if normalize {
        table = arch_normalize(&table, bound)?;
    }
    Ok((table, warnings))
}

/// Activation matrices for `spaces` at the format neighbourhood of `traces`.
pub fn format_activations(
    w: &MicroWeights,
    cfg: &MicroConfig,
    traces: &[CalibrationExample],
    rho: usize,
    spaces: &[String],
) -> Result<Vec<ActivationMatrix>> {
    let support = format_support(traces);
    let lengths: Vec<usize> = traces.iter().map(|e| e.tokens.len()).collect();
    let hood = expand_neighborhood(&support, rho, &lengths);
    let requests = capture_requests(&hood, traces.len(), spaces);
    let jobs: Vec<(usize, &CalibrationExample)> = traces.iter().enumerate().collect();
    let captured = ordered(&jobs, |(i, ex)| forward(w, cfg, &ex.tokens, &requests[*i]))?;
    Ok(ordered(spaces, |s| {
        build_activation_matrix(&captured, s, &hood)
    })?)
}

/// Projectors for every collected space; all other spaces get the identity.
pub fn projector_set(
    matrices: &[ActivationMatrix],
    all_spaces: &BTreeSet<String>,
    tau: f64,
) -> Result<GspProjectorSet> {
    let built = ordered(matrices, |h| build_projector(h, tau))?;
    let mut set = GspProjectorSet {
        tau,
        k: steepness(tau),
        ..Default::default()
    };
    for s in all_spaces {
        set.identity_spaces.insert(s.clone());
    }
    for (h, p) in matrices.iter().zip(built) {
        set.insert(h.space.clone(), p);
    }
    set.validate()?;
    Ok(set)
}

pub fn merge(
    inst: &TensorMap,
    think: &TensorMap,
    ctx: &MergeContext<'_>,
) -> Result<(TensorMap, MergeStats)> {
    check_paired(inst, think)?;
    let names: Vec<&String> = inst.keys().collect();
    let done = ordered(&names, |name| {
        crane_tensor(name, &inst[*name], &think[*name], ctx)
    })?;
    let mut out = TensorMap::new();
    let mut reports = Vec::with_capacity(done.len());
    for (name, (t, r)) in names.into_iter().zip(done) {
        out.insert(name.clone(), t);
        reports.push(r);
    }
    let stats = MergeStats::collect(&reports, ctx);
    for w in &stats.warnings {
        log::warn!("{w}");
    }
    Ok((out, stats))
}

pub fn baseline(
    inst: &TensorMap,
    think: &TensorMap,
    cfg: &BaselineConfig,
    bound: Option<&BoundSchema>,
    importance: &BTreeMap<String, Vec<f64>>,
) -> Result<(TensorMap, Vec<String>)> {
    cfg.validate()?;
    check_paired(inst, think)?;
    let names: Vec<&String> = inst.keys().collect();
    let done = ordered(&names, |name| {
        let b = bound.and_then(|b| b.get(name));
        baseline_tensor(
            name,
            &inst[*name],
            &think[*name],
            cfg,
            b,
            importance.get(*name).map(Vec::as_slice),
        )
    })?;
    let mut out = TensorMap::new();
    let mut warnings = Vec::new();
    for (name, (t, w)) in names.into_iter().zip(done) {
        out.insert(name.clone(), t);
        warnings.extend(w);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((out, warnings))
}
