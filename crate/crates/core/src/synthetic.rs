//! Planted-structure fixtures and an end-to-end check of the merge stages.
//!
//! A planted pair is a micro checkpoint and a copy whose delta is nonzero on
//! a "support" set with large magnitudes and on a "noise" set sharing one
//! small magnitude. Counts are chosen so the per-tensor median magnitude
//! lands exactly on the noise magnitude, which makes the strict-median
//! sparsifier drop all noise by construction.
//!
//! Base values are rounded to multiples of 2^-24 and planted magnitudes to
//! multiples of 2^-30, so `think - inst` reproduces the planted delta exactly
//! in `f64`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::calibration::{CalibrationExample, SetTag};
use crate::delta::{delta, sparsify};
use crate::dtype::DType;
use crate::gsp::{
    build_projector, format_energy_direct, ActivationMatrix, GspProjectorSet, Projector,
};
use crate::merge::{crane_edit, MergeConfig, MergeContext};
use crate::micro::{gradients, init_params_as, MicroConfig, MicroWeights};
use crate::rng::SplitMix64;
use crate::schema::MixerFamily;
use crate::taylor::{aggregate, score_all};
use crate::tensor::{Tensor, TensorMap};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 7;

const BASE_GRID: f64 = 16_777_216.0; // 2^24
const PLANT_GRID: f64 = 1_073_741_824.0; // 2^30

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantingSpec {
    /// Target share of each tensor's coordinates in the support.
    pub support_fraction: f64,
    pub noise: bool,
    pub format_rank: usize,
    /// Rows of each planted activation matrix.
    pub format_rows: usize,
    pub calib_examples: usize,
    pub calib_len: usize,
}

impl Default for PlantingSpec {
    fn default() -> Self {
        PlantingSpec {
            support_fraction: 0.125,
            noise: true,
            format_rank: 2,
            format_rows: 12,
            calib_examples: 4,
            calib_len: 8,
        }
    }
}

/// Micro model used by the default verification: three linear-attention
/// layers over one full-attention layer, two experts per layer.
pub fn default_config(seed: u64) -> MicroConfig {
    MicroConfig {
        vocab: 16,
        d_model: 8,
        n_layers: 4,
        n_heads: 2,
        ffn_mult: 2,
        moe_experts: 2,
        mixer_families: vec![
            MixerFamily::LinearAttention,
            MixerFamily::LinearAttention,
            MixerFamily::LinearAttention,
            MixerFamily::FullAttention,
        ],
        seed,
    }
}

/// Planted delta for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedTensor {
    pub delta: Vec<f64>,
    pub support: Vec<usize>,
    pub noise: Vec<usize>,
}

fn quantile_abs(values: &[f64], q: f64) -> f64 {
    let mut m: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    m.sort_by(|a, b| a.total_cmp(b));
    if m.is_empty() {
        return 0.0;
    }
    let i = libm::floor(q * (m.len() - 1) as f64) as usize;
    m[i]
}

fn on_grid(x: f64, grid: f64) -> f64 {
    libm::round(x * grid) / grid
}

/// Largest support count for which the median still lands on the noise
/// magnitude: the upper middle order statistic must not be a support value.
pub fn max_support(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        len - 1 - len / 2
    }
}

/// Plants `support` large and `noise` equal-small coordinates into a delta
/// for `base`. Fails when the counts cannot place the median on the noise
/// magnitude.
pub fn plant_tensor(
    base: &[f64],
    support: usize,
    noise: usize,
    rng: &mut SplitMix64,
) -> Result<PlantedTensor> {
    let n = base.len();
    let zeros = n.checked_sub(support + noise).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{support} support + {noise} noise coordinates exceed {n}"
        ))
    })?;
    if support > max_support(n) {
        return Err(Error::InvalidConfig(format!(
            "{support} support coordinates reach the median of {n}"
        )));
    }
    if noise > 0 && zeros > (n - 1) / 2 {
        return Err(Error::InvalidConfig(format!(
            "{zeros} unchanged coordinates put the median of {n} at zero, below the noise"
        )));
    }
    let q25 = quantile_abs(base, 0.25);
    let q75 = quantile_abs(base, 0.75);
    let (lo, hi) = if q25 > 0.0 {
        (q25, q75)
    } else {
        (1.0 / 64.0, 1.0)
    };
    // A power of two strictly below half the 25th percentile.
    let mut eps = 1.0;
    while eps >= 0.5 * lo && eps > 1.0 / PLANT_GRID {
        eps /= 2.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut d = vec![0.0; n];
    let mut support_idx: Vec<usize> = order[..support].to_vec();
    let mut noise_idx: Vec<usize> = order[support..support + noise].to_vec();
    for &j in &support_idx {
        let mag = on_grid(hi * (1.25 + 0.75 * rng.next_f64()), PLANT_GRID).max(2.0 * eps);
        d[j] = if rng.next_u64() & 1 == 0 { mag } else { -mag };
    }
    for &j in &noise_idx {
        d[j] = if rng.next_u64() & 1 == 0 { eps } else { -eps };
    }
    support_idx.sort_unstable();
    noise_idx.sort_unstable();
    Ok(PlantedTensor {
        delta: d,
        support: support_idx,
        noise: noise_idx,
    })
}

#[derive(Clone, Debug)]
pub struct PlantedPair {
    pub config: MicroConfig,
    pub spec: PlantingSpec,
    pub inst: TensorMap,
    pub think: TensorMap,
    pub support: BTreeMap<String, Vec<usize>>,
    pub noise: BTreeMap<String, Vec<usize>>,
    /// Residual space → orthonormal basis vectors.
    pub format_basis: BTreeMap<String, Vec<Vec<f64>>>,
    pub seed: u64,
}

fn orthonormal_basis(dim: usize, rank: usize, rng: &mut SplitMix64) -> Result<Vec<Vec<f64>>> {
    if rank > dim {
        return Err(Error::InvalidConfig(format!(
            "format rank {rank} exceeds width {dim}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis)
}

/// Deterministic planted pair for `cfg.seed`.
pub fn plant_pair(cfg: &MicroConfig, spec: &PlantingSpec) -> Result<PlantedPair> {
    if !(spec.support_fraction > 0.0 && spec.support_fraction < 0.5) {
        return Err(Error::InvalidValue {
            what: "support fraction",
            value: spec.support_fraction,
        });
    }
    let base = init_params_as(cfg, DType::F64)?;
    let mut rng = SplitMix64::new(cfg.seed ^ 0x706c_616e_7465_6421);
    let mut inst = TensorMap::new();
    let mut think = TensorMap::new();
    let mut support = BTreeMap::new();
    let mut noise = BTreeMap::new();
    for (name, t) in &base {
        let values: Vec<f64> = t
            .to_f64()
            .into_iter()
            .map(|v| on_grid(v, BASE_GRID))
            .collect();
        let n = values.len();
        let k = (libm::floor(spec.support_fraction * n as f64) as usize)
            .max(1)
            .min(max_support(n));
        let (zeros, m) = if spec.noise {
            let z = (n.saturating_sub(1) / 2) / 2;
            (z, n - k - z)
        } else {
            (n - k, 0)
        };
        debug_assert_eq!(zeros + m + k, n);
        let p = plant_tensor(&values, k, m, &mut rng)?;
        let planted: Vec<f64> = values.iter().zip(&p.delta).map(|(a, d)| a + d).collect();
        inst.insert(
            name.clone(),
            Tensor::from_f64(DType::F64, t.shape().to_vec(), &values)?,
        );
        think.insert(
            name.clone(),
            Tensor::from_f64(DType::F64, t.shape().to_vec(), &planted)?,
        );
        support.insert(name.clone(), p.support);
        noise.insert(name.clone(), p.noise);
    }
    let mut format_basis = BTreeMap::new();
    for space in cfg.residual_spaces() {
        format_basis.insert(
            space,
            orthonormal_basis(cfg.d_model, spec.format_rank, &mut rng)?,
        );
    }
    Ok(PlantedPair {
        config: cfg.clone(),
        spec: spec.clone(),
        inst,
        think,
        support,
        noise,
        format_basis,
        seed: cfg.seed,
    })
}

/// Rows cycle through the basis with random signs, so every retained
/// direction has the same singular value and `a_r = 1`.
pub fn planted_activations(
    space: &str,
    basis: &[Vec<f64>],
    rows: usize,
    rng: &mut SplitMix64,
) -> ActivationMatrix {
    let dim = basis.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows * dim);
    for i in 0..rows {
        let sign = if rng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        data.extend(basis[i % basis.len()].iter().map(|v| sign * v));
    }
    ActivationMatrix {
        space: space.into(),
        rows,
        cols: dim,
        data,
    }
}

fn calibration_set(
    cfg: &MicroConfig,
    spec: &PlantingSpec,
    set: SetTag,
    rng: &mut SplitMix64,
) -> Vec<CalibrationExample> {
    (0..spec.calib_examples)
        .map(|_| {
            let tokens: Vec<u32> = (0..spec.calib_len)
                .map(|_| rng.below(cfg.vocab) as u32)
                .collect();
            let mask: Vec<u8> = (0..spec.calib_len)
                .map(|s| u8::from(s >= spec.calib_len / 2))
                .collect();
            CalibrationExample::new(tokens, mask, set)
        })
        .collect()
}

/// Real masked-NLL gradients with quadratic-surrogate gradients written over
/// every planted coordinate: the reasoning surrogate pulls towards Thinking
/// everywhere (`g_R = -δ`), the agent surrogate only on the support and away
/// from Thinking on noise (`g_A = +δ` there).
pub fn surrogate_gradients(pair: &PlantedPair) -> Result<(TensorMap, TensorMap)> {
    let cfg = &pair.config;
    let weights = MicroWeights::from_tensors(cfg, &pair.inst)?;
    let mut rng = SplitMix64::new(pair.seed ^ 0x6361_6c69_6272_6174);
    let d_r = calibration_set(cfg, &pair.spec, SetTag::R, &mut rng);
    let d_a = calibration_set(cfg, &pair.spec, SetTag::A, &mut rng);
    let mut g_r = gradients(&weights, cfg, &d_r)?.to_tensors();
    let mut g_a = gradients(&weights, cfg, &d_a)?.to_tensors();
    for (name, inst) in &pair.inst {
        let d = delta(name, inst, &pair.think[name])?;
        let mut gr = g_r[name].to_f64();
        let mut ga = g_a[name].to_f64();
        for (j, &dj) in d.iter().enumerate() {
            if dj != 0.0 {
                gr[j] = -dj;
                ga[j] = -dj;
            }
        }
        for &j in &pair.noise[name] {
            ga[j] = d[j];
        }
        let shape = inst.shape().to_vec();
        g_r.insert(
            name.clone(),
            Tensor::from_f64(DType::F64, shape.clone(), &gr)?,
        );
        g_a.insert(name.clone(), Tensor::from_f64(DType::F64, shape, &ga)?);
    }
    Ok((g_r, g_a))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VerificationReport {
    pub seed: u64,
    pub noise_coordinates: usize,
    pub support_coordinates: usize,
    /// Share of planted noise zeroed by the sparsifier.
    pub stage1_noise_removal_rate: f64,
    /// Share of planted support kept by the sparsifier.
    pub stage1_support_retention: f64,
    pub gated_coordinates: usize,
    /// Share of coordinates with positive gated salience inside the support.
    pub ctg_selectivity: f64,
    pub gsp_energy_before: f64,
    pub gsp_energy_after: f64,
    /// After / before; 0 when there is no edit energy.
    pub gsp_energy_ratio: f64,
    /// Smallest protection weight over retained directions.
    pub w_min: f64,
    /// `(1 - w_min)²`
    pub energy_bound: f64,
    /// Every coordinate edited before projection lies in the support.
    pub edits_within_support: bool,
    pub selectivity_pass: bool,
    pub noise_removal_pass: bool,
    pub energy_pass: bool,
    pub pass: bool,
}

pub const ENERGY_RATIO_LIMIT: f64 = 1e-4;

/// Runs every stage on a planted pair and scores the outcome.
pub fn verify_pipeline(pair: &PlantedPair, cfg: &MergeConfig) -> Result<VerificationReport> {
    cfg.validate()?;
    let schema = pair.config.schema();
    let bound = schema.bind_tensors(&pair.inst)?;

    let mut deltas = TensorMap::new();
    for (name, inst) in &pair.inst {
        let d = delta(name, inst, &pair.think[name])?;
        deltas.insert(
            name.clone(),
            Tensor::from_f64(DType::F64, inst.shape().to_vec(), &d)?,
        );
    }
    let (g_r, g_a) = surrogate_gradients(pair)?;
    let scores = score_all(&g_r, &g_a, &deltas)?;
    let (table, _) = aggregate(&scores, &bound, &pair.inst)?;

    let mut rng = SplitMix64::new(pair.seed ^ 0x666f_726d_6174);
    let mut projectors = GspProjectorSet {
        tau: cfg.tau,
        k: crate::gsp::steepness(cfg.tau),
        ..Default::default()
    };
    let mut matrices = BTreeMap::new();
    for space in bound.spaces() {
        match pair.format_basis.get(&space) {
            Some(basis) => {
                let h = planted_activations(&space, basis, pair.spec.format_rows, &mut rng);
                projectors.insert(space.clone(), build_projector(&h, cfg.tau)?);
                matrices.insert(space, h);
            }
            None => projectors.insert(space, Projector::Identity),
        }
    }
    let ctx = MergeContext::new(&bound, Some(&table), Some(&projectors), cfg.clone())?;

    let (mut noise_total, mut noise_removed, mut support_total, mut support_kept) = (0, 0, 0, 0);
    let (mut gated, mut gated_inside) = (0, 0);
    let (mut before, mut after) = (0.0, 0.0);
    let mut within = true;
    for (name, inst) in &pair.inst {
        let support = &pair.support[name];
        let t = sparsify(&deltas[name].to_f64());
        for &j in &pair.noise[name] {
            noise_total += 1;
            noise_removed += usize::from(t[j] == 0.0);
        }
        for &j in support {
            support_total += 1;
            support_kept += usize::from(t[j] != 0.0);
        }
        for (j, &p) in scores[name].p.iter().enumerate() {
            if p > 0.0 {
                gated += 1;
                gated_inside += usize::from(support.binary_search(&j).is_ok());
            }
        }
        let (pre, post, _) = crane_edit(name, inst, &pair.think[name], &ctx)?;
        for (j, &e) in pre.iter().enumerate() {
            if e != 0.0 && support.binary_search(&j).is_err() {
                within = false;
            }
        }
        if let Some(space) = bound.get(name).and_then(|b| b.space.as_ref()) {
            if let (Some(h), true) = (matrices.get(space), inst.shape().len() == 2) {
                before += format_energy_direct(&pre, h)?;
                after += format_energy_direct(&post, h)?;
            }
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let w_min = projectors
        .projectors
        .values()
        .flat_map(|p| p.w.iter().copied())
        .fold(1.0, f64::min);
    let ratio = if before > 0.0 { after / before } else { 0.0 };
    let ctg_selectivity = rate(gated_inside, gated);
    let stage1_noise_removal_rate = rate(noise_removed, noise_total);
    let selectivity_pass = ctg_selectivity == 1.0;
    let noise_removal_pass = stage1_noise_removal_rate == 1.0;
    let energy_pass = ratio <= ENERGY_RATIO_LIMIT;
    Ok(VerificationReport {
        seed: pair.seed,
        noise_coordinates: noise_total,
        support_coordinates: support_total,
        stage1_noise_removal_rate,
        stage1_support_retention: rate(support_kept, support_total),
        gated_coordinates: gated,
        ctg_selectivity,
        gsp_energy_before: before,
        gsp_energy_after: after,
        gsp_energy_ratio: ratio,
        w_min,
        energy_bound: (1.0 - w_min) * (1.0 - w_min),
        edits_within_support: within,
        selectivity_pass,
        noise_removal_pass,
        energy_pass,
        pass: selectivity_pass && noise_removal_pass && energy_pass && within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::median;

    fn small() -> MicroConfig {
        MicroConfig {
            n_layers: 2,
            mixer_families: vec![MixerFamily::LinearAttention, MixerFamily::FullAttention],
            ..default_config(3)
        }
    }

    #[test]
    fn median_lands_on_noise() {
        let mut rng = SplitMix64::new(1);
        let base: Vec<f64> = (0..64).map(|i| 0.01 * (i as f64 + 1.0)).collect();
        // 8 support, 48 noise, 8 unchanged: both middle order statistics are noise.
        let p = plant_tensor(&base, 8, 48, &mut rng).unwrap();
        let t = sparsify(&p.delta);
        // Oracle: evaluate the strict-median rule directly on the constructed tensor.
        let m = median(&p.delta.iter().map(|v| v.abs()).collect::<Vec<_>>());
        for j in 0..64 {
            let want = if p.delta[j].abs() > m {
                2.0 * p.delta[j]
            } else {
                0.0
            };
            assert_eq!(t[j], want);
        }
        assert!(p.noise.iter().all(|&j| t[j] == 0.0));
        assert!(p.support.iter().all(|&j| t[j] == 2.0 * p.delta[j]));
        let q25 = quantile_abs(&base, 0.25);
        let q75 = quantile_abs(&base, 0.75);
        assert!(p.noise.iter().all(|&j| p.delta[j].abs() < q25));
        assert!(p.support.iter().all(|&j| p.delta[j].abs() > q75));
    }

    #[test]
    fn sixteen_noise_in_sixty_four_is_rejected() {
        // 40 unchanged coordinates put the median at zero, so noise would survive.
        let mut rng = SplitMix64::new(1);
        let base = vec![1.0; 64];
        assert!(plant_tensor(&base, 8, 16, &mut rng).is_err());
        let mut d = vec![0.0; 64];
        d[..8].fill(5.0);
        d[8..24].fill(0.1);
        let t = sparsify(&d);
        assert!(t[8..24].iter().all(|&v| v != 0.0));
        assert!(plant_tensor(&base, 40, 0, &mut rng).is_err());
        assert!(plant_tensor(&base, 60, 10, &mut rng).is_err());
    }

    #[test]
    fn pair_is_seeded_and_exact() {
        let spec = PlantingSpec::default();
        let a = plant_pair(&small(), &spec).unwrap();
        let b = plant_pair(&small(), &spec).unwrap();
        assert_eq!(a.think, b.think);
        assert_eq!(a.support, b.support);
        for (name, inst) in &a.inst {
            let d = delta(name, inst, &a.think[name]).unwrap();
            let nonzero: Vec<usize> = (0..d.len()).filter(|&j| d[j] != 0.0).collect();
            let mut planted: Vec<usize> = a.support[name]
                .iter()
                .chain(&a.noise[name])
                .copied()
                .collect();
            planted.sort_unstable();
            assert_eq!(nonzero, planted, "{name}");
            // Noise shares one magnitude.
            let mags: Vec<f64> = a.noise[name].iter().map(|&j| d[j].abs()).collect();
            assert!(mags.windows(2).all(|w| w[0] == w[1]));
        }
        let mut other = small();
        other.seed += 1;
        assert_ne!(plant_pair(&other, &spec).unwrap().think, a.think);
    }

    #[test]
    fn noise_free_support() {
        let spec = PlantingSpec {
            noise: false,
            ..Default::default()
        };
        let p = plant_pair(&small(), &spec).unwrap();
        for (name, inst) in &p.inst {
            let t = sparsify(&delta(name, inst, &p.think[name]).unwrap());
            for (j, v) in t.iter().enumerate() {
                if *v != 0.0 {
                    assert!(p.support[name].binary_search(&j).is_ok());
                }
            }
        }
    }

    #[test]
    fn verification_passes() {
        let pair = plant_pair(&small(), &PlantingSpec::default()).unwrap();
        let r = verify_pipeline(&pair, &MergeConfig::crane_30b()).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.ctg_selectivity, 1.0);
        assert_eq!(r.stage1_noise_removal_rate, 1.0);
        assert_eq!(r.stage1_support_retention, 1.0);
        assert!(r.gated_coordinates > 0 && r.noise_coordinates > 0);
        assert!(r.gsp_energy_before > 0.0);
        assert!(r.gsp_energy_ratio <= r.energy_bound + 1e-15);
        assert_eq!(
            r,
            verify_pipeline(&pair, &MergeConfig::crane_30b()).unwrap()
        );
    }

    #[test]
    fn zero_alpha_reports_no_edit() {
        let pair = plant_pair(&small(), &PlantingSpec::default()).unwrap();
        let cfg = MergeConfig {
            alpha: 0.0,
            ..MergeConfig::crane_30b()
        };
        let r = verify_pipeline(&pair, &cfg).unwrap();
        assert_eq!(r.gsp_energy_before, 0.0);
        assert_eq!(r.gsp_energy_ratio, 0.0);
        assert!(r.edits_within_support);
    }

    #[test]
    fn planted_activations_have_unit_strengths() {
        let mut rng = SplitMix64::new(2);
        let basis = orthonormal_basis(8, 2, &mut rng).unwrap();
        let h = planted_activations("s", &basis, 12, &mut rng);
        let Projector::Soft(p) = build_projector(&h, 0.03).unwrap() else {
            panic!("expected projector")
        };
        assert_eq!(p.rank(), 2);
        assert!((p.relative_strengths()[1] - 1.0).abs() < 1e-12);
        assert!(p.w.iter().all(|&w| w >= 0.99));
    }
}
