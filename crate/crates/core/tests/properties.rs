use crane_core::dtype::DType;
use crane_core::gsp::{
    apply_projector, build_projector, format_energy_direct, ActivationMatrix, Projector,
};
use crane_core::merge::{
    baseline_merge, crane_merge, BaselineConfig, BaselineMethod, MergeConfig, MergeContext,
};
use crane_core::micro::{init_params_as, MicroConfig};
use crane_core::rng::SplitMix64;
use crane_core::schema::{InputSide, MixerFamily};
use crane_core::{Tensor, TensorMap};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn dense_cfg(seed: u64) -> MicroConfig {
    MicroConfig {
        vocab: 12,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        ffn_mult: 2,
        moe_experts: 0,
        mixer_families: vec![MixerFamily::FullAttention; 2],
        seed,
    }
}

fn pair(seed: u64, dtype: DType) -> (MicroConfig, TensorMap, TensorMap) {
    let cfg = dense_cfg(seed);
    let inst = init_params_as(&cfg, dtype).unwrap();
    let think = init_params_as(
        &MicroConfig {
            seed: seed + 1000,
            ..cfg.clone()
        },
        dtype,
    )
    .unwrap();
    (cfg, inst, think)
}

fn matrix(rows: usize, cols: usize, rng: &mut SplitMix64, rank: usize) -> ActivationMatrix {
    // Rows drawn from a `rank`-dimensional subspace with decaying scales.
    let basis: Vec<Vec<f64>> = (0..rank)
        .map(|_| (0..cols).map(|_| rng.normal()).collect())
        .collect();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row = vec![0.0; cols];
        for (r, b) in basis.iter().enumerate() {
            let c = rng.normal() * 0.5f64.powi(r as i32);
            for (x, y) in row.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        data.extend(row);
    }
    ActivationMatrix {
        space: "s".into(),
        rows,
        cols,
        data,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_never_adds_format_energy(seed in any::<u64>(), rank in 1usize..5, tau in 0.01f64..0.9) {
        let mut rng = SplitMix64::new(seed);
        let h = matrix(9, 5, &mut rng, rank);
        let Projector::Soft(p) = build_projector(&h, tau).unwrap() else { return Ok(()) };
        let delta: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let mut out = delta.clone();
        apply_projector(&p, &mut out, &[3, 5], InputSide::Right).unwrap();
        let before = format_energy_direct(&delta, &h).unwrap();
        let after = format_energy_direct(&out, &h).unwrap();
        prop_assert!(after <= before * (1.0 + 1e-12) + 1e-300);
        // Twice attenuates each protected direction by (1 - w)².
        let mut twice = out.clone();
        apply_projector(&p, &mut twice, &[3, 5], InputSide::Right).unwrap();
        for (v, w) in p.v.iter().zip(&p.w) {
            for i in 0..3 {
                let row = |m: &[f64]| -> f64 { (0..5).map(|j| m[i * 5 + j] * v[j]).sum() };
                let want = (1.0 - w) * (1.0 - w) * row(&delta);
                prop_assert!((row(&twice) - want).abs() <= 1e-12 * (1.0 + row(&delta).abs()));
            }
        }
    }

    #[test]
    fn left_and_right_orientation_agree(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let h = matrix(7, 4, &mut rng, 2);
        let Projector::Soft(p) = build_projector(&h, 0.03).unwrap() else { return Ok(()) };
        let right: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        // Same matrix stored transposed, `[d_in, d_out]`.
        let mut left = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                left[j * 3 + i] = right[i * 4 + j];
            }
        }
        let mut r = right.clone();
        let mut l = left.clone();
        apply_projector(&p, &mut r, &[3, 4], InputSide::Right).unwrap();
        apply_projector(&p, &mut l, &[4, 3], InputSide::Left).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(r[i * 4 + j], l[j * 3 + i]);
            }
        }
    }

    #[test]
    fn edit_is_linear_in_alpha_without_projection(seed in 0u64..1000, alpha in 0.01f64..0.5) {
        let (cfg, inst, think) = pair(seed, DType::F64);
        let bound = cfg.schema().bind_tensors(&inst).unwrap();
        let run = |a: f64| {
            let mc = MergeConfig { alpha: a, use_taylor: false, use_gsp: false, ..MergeConfig::crane_30b() };
            let ctx = MergeContext::new(&bound, None, None, mc).unwrap();
            crane_merge(&inst, &think, &ctx).unwrap().0
        };
        let one = run(alpha);
        let two = run(2.0 * alpha);
        for (name, t) in &inst {
            let base = t.to_f64();
            let e1: Vec<f64> = one[name].to_f64().iter().zip(&base).map(|(m, b)| m - b).collect();
            let e2: Vec<f64> = two[name].to_f64().iter().zip(&base).map(|(m, b)| m - b).collect();
            for (a, b) in e1.iter().zip(&e2) {
                prop_assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn ablated_merge_is_task_arithmetic(seed in 0u64..1000, alpha in 0.0f64..1.0, bf16 in any::<bool>()) {
        let dtype = if bf16 { DType::BF16 } else { DType::F32 };
        let (cfg, inst, think) = pair(seed, dtype);
        let bound = cfg.schema().bind_tensors(&inst).unwrap();
        let mc = MergeConfig {
            alpha,
            use_sparsifier: false,
            use_taylor: false,
            use_gsp: false,
            ..MergeConfig::crane_30b()
        };
        let ctx = MergeContext::new(&bound, None, None, mc).unwrap();
        let (crane, _) = crane_merge(&inst, &think, &ctx).unwrap();
        let ta_cfg = BaselineConfig { alpha, ..BaselineConfig::paper_30b(BaselineMethod::TaskArithmetic) };
        let (ta, _) = baseline_merge(&inst, &think, &ta_cfg, Some(&bound), &BTreeMap::new()).unwrap();
        prop_assert_eq!(&crane, &ta);
        let ties_cfg = BaselineConfig { density: 1.0, ..BaselineConfig { method: BaselineMethod::Ties, ..ta_cfg } };
        let (ties, _) = baseline_merge(&inst, &think, &ties_cfg, Some(&bound), &BTreeMap::new()).unwrap();
        prop_assert_eq!(&ties, &ta);
    }

    #[test]
    fn slerp_endpoints(seed in 0u64..1000) {
        let (_, inst, think) = pair(seed, DType::F16);
        for (t, want) in [(0.0, &inst), (1.0, &think)] {
            let cfg = BaselineConfig { t, ..BaselineConfig::paper_30b(BaselineMethod::Slerp) };
            let (out, _) = baseline_merge(&inst, &think, &cfg, None, &BTreeMap::new()).unwrap();
            prop_assert_eq!(&out, want);
        }
    }

    #[test]
    fn narrowing_round_trips(v in any::<f32>()) {
        prop_assume!(v.is_finite());
        let t = Tensor::from_f64(DType::F32, vec![1], &[v as f64]).unwrap();
        prop_assert_eq!(t.to_f64()[0].to_bits(), (v as f64).to_bits());
    }
}

#[test]
fn aim_at_unit_omega_is_the_base_rule() {
    let (cfg, inst, think) = pair(3, DType::F32);
    let bound = cfg.schema().bind_tensors(&inst).unwrap();
    let mut importance = BTreeMap::new();
    for (name, t) in &inst {
        if t.shape().len() == 2 {
            importance.insert(
                name.clone(),
                (0..t.shape()[1])
                    .map(|j| j as f64 + 1.0)
                    .collect::<Vec<_>>(),
            );
        }
    }
    for (aim, base) in [
        (BaselineMethod::AimTa, BaselineMethod::TaskArithmetic),
        (BaselineMethod::AimTies, BaselineMethod::Ties),
    ] {
        let a = BaselineConfig {
            omega: 1.0,
            ..BaselineConfig::paper_30b(aim)
        };
        let b = BaselineConfig::paper_30b(base);
        let (x, _) = baseline_merge(&inst, &think, &a, Some(&bound), &importance).unwrap();
        let (y, _) = baseline_merge(&inst, &think, &b, Some(&bound), &importance).unwrap();
        assert_eq!(x, y);
        let relaxed = BaselineConfig { omega: 0.4, ..a };
        let (z, _) = baseline_merge(&inst, &think, &relaxed, Some(&bound), &importance).unwrap();
        assert_ne!(z, y);
    }
}
