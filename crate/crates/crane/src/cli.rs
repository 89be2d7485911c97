//! Command-line driver.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use crane_core::calibration::SetTag;
use crane_core::dtype::DType;
use crane_core::merge::{
    importance_by_tensor, ttc, BaselineConfig, BaselineMethod, MergeConfig, MergeContext,
};
use crane_core::micro::{channel_importance, init_params_as, MicroConfig, MicroWeights};
use crane_core::synthetic::{
    default_config, plant_pair, verify_pipeline, PlantingSpec, VerificationReport, DEFAULT_SEED,
};
use crane_core::taylor::compare_salience;
use crane_core::tensor::check_paired;
use crane_core::TensorMap;
use serde_json::json;

use crate::archive::{read_tensors, write_archive, DEFAULT_SHARD_BUDGET};
use crate::error::{AppError, Result};
use crate::formats::{
    load_calibration, load_micro_config, load_salience, load_schema, read_projectors, select,
    sibling, write_json, write_projectors, write_salience,
};
use crate::manifest::Manifest;
use crate::pipeline;

#[derive(Parser, Debug)]
#[command(
    name = "crane",
    version,
    about = "Merge a Thinking checkpoint into its Instruct sibling"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for commands that draw random numbers.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Manifest path (default: next to the main output).
    #[arg(long, global = true)]
    pub manifest_out: Option<PathBuf>,
    /// Largest shard payload in bytes for written archives.
    #[arg(long, global = true, default_value_t = DEFAULT_SHARD_BUDGET)]
    pub shard_budget: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write seeded micro-model parameters.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "F32")]
        dtype: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted Instruct/Thinking pair for a micro model.
    Plant {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_instruct: PathBuf,
        #[arg(long)]
        out_thinking: PathBuf,
    },
    /// Thinking minus Instruct, stored as F64.
    Delta {
        #[arg(long)]
        instruct: PathBuf,
        #[arg(long)]
        thinking: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-component salience table from reasoning and agent gradients.
    Taylor(TaylorArgs),
    /// Format-preserving projectors from format traces.
    GspBuild(GspArgs),
    /// Full merge with per-stage switches.
    Merge(MergeArgs),
    /// Baseline merge rules: ta, ties, slerp, aim-ta, aim-ties.
    Baseline(BaselineArgs),
    /// Planted-structure check of every stage.
    Verify {
        /// MicroConfig JSON (default: the built-in verification model).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "crane-30b")]
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation and top-k overlap of two salience tables.
    CompareSalience {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        top_k: Vec<usize>,
    },
    /// Weighted token cost: input + 0.1 cached + 5 output.
    Ttc {
        #[arg(long)]
        input: u64,
        #[arg(long, default_value_t = 0)]
        cached: u64,
        #[arg(long)]
        output: u64,
    },
}

#[derive(Args, Debug)]
pub struct TaylorArgs {
    #[arg(long)]
    pub instruct: PathBuf,
    #[arg(long)]
    pub delta: PathBuf,
    /// Preset name or schema JSON.
    #[arg(long)]
    pub schema: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub arch_normalize: bool,
    /// MicroConfig JSON; gradients are computed with the built-in model.
    #[arg(long, requires_all = ["calib_r", "calib_a"])]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub calib_r: Option<PathBuf>,
    #[arg(long)]
    pub calib_a: Option<PathBuf>,
    /// Precomputed reasoning-loss gradient archive.
    #[arg(long, requires = "grad_a", conflicts_with = "model_config")]
    pub grad_r: Option<PathBuf>,
    /// Precomputed agent-loss gradient archive.
    #[arg(long, requires = "grad_r")]
    pub grad_a: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GspArgs {
    #[arg(long)]
    pub instruct: PathBuf,
    #[arg(long)]
    pub schema: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.03)]
    pub tau: f64,
    #[arg(long, default_value_t = 2)]
    pub rho: usize,
    #[arg(long, requires = "calib_f")]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub calib_f: Option<PathBuf>,
    /// Also protect mixer outputs and FFN hidden activations.
    #[arg(long)]
    pub collect_intermediate: bool,
    /// Precomputed activation archive: one `[rows, width]` tensor per space.
    #[arg(long, conflicts_with = "model_config")]
    pub activations: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub instruct: PathBuf,
    #[arg(long)]
    pub thinking: PathBuf,
    #[arg(long)]
    pub schema: String,
    #[arg(long)]
    pub salience: Option<PathBuf>,
    #[arg(long)]
    pub projectors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "crane-30b")]
    pub preset: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub no_sparsifier: bool,
    #[arg(long)]
    pub no_taylor: bool,
    #[arg(long)]
    pub no_gsp: bool,
    #[arg(long)]
    pub arch_normalize: bool,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    pub method: String,
    #[arg(long)]
    pub instruct: PathBuf,
    #[arg(long)]
    pub thinking: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Needed to map importance vectors to tensors and exempt norms.
    #[arg(long)]
    pub schema: Option<String>,
    /// Channel-importance archive: one vector per activation space.
    #[arg(long)]
    pub importance: Option<PathBuf>,
    /// MicroConfig JSON; importance is measured on the Instruct model.
    #[arg(long, requires = "calib_a", conflicts_with = "importance")]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub calib_a: Option<PathBuf>,
}

struct Ctx {
    seed: Option<u64>,
    manifest_out: Option<PathBuf>,
    shard_budget: u64,
}

impl Ctx {
    fn finish(&self, mut m: Manifest, default: Option<&Path>, started: Instant) -> Result<()> {
        m.wall_time_s = started.elapsed().as_secs_f64();
        let path = match (&self.manifest_out, default) {
            (Some(p), _) => p.clone(),
            (None, Some(out)) => sibling(out, ".manifest.json"),
            (None, None) => return Ok(()),
        };
        m.write(&path)?;
        Ok(())
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    DType::parse(&s.to_ascii_uppercase())
        .ok_or_else(|| AppError::Invalid(format!("unknown dtype {s:?}")))
}

fn micro_weights(cfg: &MicroConfig, inst: &TensorMap) -> Result<MicroWeights> {
    Ok(MicroWeights::from_tensors(cfg, inst)?)
}

fn examples_of(
    path: &Path,
    set: SetTag,
) -> Result<Vec<crane_core::calibration::CalibrationExample>> {
    let ex = select(load_calibration(path)?, set);
    if ex.is_empty() {
        return Err(AppError::format(path, format!("no {set:?} examples")));
    }
    Ok(ex)
}

fn cmd_init(ctx: &Ctx, config: &Path, dtype: &str, out: &Path) -> Result<Manifest> {
    let mut cfg = load_micro_config(config)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let params = init_params_as(&cfg, parse_dtype(dtype)?)?;
    write_archive(out, &params, ctx.shard_budget)?;
    let mut m = Manifest::new("init", json!({ "model": cfg, "dtype": dtype }));
    m.input(config)?;
    m.output(out)?;
    Ok(m)
}

fn cmd_plant(ctx: &Ctx, config: Option<&Path>, out_i: &Path, out_t: &Path) -> Result<Manifest> {
    let mut cfg = match config {
        Some(p) => load_micro_config(p)?,
        None => default_config(DEFAULT_SEED),
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let spec = PlantingSpec::default();
    let pair = plant_pair(&cfg, &spec)?;
    write_archive(out_i, &pair.inst, ctx.shard_budget)?;
    write_archive(out_t, &pair.think, ctx.shard_budget)?;
    let mut m = Manifest::new("plant", json!({ "model": cfg, "planting": spec }));
    if let Some(p) = config {
        m.input(p)?;
    }
    m.output(out_i)?;
    m.output(out_t)?;
    let support: usize = pair.support.values().map(Vec::len).sum();
    let noise: usize = pair.noise.values().map(Vec::len).sum();
    m.stats = json!({ "support_coordinates": support, "noise_coordinates": noise });
    Ok(m)
}

fn cmd_delta(ctx: &Ctx, instruct: &Path, thinking: &Path, out: &Path) -> Result<Manifest> {
    let inst = read_tensors(instruct)?;
    let think = read_tensors(thinking)?;
    let d = pipeline::delta_archive(&inst, &think)?;
    write_archive(out, &d, ctx.shard_budget)?;
    let nonzero: usize = d
        .values()
        .map(|t| t.to_f64().iter().filter(|v| **v != 0.0).count())
        .sum();
    let mut m = Manifest::new("delta", json!({}));
    m.input(instruct)?;
    m.input(thinking)?;
    m.output(out)?;
    m.stats = json!({ "tensors": d.len(), "nonzero_coordinates": nonzero });
    Ok(m)
}

fn cmd_taylor(_ctx: &Ctx, a: &TaylorArgs) -> Result<Manifest> {
    let inst = read_tensors(&a.instruct)?;
    let deltas = read_tensors(&a.delta)?;
    check_paired(&inst, &deltas)?;
    let schema = load_schema(&a.schema)?;
    let bound = schema.bind_tensors(&inst)?;
    let mut m = Manifest::new(
        "taylor",
        json!({ "schema": a.schema, "arch_normalize": a.arch_normalize }),
    );
    m.input(&a.instruct)?;
    m.input(&a.delta)?;
    let mut meta = BTreeMap::new();
    let (g_r, g_a) = match (&a.grad_r, &a.grad_a, &a.model_config) {
        (Some(r), Some(ga), _) => {
            m.input(r)?;
            m.input(ga)?;
            meta.insert("gradients".to_string(), "external".to_string());
            (read_tensors(r)?, read_tensors(ga)?)
        }
        (_, _, Some(cfg_path)) => {
            let cfg = load_micro_config(cfg_path)?;
            let (cr, ca) = (
                a.calib_r.as_ref().expect("clap"),
                a.calib_a.as_ref().expect("clap"),
            );
            for p in [cfg_path, cr, ca] {
                m.input(p)?;
            }
            let w = micro_weights(&cfg, &inst)?;
            let gr = pipeline::micro_gradients(&w, &cfg, &examples_of(cr, SetTag::R)?)?;
            let ga = pipeline::micro_gradients(&w, &cfg, &examples_of(ca, SetTag::A)?)?;
            meta.insert("gradients".to_string(), "micro".to_string());
            meta.insert("loss_r".to_string(), gr.loss.to_string());
            meta.insert("loss_a".to_string(), ga.loss.to_string());
            meta.insert("masked_tokens_r".to_string(), gr.masked_tokens.to_string());
            meta.insert("masked_tokens_a".to_string(), ga.masked_tokens.to_string());
            (gr.to_tensors(), ga.to_tensors())
        }
        _ => return Err(AppError::Invalid(
            "gradients need either --model-config with --calib-r/--calib-a or --grad-r/--grad-a"
                .into(),
        )),
    };
    let (mut table, warnings) =
        pipeline::salience(&inst, &deltas, &g_r, &g_a, &bound, a.arch_normalize)?;
    table.metadata.extend(meta);
    let csv = write_salience(&a.out, &table)?;
    m.output(&a.out)?;
    m.output(&csv)?;
    m.stats = json!({ "entries": table.entries.len(), "warnings": warnings });
    Ok(m)
}

fn cmd_gsp_build(ctx: &Ctx, a: &GspArgs) -> Result<Manifest> {
    let inst = read_tensors(&a.instruct)?;
    let schema = load_schema(&a.schema)?;
    let bound = schema.bind_tensors(&inst)?;
    let all_spaces = bound.spaces();
    let mut m = Manifest::new(
        "gsp-build",
        json!({ "schema": a.schema, "tau": a.tau, "rho": a.rho, "collect_intermediate": a.collect_intermediate }),
    );
    m.input(&a.instruct)?;
    let matrices = match (&a.model_config, &a.activations) {
        (Some(cfg_path), _) => {
            let cfg = load_micro_config(cfg_path)?;
            let calib = a.calib_f.as_ref().expect("clap");
            m.input(cfg_path)?;
            m.input(calib)?;
            let traces = select(load_calibration(calib)?, SetTag::F);
            let mut spaces = cfg.residual_spaces();
            if a.collect_intermediate {
                spaces.extend(cfg.intermediate_spaces());
            }
            spaces.retain(|s| all_spaces.contains(s));
            if traces.is_empty() {
                log::warn!("no format traces; every space uses the identity projector");
                Vec::new()
            } else {
                let w = micro_weights(&cfg, &inst)?;
                pipeline::format_activations(&w, &cfg, &traces, a.rho, &spaces)?
            }
        }
        (None, Some(path)) => {
            m.input(path)?;
            let acts = read_tensors(path)?;
            let mut out = Vec::with_capacity(acts.len());
            for (space, t) in acts {
                if t.shape().len() != 2 {
                    return Err(AppError::format(
                        path,
                        format!("activations {space} must be 2-D"),
                    ));
                }
                out.push(crane_core::gsp::ActivationMatrix {
                    space,
                    rows: t.shape()[0],
                    cols: t.shape()[1],
                    data: t.to_f64(),
                });
            }
            out
        }
        (None, None) => {
            return Err(AppError::Invalid(
                "activations need either --model-config with --calib-f or --activations".into(),
            ))
        }
    };
    if matrices.iter().all(|h| h.rows == 0) {
        log::warn!("format neighbourhood is empty; every space uses the identity projector");
    }
    let all: BTreeSet<String> = all_spaces
        .into_iter()
        .chain(matrices.iter().map(|h| h.space.clone()))
        .collect();
    let set = pipeline::projector_set(&matrices, &all, a.tau)?;
    for p in write_projectors(&a.out, &set, a.rho, ctx.shard_budget)? {
        m.output(&p)?;
    }
    let rows: BTreeMap<&str, usize> = matrices
        .iter()
        .map(|h| (h.space.as_str(), h.rows))
        .collect();
    let ranks: BTreeMap<&str, usize> = set
        .projectors
        .iter()
        .map(|(s, p)| (s.as_str(), p.rank()))
        .collect();
    m.stats =
        json!({ "k": set.k, "rows": rows, "ranks": ranks, "identity_spaces": set.identity_spaces });
    Ok(m)
}

fn merge_config(a: &MergeArgs) -> Result<MergeConfig> {
    let mut cfg = MergeConfig::preset(&a.preset)
        .ok_or_else(|| AppError::Invalid(format!("unknown preset {:?}", a.preset)))?;
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    if let Some(tau) = a.tau {
        cfg.tau = tau;
    }
    cfg.use_sparsifier &= !a.no_sparsifier;
    cfg.use_taylor &= !a.no_taylor;
    cfg.use_gsp &= !a.no_gsp;
    cfg.arch_normalize |= a.arch_normalize;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_merge(ctx: &Ctx, a: &MergeArgs) -> Result<Manifest> {
    let cfg = merge_config(a)?;
    let inst = read_tensors(&a.instruct)?;
    let think = read_tensors(&a.thinking)?;
    let schema = load_schema(&a.schema)?;
    let bound = schema.bind_tensors(&inst)?;
    let mut m = Manifest::new(
        "merge",
        json!({ "preset": a.preset, "merge": cfg, "schema": a.schema }),
    );
    m.input(&a.instruct)?;
    m.input(&a.thinking)?;
    let salience = match (&a.salience, cfg.use_taylor) {
        (Some(p), true) => {
            m.input(p)?;
            Some(load_salience(p)?)
        }
        _ => None,
    };
    let projectors = match (&a.projectors, cfg.use_gsp) {
        (Some(p), true) => {
            m.input(p)?;
            m.input(&sibling(p, ".json"))?;
            let (set, _) = read_projectors(p)?;
            Some(if set.tau == cfg.tau {
                set
            } else {
                log::info!("reweighting projectors from tau {} to {}", set.tau, cfg.tau);
                set.retune(cfg.tau)?
            })
        }
        _ => None,
    };
    let mctx = MergeContext::new(&bound, salience.as_ref(), projectors.as_ref(), cfg)?;
    let (merged, stats) = pipeline::merge(&inst, &think, &mctx)?;
    write_archive(&a.out, &merged, ctx.shard_budget)?;
    m.output(&a.out)?;
    m.stats = serde_json::to_value(&stats).expect("stats serialize");
    Ok(m)
}

fn cmd_baseline(ctx: &Ctx, a: &BaselineArgs) -> Result<Manifest> {
    let method = BaselineMethod::parse(&a.method)
        .ok_or_else(|| AppError::Invalid(format!("unknown method {:?}", a.method)))?;
    let mut cfg = BaselineConfig::paper_30b(method);
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.t {
        cfg.t = v;
    }
    if let Some(v) = a.density {
        cfg.density = v;
    }
    if let Some(v) = a.omega {
        cfg.omega = v;
    }
    cfg.validate()?;
    let inst = read_tensors(&a.instruct)?;
    let think = read_tensors(&a.thinking)?;
    let mut m = Manifest::new("baseline", json!({ "baseline": cfg, "schema": a.schema }));
    m.input(&a.instruct)?;
    m.input(&a.thinking)?;
    let bound = match &a.schema {
        Some(s) => Some(load_schema(s)?.bind_tensors(&inst)?),
        None => None,
    };
    let mut importance = BTreeMap::new();
    if method.uses_aim() {
        let by_space: BTreeMap<String, Vec<f64>> = match (&a.importance, &a.model_config) {
            (Some(p), _) => {
                m.input(p)?;
                read_tensors(p)?
                    .into_iter()
                    .map(|(k, t)| (k, t.to_f64()))
                    .collect()
            }
            (None, Some(cfg_path)) => {
                let mc = load_micro_config(cfg_path)?;
                let calib = a.calib_a.as_ref().expect("clap");
                m.input(cfg_path)?;
                m.input(calib)?;
                let w = micro_weights(&mc, &inst)?;
                let mut spaces = mc.residual_spaces();
                spaces.extend(mc.intermediate_spaces());
                channel_importance(&w, &mc, &examples_of(calib, SetTag::A)?, &spaces)?
            }
            (None, None) => BTreeMap::new(),
        };
        match &bound {
            Some(b) => importance = importance_by_tensor(b, &by_space),
            None => return Err(AppError::Invalid("AIM methods need --schema".into())),
        }
    }
    let (merged, warnings) = pipeline::baseline(&inst, &think, &cfg, bound.as_ref(), &importance)?;
    write_archive(&a.out, &merged, ctx.shard_budget)?;
    m.output(&a.out)?;
    m.stats = json!({ "tensors": merged.len(), "warnings": warnings });
    Ok(m)
}

pub fn report_table(r: &VerificationReport) -> String {
    let flag = |b: bool| if b { "pass" } else { "FAIL" };
    let rows = [
        ("seed", r.seed.to_string(), ""),
        ("support coordinates", r.support_coordinates.to_string(), ""),
        ("noise coordinates", r.noise_coordinates.to_string(), ""),
        (
            "stage-1 noise removal",
            format!("{:.6}", r.stage1_noise_removal_rate),
            flag(r.noise_removal_pass),
        ),
        (
            "stage-1 support retention",
            format!("{:.6}", r.stage1_support_retention),
            "",
        ),
        ("gated coordinates", r.gated_coordinates.to_string(), ""),
        (
            "gate selectivity",
            format!("{:.6}", r.ctg_selectivity),
            flag(r.selectivity_pass),
        ),
        (
            "format energy before",
            format!("{:.6e}", r.gsp_energy_before),
            "",
        ),
        (
            "format energy after",
            format!("{:.6e}", r.gsp_energy_after),
            "",
        ),
        (
            "format energy ratio",
            format!("{:.3e}", r.gsp_energy_ratio),
            flag(r.energy_pass),
        ),
        ("bound (1 - w_min)^2", format!("{:.3e}", r.energy_bound), ""),
        (
            "edits within support",
            r.edits_within_support.to_string(),
            flag(r.edits_within_support),
        ),
    ];
    let mut s = String::new();
    for (k, v, f) in rows {
        s.push_str(&format!("{k:<28} {v:>14}  {f}\n"));
    }
    s.push_str(&format!("{:<28} {:>14}\n", "overall", flag(r.pass)));
    s
}

fn cmd_verify(
    ctx: &Ctx,
    config: Option<&Path>,
    preset: &str,
    out: Option<&Path>,
) -> Result<(Manifest, bool)> {
    let seed = ctx.seed.unwrap_or(DEFAULT_SEED);
    let mut model = match config {
        Some(p) => load_micro_config(p)?,
        None => default_config(seed),
    };
    if ctx.seed.is_some() || config.is_none() {
        model.seed = seed;
    }
    let cfg = MergeConfig::preset(preset)
        .ok_or_else(|| AppError::Invalid(format!("unknown preset {preset:?}")))?;
    let pair = plant_pair(&model, &PlantingSpec::default())?;
    let report = verify_pipeline(&pair, &cfg)?;
    eprint!("{}", report_table(&report));
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        ),
    }
    let mut m = Manifest::new("verify", json!({ "model": model, "merge": cfg }));
    if let Some(p) = config {
        m.input(p)?;
    }
    if let Some(p) = out {
        m.output(p)?;
    }
    m.stats = serde_json::to_value(&report).expect("report serializes");
    Ok((m, report.pass))
}

fn cmd_compare(a: &Path, b: &Path, ks: &[usize]) -> Result<Manifest> {
    let ta = load_salience(a)?;
    let tb = load_salience(b)?;
    let c = compare_salience(&ta, &tb, ks)?;
    let value = serde_json::to_value(&c).expect("comparison serializes");
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    let mut m = Manifest::new("compare-salience", json!({ "top_k": ks }));
    m.input(a)?;
    m.input(b)?;
    m.stats = value;
    Ok(m)
}

fn cmd_ttc(input: u64, cached: u64, output: u64) -> Manifest {
    let v = ttc(input, cached, output);
    let value = json!({ "ttc": v, "rounded": format!("{:.1}M", v / 1e6) });
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    let mut m = Manifest::new(
        "ttc",
        json!({ "input": input, "cached": cached, "output": output }),
    );
    m.stats = value;
    m
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let ctx = Ctx {
        seed: cli.seed,
        manifest_out: cli.manifest_out.clone(),
        shard_budget: cli.shard_budget,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(AppError::Invalid("--threads must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| AppError::Invalid(e.to_string()))?;
    let started = Instant::now();
    pool.install(|| {
        let mut code = 0;
        let (m, out): (Manifest, Option<&Path>) = match &cli.command {
            Command::Init { config, dtype, out } => {
                (cmd_init(&ctx, config, dtype, out)?, Some(out))
            }
            Command::Plant {
                config,
                out_instruct,
                out_thinking,
            } => (
                cmd_plant(&ctx, config.as_deref(), out_instruct, out_thinking)?,
                Some(out_instruct),
            ),
            Command::Delta {
                instruct,
                thinking,
                out,
            } => (cmd_delta(&ctx, instruct, thinking, out)?, Some(out)),
            Command::Taylor(a) => (cmd_taylor(&ctx, a)?, Some(&a.out)),
            Command::GspBuild(a) => (cmd_gsp_build(&ctx, a)?, Some(&a.out)),
            Command::Merge(a) => (cmd_merge(&ctx, a)?, Some(&a.out)),
            Command::Baseline(a) => (cmd_baseline(&ctx, a)?, Some(&a.out)),
            Command::Verify {
                config,
                preset,
                out,
            } => {
                let (m, pass) = cmd_verify(&ctx, config.as_deref(), preset, out.as_deref())?;
                if !pass {
                    code = 1;
                }
                (m, out.as_deref())
            }
            Command::CompareSalience { a, b, top_k } => (cmd_compare(a, b, top_k)?, None),
            Command::Ttc {
                input,
                cached,
                output,
            } => (cmd_ttc(*input, *cached, *output), None),
        };
        ctx.finish(m, out, started)?;
        Ok(code)
    })
}

/// Parses `args`, runs, and maps failures to exit codes.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
