#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crane_core::calibration::{CalibrationExample, SetTag};
use crane_core::micro::MicroConfig;
use crane_core::rng::SplitMix64;
use crane_core::schema::MixerFamily;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_crane")
}

pub fn crane(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn crane")
}

pub fn ok(args: &[&str]) -> Output {
    let out = crane(args);
    assert!(
        out.status.success(),
        "crane {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Three linear-attention layers over one full-attention layer, two experts.
pub fn hybrid_model(seed: u64) -> MicroConfig {
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

pub fn calibration(
    vocab: usize,
    per_set: [(SetTag, usize); 3],
    seed: u64,
) -> Vec<CalibrationExample> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    for (set, n) in per_set {
        for _ in 0..n {
            let len = 8 + rng.below(4);
            let tokens: Vec<u32> = (0..len).map(|_| rng.below(vocab) as u32).collect();
            let mut mask: Vec<u8> = (0..len)
                .map(|s| u8::from(s >= 3 && rng.below(3) > 0))
                .collect();
            mask[len - 1] = 1;
            out.push(CalibrationExample::new(tokens, mask, set));
        }
    }
    out
}

pub fn write_jsonl(path: &Path, examples: &[CalibrationExample]) {
    let lines: Vec<String> = examples
        .iter()
        .map(|e| serde_json::to_string(e).unwrap())
        .collect();
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// Micro model config, planted pair and calibration files in `dir`.
pub struct Fixture {
    pub model: PathBuf,
    pub inst: PathBuf,
    pub think: PathBuf,
    pub calib: PathBuf,
}

pub fn fixture(dir: &Path) -> Fixture {
    let model = dir.join("model.json");
    std::fs::write(&model, serde_json::to_vec(&hybrid_model(11)).unwrap()).unwrap();
    let calib = dir.join("calib.jsonl");
    write_jsonl(
        &calib,
        &calibration(16, [(SetTag::R, 6), (SetTag::A, 4), (SetTag::F, 5)], 3),
    );
    let inst = dir.join("inst.bin");
    let think = dir.join("think.bin");
    ok(&[
        "plant",
        "--config",
        s(&model),
        "--out-instruct",
        s(&inst),
        "--out-thinking",
        s(&think),
    ]);
    Fixture {
        model,
        inst,
        think,
        calib,
    }
}
