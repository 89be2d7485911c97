//! A deterministic desk-scale decoder-only transformer.
//!
//! Pre-norm residual blocks with RMS normalization, a token mixer that is
//! either causal softmax attention or an ungated linear-attention recurrence,
//! and a SwiGLU feed-forward that is either dense or a top-1 mixture of
//! experts. No positional encoding: causal masking alone breaks symmetry.
//!
//! The model exists to produce exact masked-NLL gradients (hand-written
//! reverse mode) and input-side activations for the merge stages. All
//! arithmetic is `f64`.
//!
//! Parameter names (row-major `[d_out, d_in]` for linear maps):
//!
//! ```text
//! embed.weight                                  [vocab, d]
//! layers.{l}.attn_norm.weight                   [d]
//! layers.{l}.attn.{q,k,v,o}_proj.weight         [d, d]   full attention
//! layers.{l}.linear_attn.{q,k,v,o}_proj.weight  [d, d]   linear attention
//! layers.{l}.ffn_norm.weight                    [d]
//! layers.{l}.mlp.{gate,up}_proj.weight          [f, d]   dense
//! layers.{l}.mlp.down_proj.weight               [d, f]
//! layers.{l}.moe.router.weight                  [E, d]   mixture of experts
//! layers.{l}.moe.experts.{e}.{gate,up}_proj.weight [f, d]
//! layers.{l}.moe.experts.{e}.down_proj.weight   [d, f]
//! final_norm.weight                             [d]
//! lm_head.weight                                [vocab, d]
//! ```

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::calibration::CalibrationExample;
use crate::dtype::DType;
use crate::rng::SplitMix64;
use crate::schema::MixerFamily;
use crate::tensor::{Tensor, TensorMap};
use crate::{Error, Result};

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MicroConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    /// 0 selects a dense FFN.
    pub moe_experts: usize,
    pub mixer_families: Vec<MixerFamily>,
    pub seed: u64,
}

impl MicroConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab < 2 {
            return bad(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult must be positive".into());
        }
        if self.mixer_families.len() != self.n_layers {
            return bad(format!(
                "{} mixer families for {} layers",
                self.mixer_families.len(),
                self.n_layers
            ));
        }
        if self.mixer_families.contains(&MixerFamily::None) {
            return bad("every layer needs an attention family".into());
        }
        Ok(())
    }

    /// Naming schema covering both mixer families and this FFN type.
    pub fn schema(&self) -> crate::schema::ModelSchema {
        crate::schema::ModelSchema::micro_common(
            &[MixerFamily::FullAttention, MixerFamily::LinearAttention],
            self.moe_experts > 0,
        )
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Activation spaces on the residual stream (inputs of q/k/v, FFN and head).
    pub fn residual_spaces(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.n_layers {
            v.push(format!("layers.{l}.attn_in"));
            v.push(format!("layers.{l}.ffn_in"));
        }
        v.push("final_in".into());
        v
    }

    /// Mixer outputs and FFN hidden activations (inputs of o_proj and down_proj).
    pub fn intermediate_spaces(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.n_layers {
            v.push(format!("layers.{l}.mixer_out"));
            if self.moe_experts == 0 {
                v.push(format!("layers.{l}.mlp_hidden"));
            } else {
                for e in 0..self.moe_experts {
                    v.push(format!("layers.{l}.experts.{e}.hidden"));
                }
            }
        }
        v
    }
}

/// Row-major `[rows, cols]` weight applied as `y = W x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

impl Linear {
    fn zeros(rows: usize, cols: usize) -> Self {
        Linear {
            rows,
            cols,
            w: vec![0.0; rows * cols],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `dx += Wᵀ dy`
    fn apply_t_acc(&self, dy: &[f64], dx: &mut [f64]) {
        for (row, &g) in self.w.chunks_exact(self.cols).zip(dy) {
            if g != 0.0 {
                axpy(g, row, dx);
            }
        }
    }

    /// `dW += dy xᵀ`
    fn outer_acc(&mut self, dy: &[f64], x: &[f64]) {
        for (row, &g) in self.w.chunks_exact_mut(self.cols).zip(dy) {
            if g != 0.0 {
                axpy(g, x, row);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Dense(Ffn),
    Moe { router: Linear, experts: Vec<Ffn> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub family: MixerFamily,
    pub attn_norm: Vec<f64>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn_norm: Vec<f64>,
    pub ffn: FeedForward,
}

/// Parameters (or gradients) of a micro model in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroWeights {
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    pub lm_head: Linear,
}

impl MicroWeights {
    pub fn zeros(cfg: &MicroConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let f = cfg.ffn_dim();
        let ffn = || Ffn {
            gate: Linear::zeros(f, d),
            up: Linear::zeros(f, d),
            down: Linear::zeros(d, f),
        };
        let blocks = cfg
            .mixer_families
            .iter()
            .map(|&family| Block {
                family,
                attn_norm: vec![0.0; d],
                q: Linear::zeros(d, d),
                k: Linear::zeros(d, d),
                v: Linear::zeros(d, d),
                o: Linear::zeros(d, d),
                ffn_norm: vec![0.0; d],
                ffn: if cfg.moe_experts == 0 {
                    FeedForward::Dense(ffn())
                } else {
                    FeedForward::Moe {
                        router: Linear::zeros(cfg.moe_experts, d),
                        experts: (0..cfg.moe_experts).map(|_| ffn()).collect(),
                    }
                },
            })
            .collect();
        Ok(MicroWeights {
            embed: Linear::zeros(cfg.vocab, d),
            blocks,
            final_norm: vec![0.0; d],
            lm_head: Linear::zeros(cfg.vocab, d),
        })
    }

    /// Every parameter with its name and shape, in construction order.
    pub fn slots(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        fn lin<'a>(out: &mut Vec<(String, Vec<usize>, &'a Vec<f64>)>, name: String, l: &'a Linear) {
            out.push((name, vec![l.rows, l.cols], &l.w));
        }
        let mut out = Vec::new();
        lin(&mut out, "embed.weight".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = mixer_prefix(b.family);
            out.push((
                format!("layers.{i}.attn_norm.weight"),
                vec![b.attn_norm.len()],
                &b.attn_norm,
            ));
            lin(&mut out, format!("layers.{i}.{p}.q_proj.weight"), &b.q);
            lin(&mut out, format!("layers.{i}.{p}.k_proj.weight"), &b.k);
            lin(&mut out, format!("layers.{i}.{p}.v_proj.weight"), &b.v);
            lin(&mut out, format!("layers.{i}.{p}.o_proj.weight"), &b.o);
            out.push((
                format!("layers.{i}.ffn_norm.weight"),
                vec![b.ffn_norm.len()],
                &b.ffn_norm,
            ));
            match &b.ffn {
                FeedForward::Dense(f) => {
                    lin(
                        &mut out,
                        format!("layers.{i}.mlp.gate_proj.weight"),
                        &f.gate,
                    );
                    lin(&mut out, format!("layers.{i}.mlp.up_proj.weight"), &f.up);
                    lin(
                        &mut out,
                        format!("layers.{i}.mlp.down_proj.weight"),
                        &f.down,
                    );
                }
                FeedForward::Moe { router, experts } => {
                    lin(&mut out, format!("layers.{i}.moe.router.weight"), router);
                    for (e, f) in experts.iter().enumerate() {
                        lin(
                            &mut out,
                            format!("layers.{i}.moe.experts.{e}.gate_proj.weight"),
                            &f.gate,
                        );
                        lin(
                            &mut out,
                            format!("layers.{i}.moe.experts.{e}.up_proj.weight"),
                            &f.up,
                        );
                        lin(
                            &mut out,
                            format!("layers.{i}.moe.experts.{e}.down_proj.weight"),
                            &f.down,
                        );
                    }
                }
            }
        }
        out.push((
            "final_norm.weight".into(),
            vec![self.final_norm.len()],
            &self.final_norm,
        ));
        lin(&mut out, "lm_head.weight".into(), &self.lm_head);
        out
    }

    /// Mutable parameter buffers in the same order as [`slots`](Self::slots).
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = vec![&mut self.embed.w];
        for b in &mut self.blocks {
            out.push(&mut b.attn_norm);
            out.push(&mut b.q.w);
            out.push(&mut b.k.w);
            out.push(&mut b.v.w);
            out.push(&mut b.o.w);
            out.push(&mut b.ffn_norm);
            match &mut b.ffn {
                FeedForward::Dense(f) => {
                    out.push(&mut f.gate.w);
                    out.push(&mut f.up.w);
                    out.push(&mut f.down.w);
                }
                FeedForward::Moe { router, experts } => {
                    out.push(&mut router.w);
                    for f in experts {
                        out.push(&mut f.gate.w);
                        out.push(&mut f.up.w);
                        out.push(&mut f.down.w);
                    }
                }
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head.w);
        out
    }

    /// Loads parameters from tensors named as in the module docs.
    pub fn from_tensors(cfg: &MicroConfig, tensors: &TensorMap) -> Result<Self> {
        let mut w = MicroWeights::zeros(cfg)?;
        let layout: Vec<(String, Vec<usize>)> =
            w.slots().into_iter().map(|(n, s, _)| (n, s)).collect();
        if let Some(extra) = tensors
            .keys()
            .find(|k| !layout.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::InvalidConfig(format!(
                "tensor {extra} is not part of the micro model layout"
            )));
        }
        for ((name, shape), buf) in layout.into_iter().zip(w.buffers_mut()) {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingTensor {
                name: name.clone(),
                side: "parameter",
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            *buf = t.to_f64();
        }
        Ok(w)
    }

    pub fn to_tensors(&self, dtype: DType) -> TensorMap {
        self.slots()
            .into_iter()
            .map(|(name, shape, data)| {
                let t = Tensor::from_f64(dtype, shape, data).expect("slot shape matches data");
                (name, t)
            })
            .collect()
    }

    /// `self += other` elementwise, slot by slot in a fixed order.
    pub fn add_assign(&mut self, other: &MicroWeights) {
        let theirs: Vec<&Vec<f64>> = other.slots().into_iter().map(|(_, _, d)| d).collect();
        for (mine, theirs) in self.buffers_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += *b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for buf in self.buffers_mut() {
            for a in buf.iter_mut() {
                *a *= s;
            }
        }
    }

    fn divide(&mut self, d: f64) {
        for buf in self.buffers_mut() {
            for a in buf.iter_mut() {
                *a /= d;
            }
        }
    }
}

fn mixer_prefix(family: MixerFamily) -> &'static str {
    match family {
        MixerFamily::LinearAttention => "linear_attn",
        _ => "attn",
    }
}

/// Seeded parameters stored as `F32`.
pub fn init_params(cfg: &MicroConfig) -> Result<TensorMap> {
    init_params_as(cfg, DType::F32)
}

pub fn init_params_as(cfg: &MicroConfig, dtype: DType) -> Result<TensorMap> {
    let mut w = MicroWeights::zeros(cfg)?;
    let mut rng = SplitMix64::new(cfg.seed);
    let shapes: Vec<(String, Vec<usize>)> = w.slots().into_iter().map(|(n, s, _)| (n, s)).collect();
    for ((name, shape), buf) in shapes.iter().zip(w.buffers_mut()) {
        if shape.len() == 1 {
            for x in buf.iter_mut() {
                *x = 1.0 + 0.1 * rng.normal();
            }
        } else {
            let std = if name == "embed.weight" {
                1.0
            } else {
                1.0 / libm::sqrt(shape[1] as f64)
            };
            for x in buf.iter_mut() {
                *x = std * rng.normal();
            }
        }
    }
    Ok(w.to_tensors(dtype))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: &[f64], index: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| libm::exp(v - m)).sum();
    z[index] - m - libm::log(s)
}

fn rms_norm(x: &[f64], g: &[f64]) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = libm::sqrt(ms + RMS_EPS);
    (x.iter().zip(g).map(|(v, gi)| gi * v / r).collect(), r)
}

/// Accumulates `dx` and `dg` for `y = g ⊙ x / r`.
fn rms_norm_back(x: &[f64], g: &[f64], r: f64, dy: &[f64], dx: &mut [f64], dg: &mut [f64]) {
    let n = x.len() as f64;
    let mut proj = 0.0;
    for i in 0..x.len() {
        dg[i] += dy[i] * x[i] / r;
        proj += g[i] * dy[i] * x[i];
    }
    let c = proj / (n * r * r * r);
    for i in 0..x.len() {
        dx[i] += g[i] * dy[i] / r - x[i] * c;
    }
}

/// Activation spaces and positions to record during a forward pass.
pub type CaptureRequest = BTreeMap<String, BTreeSet<usize>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// `[seq][vocab]`
    pub logits: Vec<Vec<f64>>,
    /// space → position → input activation of the linear maps reading that space.
    pub captured: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

struct FfnCache {
    g: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    y: Vec<f64>,
}

struct PosCache {
    expert: usize,
    probs: Vec<f64>,
    ffn: FfnCache,
}

struct BlockCache {
    x_in: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    a_r: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Full attention only: `[head][t][s]` probabilities for `s <= t`.
    probs: Vec<Vec<Vec<f64>>>,
    m: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    b_r: Vec<f64>,
    pos: Vec<PosCache>,
}

struct Cache {
    blocks: Vec<BlockCache>,
    x_final: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
    f_r: Vec<f64>,
    logits: Vec<Vec<f64>>,
}

fn ffn_forward(f: &Ffn, x: &[f64]) -> FfnCache {
    let g = f.gate.apply(x);
    let u = f.up.apply(x);
    let h: Vec<f64> = g
        .iter()
        .zip(&u)
        .map(|(&gi, &ui)| gi * sigmoid(gi) * ui)
        .collect();
    let y = f.down.apply(&h);
    FfnCache { g, u, h, y }
}

/// Accumulates parameter grads into `df` and input grads into `dx`.
fn ffn_backward(f: &Ffn, df: &mut Ffn, x: &[f64], c: &FfnCache, dy: &[f64], dx: &mut [f64]) {
    df.down.outer_acc(dy, &c.h);
    let mut dh = vec![0.0; c.h.len()];
    f.down.apply_t_acc(dy, &mut dh);
    let mut dg = vec![0.0; c.g.len()];
    let mut du = vec![0.0; c.u.len()];
    for i in 0..dh.len() {
        let s = sigmoid(c.g[i]);
        let silu = c.g[i] * s;
        du[i] = dh[i] * silu;
        dg[i] = dh[i] * c.u[i] * s * (1.0 + c.g[i] * (1.0 - s));
    }
    df.gate.outer_acc(&dg, x);
    df.up.outer_acc(&du, x);
    f.gate.apply_t_acc(&dg, dx);
    f.up.apply_t_acc(&du, dx);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn record(
    captured: &mut BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
    capture: &CaptureRequest,
    space: &str,
    t: usize,
    value: impl FnOnce() -> Vec<f64>,
) {
    if let Some(positions) = capture.get(space) {
        if positions.contains(&t) {
            captured.entry(space.into()).or_default().insert(t, value());
        }
    }
}

fn run(
    w: &MicroWeights,
    cfg: &MicroConfig,
    tokens: &[u32],
    capture: &CaptureRequest,
) -> Result<(Cache, BTreeMap<String, BTreeMap<usize, Vec<f64>>>)> {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = tokens.len();
    for &tok in tokens {
        if tok as usize >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token: tok,
                vocab: cfg.vocab,
            });
        }
    }
    for (space, positions) in capture {
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::MissingCapture {
                space: space.clone(),
                example: 0,
                position: p,
            });
        }
    }
    let mut captured = BTreeMap::new();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&tok| {
            let t = tok as usize;
            w.embed.w[t * d..(t + 1) * d].to_vec()
        })
        .collect();

    let mut blocks = Vec::with_capacity(w.blocks.len());
    for (l, blk) in w.blocks.iter().enumerate() {
        let x_in = x.clone();
        let mut a = Vec::with_capacity(n);
        let mut a_r = Vec::with_capacity(n);
        for xt in &x_in {
            let (y, r) = rms_norm(xt, &blk.attn_norm);
            a.push(y);
            a_r.push(r);
        }
        let attn_in = format!("layers.{l}.attn_in");
        for (t, at) in a.iter().enumerate() {
            record(&mut captured, capture, &attn_in, t, || at.clone());
        }
        let q: Vec<Vec<f64>> = a.iter().map(|v| blk.q.apply(v)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|v| blk.k.apply(v)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|v| blk.v.apply(v)).collect();

        let mut m = vec![vec![0.0; d]; n];
        let mut probs = Vec::new();
        match blk.family {
            MixerFamily::LinearAttention => {
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    // S_t = S_{t-1} + k_t v_tᵀ ; out_t = q_tᵀ S_t / (t + 1)
                    let mut state = vec![0.0; dh * dh];
                    for t in 0..n {
                        let (kt, vt) = (&k[t][r.clone()], &v[t][r.clone()]);
                        for i in 0..dh {
                            axpy(kt[i], vt, &mut state[i * dh..(i + 1) * dh]);
                        }
                        let qt = &q[t][r.clone()];
                        let norm = 1.0 / (t + 1) as f64;
                        for j in 0..dh {
                            let mut acc = 0.0;
                            for i in 0..dh {
                                acc += qt[i] * state[i * dh + j];
                            }
                            m[t][h * dh + j] = acc * norm;
                        }
                    }
                }
            }
            _ => {
                let scale = 1.0 / libm::sqrt(dh as f64);
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    let mut head = Vec::with_capacity(n);
                    for t in 0..n {
                        let scores: Vec<f64> = (0..=t)
                            .map(|s| dot(&q[t][r.clone()], &k[s][r.clone()]) * scale)
                            .collect();
                        let p = softmax(&scores);
                        for (s, &ps) in p.iter().enumerate() {
                            axpy(ps, &v[s][r.clone()], &mut m[t][r.clone()]);
                        }
                        head.push(p);
                    }
                    probs.push(head);
                }
            }
        }
        let mixer_out = format!("layers.{l}.mixer_out");
        for (t, mt) in m.iter().enumerate() {
            record(&mut captured, capture, &mixer_out, t, || mt.clone());
        }
        for t in 0..n {
            let o = blk.o.apply(&m[t]);
            axpy(1.0, &o, &mut x[t]);
        }
        let x_mid = x.clone();

        let mut b = Vec::with_capacity(n);
        let mut b_r = Vec::with_capacity(n);
        for xt in &x_mid {
            let (y, r) = rms_norm(xt, &blk.ffn_norm);
            b.push(y);
            b_r.push(r);
        }
        let ffn_in = format!("layers.{l}.ffn_in");
        let mut pos = Vec::with_capacity(n);
        for t in 0..n {
            record(&mut captured, capture, &ffn_in, t, || b[t].clone());
            match &blk.ffn {
                FeedForward::Dense(f) => {
                    let c = ffn_forward(f, &b[t]);
                    record(
                        &mut captured,
                        capture,
                        &format!("layers.{l}.mlp_hidden"),
                        t,
                        || c.h.clone(),
                    );
                    axpy(1.0, &c.y, &mut x[t]);
                    pos.push(PosCache {
                        expert: 0,
                        probs: Vec::new(),
                        ffn: c,
                    });
                }
                FeedForward::Moe { router, experts } => {
                    let logits = router.apply(&b[t]);
                    let p = softmax(&logits);
                    let e = argmax(&logits);
                    let c = ffn_forward(&experts[e], &b[t]);
                    for (j, ex) in experts.iter().enumerate() {
                        let space = format!("layers.{l}.experts.{j}.hidden");
                        if j == e {
                            record(&mut captured, capture, &space, t, || c.h.clone());
                        } else {
                            // Input the down projection would see if routed here.
                            record(&mut captured, capture, &space, t, || {
                                ffn_forward(ex, &b[t]).h
                            });
                        }
                    }
                    axpy(p[e], &c.y, &mut x[t]);
                    pos.push(PosCache {
                        expert: e,
                        probs: p,
                        ffn: c,
                    });
                }
            }
        }
        blocks.push(BlockCache {
            x_in,
            a,
            a_r,
            q,
            k,
            v,
            probs,
            m,
            x_mid,
            b,
            b_r,
            pos,
        });
    }

    let mut f = Vec::with_capacity(n);
    let mut f_r = Vec::with_capacity(n);
    for (t, xt) in x.iter().enumerate() {
        let (y, r) = rms_norm(xt, &w.final_norm);
        record(&mut captured, capture, "final_in", t, || y.clone());
        f.push(y);
        f_r.push(r);
    }
    let logits = f.iter().map(|ft| w.lm_head.apply(ft)).collect();
    Ok((
        Cache {
            blocks,
            x_final: x,
            f,
            f_r,
            logits,
        },
        captured,
    ))
}

/// Logits for every position plus requested input activations.
pub fn forward(
    w: &MicroWeights,
    cfg: &MicroConfig,
    tokens: &[u32],
    capture: &CaptureRequest,
) -> Result<ForwardTrace> {
    let (cache, captured) = run(w, cfg, tokens, capture)?;
    Ok(ForwardTrace {
        logits: cache.logits,
        captured,
    })
}

fn check_loss_example(ex: &CalibrationExample) -> Result<()> {
    ex.validate()
        .map_err(|reason| Error::InvalidExample { index: 0, reason })?;
    if ex.masked_count() == 0 {
        return Err(Error::InvalidExample {
            index: 0,
            reason: "loss mask selects no tokens".into(),
        });
    }
    Ok(())
}

/// Sum of masked next-token NLLs and the number of masked tokens.
fn nll_sum(logits: &[Vec<f64>], ex: &CalibrationExample) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for s in 1..ex.tokens.len() {
        if ex.mask[s] == 1 {
            sum -= log_softmax_at(&logits[s - 1], ex.tokens[s] as usize);
            count += 1;
        }
    }
    (sum, count)
}

/// Mean masked NLL of one example.
pub fn masked_nll(w: &MicroWeights, cfg: &MicroConfig, ex: &CalibrationExample) -> Result<f64> {
    check_loss_example(ex)?;
    let trace = forward(w, cfg, &ex.tokens, &CaptureRequest::new())?;
    let (sum, count) = nll_sum(&trace.logits, ex);
    Ok(sum / count as f64)
}

/// Token-weighted masked NLL of a dataset (one global normalizer `M`).
pub fn dataset_nll(
    w: &MicroWeights,
    cfg: &MicroConfig,
    data: &[CalibrationExample],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (index, ex) in data.iter().enumerate() {
        check_loss_example(ex).map_err(|e| reindex(e, index))?;
        let trace = forward(w, cfg, &ex.tokens, &CaptureRequest::new())?;
        let (s, c) = nll_sum(&trace.logits, ex);
        sum += s;
        count += c;
    }
    Ok(sum / count as f64)
}

fn reindex(e: Error, index: usize) -> Error {
    match e {
        Error::InvalidExample { reason, .. } => Error::InvalidExample { index, reason },
        other => other,
    }
}

/// Unnormalized gradient contribution of one example.
#[derive(Clone, Debug)]
pub struct ExampleGradient {
    pub nll_sum: f64,
    pub masked: usize,
    pub grad: MicroWeights,
}

/// Gradient of the masked NLL *sum* of one example.
pub fn example_gradient(
    w: &MicroWeights,
    cfg: &MicroConfig,
    ex: &CalibrationExample,
) -> Result<ExampleGradient> {
    check_loss_example(ex)?;
    let (cache, _) = run(w, cfg, &ex.tokens, &CaptureRequest::new())?;
    let (nll, masked) = nll_sum(&cache.logits, ex);
    let n = ex.tokens.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let mut g = MicroWeights::zeros(cfg)?;

    let mut dlogits = vec![vec![0.0; cfg.vocab]; n];
    for s in 1..n {
        if ex.mask[s] == 1 {
            let mut p = softmax(&cache.logits[s - 1]);
            p[ex.tokens[s] as usize] -= 1.0;
            dlogits[s - 1] = p;
        }
    }

    let mut dx = vec![vec![0.0; d]; n];
    for t in 0..n {
        g.lm_head.outer_acc(&dlogits[t], &cache.f[t]);
        let mut df = vec![0.0; d];
        w.lm_head.apply_t_acc(&dlogits[t], &mut df);
        rms_norm_back(
            &cache.x_final[t],
            &w.final_norm,
            cache.f_r[t],
            &df,
            &mut dx[t],
            &mut g.final_norm,
        );
    }

    for (l, blk) in w.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[l];
        let gb = &mut g.blocks[l];

        // Feed-forward branch: x_out = x_mid + ffn(norm(x_mid)).
        let mut dx_mid = dx.clone();
        for t in 0..n {
            let mut db = vec![0.0; d];
            let pc = &c.pos[t];
            match (&blk.ffn, &mut gb.ffn) {
                (FeedForward::Dense(f), FeedForward::Dense(gf)) => {
                    ffn_backward(f, gf, &c.b[t], &pc.ffn, &dx[t], &mut db);
                }
                (
                    FeedForward::Moe { router, experts },
                    FeedForward::Moe {
                        router: gr,
                        experts: ge,
                    },
                ) => {
                    let e = pc.expert;
                    let pe = pc.probs[e];
                    let dy: Vec<f64> = dx[t].iter().map(|v| v * pe).collect();
                    ffn_backward(&experts[e], &mut ge[e], &c.b[t], &pc.ffn, &dy, &mut db);
                    let dpe = dot(&dx[t], &pc.ffn.y);
                    let dr: Vec<f64> = pc
                        .probs
                        .iter()
                        .enumerate()
                        .map(|(j, &pj)| dpe * pe * (if j == e { 1.0 } else { 0.0 } - pj))
                        .collect();
                    gr.outer_acc(&dr, &c.b[t]);
                    router.apply_t_acc(&dr, &mut db);
                }
                _ => unreachable!("gradient layout mirrors parameters"),
            }
            rms_norm_back(
                &c.x_mid[t],
                &blk.ffn_norm,
                c.b_r[t],
                &db,
                &mut dx_mid[t],
                &mut gb.ffn_norm,
            );
        }

        // Mixer branch: x_mid = x_in + o(mix(q, k, v)).
        let mut dm = vec![vec![0.0; d]; n];
        for t in 0..n {
            gb.o.outer_acc(&dx_mid[t], &c.m[t]);
            blk.o.apply_t_acc(&dx_mid[t], &mut dm[t]);
        }
        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        match blk.family {
            MixerFamily::LinearAttention => {
                // Pairwise form of the recurrence: out_t = c_t Σ_{s<=t} (q_t·k_s) v_s.
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    for t in 0..n {
                        let ct = 1.0 / (t + 1) as f64;
                        let dot_t = &dm[t][r.clone()];
                        for s in 0..=t {
                            let qk = dot(&c.q[t][r.clone()], &c.k[s][r.clone()]);
                            let dov = dot(dot_t, &c.v[s][r.clone()]);
                            axpy(ct * dov, &c.k[s][r.clone()], &mut dq[t][r.clone()]);
                            axpy(ct * dov, &c.q[t][r.clone()], &mut dk[s][r.clone()]);
                            axpy(ct * qk, dot_t, &mut dv[s][r.clone()]);
                        }
                    }
                }
            }
            _ => {
                let scale = 1.0 / libm::sqrt(dh as f64);
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    for t in 0..n {
                        let p = &c.probs[h][t];
                        let dot_t = &dm[t][r.clone()];
                        let dp: Vec<f64> =
                            (0..=t).map(|s| dot(dot_t, &c.v[s][r.clone()])).collect();
                        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for s in 0..=t {
                            axpy(p[s], dot_t, &mut dv[s][r.clone()]);
                            let ds = p[s] * (dp[s] - mean) * scale;
                            axpy(ds, &c.k[s][r.clone()], &mut dq[t][r.clone()]);
                            axpy(ds, &c.q[t][r.clone()], &mut dk[s][r.clone()]);
                        }
                    }
                }
            }
        }
        let mut dx_in = dx_mid.clone();
        for t in 0..n {
            let mut da = vec![0.0; d];
            gb.q.outer_acc(&dq[t], &c.a[t]);
            gb.k.outer_acc(&dk[t], &c.a[t]);
            gb.v.outer_acc(&dv[t], &c.a[t]);
            blk.q.apply_t_acc(&dq[t], &mut da);
            blk.k.apply_t_acc(&dk[t], &mut da);
            blk.v.apply_t_acc(&dv[t], &mut da);
            rms_norm_back(
                &c.x_in[t],
                &blk.attn_norm,
                c.a_r[t],
                &da,
                &mut dx_in[t],
                &mut gb.attn_norm,
            );
        }
        dx = dx_in;
    }

    for (t, &tok) in ex.tokens.iter().enumerate() {
        let row = tok as usize * d;
        axpy(1.0, &dx[t], &mut g.embed.w[row..row + d]);
    }

    Ok(ExampleGradient {
        nll_sum: nll,
        masked,
        grad: g,
    })
}

/// Exact gradient of a dataset's token-weighted masked NLL.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub loss: f64,
    pub masked_tokens: usize,
    pub grad: MicroWeights,
}

impl GradientSet {
    pub fn to_tensors(&self) -> TensorMap {
        self.grad.to_tensors(DType::F64)
    }
}

/// Reduces per-example contributions in the given order, then normalizes by
/// the total masked-token count.
pub fn reduce_gradients(
    cfg: &MicroConfig,
    parts: impl IntoIterator<Item = ExampleGradient>,
) -> Result<GradientSet> {
    let mut acc = MicroWeights::zeros(cfg)?;
    let mut nll = 0.0;
    let mut masked = 0;
    let mut any = false;
    for part in parts {
        any = true;
        acc.add_assign(&part.grad);
        nll += part.nll_sum;
        masked += part.masked;
    }
    if !any {
        return Err(Error::EmptyDataset);
    }
    acc.divide(masked as f64);
    Ok(GradientSet {
        loss: nll / masked as f64,
        masked_tokens: masked,
        grad: acc,
    })
}

pub fn gradients(
    w: &MicroWeights,
    cfg: &MicroConfig,
    data: &[CalibrationExample],
) -> Result<GradientSet> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts = data
        .iter()
        .enumerate()
        .map(|(i, ex)| example_gradient(w, cfg, ex).map_err(|e| reindex(e, i)))
        .collect::<Result<Vec<_>>>()?;
    reduce_gradients(cfg, parts)
}

/// Mean absolute input activation per channel for every tensor that reads a
/// captured space, over all positions of `data`.
///
/// Keys are activation-space names; map tensors to spaces with a bound schema.
pub fn channel_importance(
    w: &MicroWeights,
    cfg: &MicroConfig,
    data: &[CalibrationExample],
    spaces: &[String],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    for ex in data {
        let all: BTreeSet<usize> = (0..ex.tokens.len()).collect();
        let req: CaptureRequest = spaces.iter().map(|s| (s.clone(), all.clone())).collect();
        let trace = forward(w, cfg, &ex.tokens, &req)?;
        for (space, rows) in trace.captured {
            for v in rows.values() {
                let entry = sums
                    .entry(space.clone())
                    .or_insert_with(|| (vec![0.0; v.len()], 0));
                for (a, x) in entry.0.iter_mut().zip(v) {
                    *a += x.abs();
                }
                entry.1 += 1;
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::SetTag;

    fn cfg(families: Vec<MixerFamily>, experts: usize) -> MicroConfig {
        MicroConfig {
            vocab: 11,
            d_model: 8,
            n_layers: families.len(),
            n_heads: 2,
            ffn_mult: 2,
            moe_experts: experts,
            mixer_families: families,
            seed: 5,
        }
    }

    fn weights(c: &MicroConfig) -> MicroWeights {
        MicroWeights::from_tensors(c, &init_params_as(c, DType::F64).unwrap()).unwrap()
    }

    fn ex(tokens: &[u32], mask: &[u8]) -> CalibrationExample {
        CalibrationExample::new(tokens.to_vec(), mask.to_vec(), SetTag::R)
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(vec![MixerFamily::FullAttention], 0);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg(vec![MixerFamily::FullAttention], 0);
        c.vocab = 1;
        assert!(c.validate().is_err());
        let mut c = cfg(vec![MixerFamily::FullAttention], 0);
        c.n_layers = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = cfg(vec![MixerFamily::FullAttention; 2], 4);
        let a = init_params(&c).unwrap();
        assert_eq!(a, init_params(&c).unwrap());
        for e in 0..4 {
            for p in ["gate", "up", "down"] {
                assert!(a.contains_key(&format!("layers.1.moe.experts.{e}.{p}_proj.weight")));
            }
        }
        assert!(a.contains_key("layers.0.moe.router.weight"));
        let mut c2 = c.clone();
        c2.seed = c.seed + 1;
        assert_ne!(a, init_params(&c2).unwrap());
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let c = cfg(
            vec![MixerFamily::FullAttention, MixerFamily::LinearAttention],
            2,
        );
        let w = MicroWeights::zeros(&c).unwrap();
        let trace = forward(&w, &c, &[1, 2, 3], &CaptureRequest::new()).unwrap();
        for row in &trace.logits {
            assert!(row.iter().all(|&v| v == row[0]));
        }
        let mut big = c.clone();
        big.vocab = 64;
        let w = MicroWeights::zeros(&big).unwrap();
        let loss = masked_nll(&w, &big, &ex(&[3, 9], &[0, 1])).unwrap();
        assert!((loss - libm::log(64.0)).abs() < 1e-12);
        assert!((loss - 4.158883).abs() < 1e-6);
    }

    #[test]
    fn attn_input_capture_is_normed_embedding() {
        let c = cfg(vec![MixerFamily::FullAttention; 2], 0);
        let w = weights(&c);
        let mut req = CaptureRequest::new();
        req.insert("layers.0.attn_in".into(), [0].into());
        let trace = forward(&w, &c, &[4, 7, 1], &req).unwrap();
        let got = &trace.captured["layers.0.attn_in"][&0];
        // Hand evaluation: g ⊙ e / sqrt(mean(e²) + eps) for embedding row 4.
        let e = &w.embed.w[4 * 8..5 * 8];
        let ms: f64 = e.iter().map(|v| v * v).sum::<f64>() / 8.0;
        for i in 0..8 {
            let want = w.blocks[0].attn_norm[i] * e[i] / libm::sqrt(ms + RMS_EPS);
            assert!((got[i] - want).abs() < 1e-14);
        }
        assert_eq!(trace.captured["layers.0.attn_in"].len(), 1);
    }

    #[test]
    fn mixer_families_differ() {
        let full = cfg(vec![MixerFamily::FullAttention; 2], 0);
        let mut lin = full.clone();
        lin.mixer_families = vec![MixerFamily::LinearAttention; 2];
        let wf = weights(&full);
        // Same numbers under the linear-attention names.
        let mut wl = wf.clone();
        for b in &mut wl.blocks {
            b.family = MixerFamily::LinearAttention;
        }
        let toks = [1, 5, 2, 8, 3];
        let a = forward(&wf, &full, &toks, &CaptureRequest::new()).unwrap();
        let b = forward(&wl, &lin, &toks, &CaptureRequest::new()).unwrap();
        assert!(a.logits[4]
            .iter()
            .zip(&b.logits[4])
            .any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn causality() {
        for fam in [MixerFamily::FullAttention, MixerFamily::LinearAttention] {
            let c = cfg(vec![fam; 2], 2);
            let w = weights(&c);
            let toks = [1, 5, 2, 8, 3, 0];
            let full = forward(&w, &c, &toks, &CaptureRequest::new()).unwrap();
            let cut = forward(&w, &c, &toks[..3], &CaptureRequest::new()).unwrap();
            for t in 0..3 {
                assert_eq!(full.logits[t], cut.logits[t]);
            }
        }
    }

    #[test]
    fn out_of_range_token() {
        let c = cfg(vec![MixerFamily::FullAttention], 0);
        let w = weights(&c);
        assert_eq!(
            forward(&w, &c, &[1, 11], &CaptureRequest::new()).unwrap_err(),
            Error::TokenOutOfRange {
                token: 11,
                vocab: 11
            }
        );
    }

    #[test]
    fn masked_mean_over_selected_positions() {
        let c = cfg(vec![MixerFamily::FullAttention], 0);
        let w = weights(&c);
        let toks = [2, 6, 1, 9];
        let trace = forward(&w, &c, &toks, &CaptureRequest::new()).unwrap();
        // Oracle: every per-position NLL, then average the selected ones.
        let per: Vec<f64> = (1..4)
            .map(|s| -log_softmax_at(&trace.logits[s - 1], toks[s] as usize))
            .collect();
        let loss = masked_nll(&w, &c, &ex(&toks, &[0, 1, 0, 1])).unwrap();
        assert!((loss - (per[0] + per[2]) / 2.0).abs() < 1e-14);
        assert!(masked_nll(&w, &c, &ex(&toks, &[0, 0, 0, 0])).is_err());
    }

    #[test]
    fn dataset_loss_is_token_weighted() {
        let c = cfg(vec![MixerFamily::FullAttention], 0);
        let w = weights(&c);
        let a = ex(&[1, 2, 3, 4], &[0, 1, 1, 1]);
        let b = ex(&[5, 6], &[0, 1]);
        let la = masked_nll(&w, &c, &a).unwrap();
        let lb = masked_nll(&w, &c, &b).unwrap();
        let token_weighted = (3.0 * la + lb) / 4.0;
        let example_weighted = (la + lb) / 2.0;
        let got = dataset_nll(&w, &c, &[a.clone(), b.clone()]).unwrap();
        assert!((got - token_weighted).abs() < 1e-12);
        assert!((got - example_weighted).abs() > 1e-6);
        // A duplicated example leaves the token-weighted loss unchanged.
        let dup = dataset_nll(&w, &c, &[a.clone(), a.clone()]).unwrap();
        assert!((dup - la).abs() < 1e-12);
    }

    #[test]
    fn repeated_example_gives_identical_gradient() {
        let c = cfg(vec![MixerFamily::FullAttention], 2);
        let w = weights(&c);
        let a = ex(&[1, 2, 3, 4], &[0, 1, 0, 1]);
        let one = gradients(&w, &c, core::slice::from_ref(&a)).unwrap();
        let two = gradients(&w, &c, &[a.clone(), a]).unwrap();
        assert_eq!(one.grad, two.grad);
        assert_eq!(two.masked_tokens, 4);
    }

    #[test]
    fn unrouted_expert_has_zero_gradient() {
        let c = cfg(vec![MixerFamily::FullAttention], 3);
        let mut w = weights(&c);
        // Bias routing hard towards expert 0 by zeroing the router and
        // giving expert 0 a huge logit through a constant input direction.
        if let FeedForward::Moe { router, .. } = &mut w.blocks[0].ffn {
            for x in router.w.iter_mut() {
                *x = 0.0;
            }
        }
        // All-zero router logits tie; ties pick expert 0.
        let g = gradients(&w, &c, &[ex(&[1, 2, 3], &[0, 1, 1])]).unwrap();
        if let FeedForward::Moe { experts, .. } = &g.grad.blocks[0].ffn {
            assert!(experts[0].gate.w.iter().any(|&v| v != 0.0));
            for e in &experts[1..] {
                assert!(e
                    .gate
                    .w
                    .iter()
                    .chain(&e.up.w)
                    .chain(&e.down.w)
                    .all(|&v| v == 0.0));
            }
        } else {
            panic!("expected moe");
        }
    }

    fn fd_check(c: &MicroConfig, data: &[CalibrationExample]) -> f64 {
        let w = weights(c);
        let g = gradients(&w, c, data).unwrap();
        let analytic: Vec<f64> = g
            .grad
            .slots()
            .into_iter()
            .flat_map(|(_, _, d)| d.clone())
            .collect();
        let mut probe = w.clone();
        let mut worst: f64 = 0.0;
        let mut offset = 0;
        let n_bufs = probe.buffers_mut().len();
        for b in 0..n_bufs {
            let len = probe.buffers_mut()[b].len();
            for i in 0..len {
                let orig = probe.buffers_mut()[b][i];
                let h = 1e-5 * orig.abs().max(1.0);
                probe.buffers_mut()[b][i] = orig + h;
                let up = dataset_nll(&probe, c, data).unwrap();
                probe.buffers_mut()[b][i] = orig - h;
                let down = dataset_nll(&probe, c, data).unwrap();
                probe.buffers_mut()[b][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[offset + i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst = worst.max(err);
            }
            offset += len;
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_dense_full() {
        let c = cfg(vec![MixerFamily::FullAttention; 2], 0);
        let data = [
            ex(&[1, 2, 3, 4, 5], &[0, 1, 1, 0, 1]),
            ex(&[7, 3, 9], &[0, 0, 1]),
        ];
        let worst = fd_check(&c, &data);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn gradients_match_finite_differences_moe_hybrid() {
        let c = cfg(
            vec![MixerFamily::LinearAttention, MixerFamily::FullAttention],
            2,
        );
        let data = [
            ex(&[1, 2, 3, 4, 5], &[0, 1, 1, 0, 1]),
            ex(&[7, 3, 9, 10], &[0, 1, 0, 1]),
        ];
        let worst = fd_check(&c, &data);
        assert!(worst < 1e-6, "{worst}");
    }
}
