//! First-order salience of the delta and its per-component aggregation.
//!
//! Each delta coordinate gets a signed score per loss, `s_K(j) = -g_K,j δ_j`,
//! the predicted loss decrease of moving that coordinate towards the
//! Thinking checkpoint. The gate keeps `p_j = max(0, min(s_R, s_A))`, so only
//! coordinates predicted to help both the reasoning loss and the
//! agent-preservation loss survive. Block sums of `p` are then expressed
//! relative to the layer's FFN/expert anchor block and corrected by the
//! ratio of Instruct parameter norms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::schema::{BoundSchema, ComponentKind, Layer, MixerFamily};
use crate::tensor::TensorMap;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoordinateScores {
    pub s_r: Vec<f64>,
    pub s_a: Vec<f64>,
    pub p: Vec<f64>,
}

/// Scores for one tensor from flat gradients and delta.
pub fn coordinate_scores(g_r: &[f64], g_a: &[f64], delta: &[f64]) -> Result<CoordinateScores> {
    for len in [g_r.len(), g_a.len()] {
        if len != delta.len() {
            return Err(Error::DimensionMismatch {
                expected: delta.len(),
                found: len,
            });
        }
    }
    let mut out = CoordinateScores::default();
    for ((&gr, &ga), &d) in g_r.iter().zip(g_a).zip(delta) {
        let sr = -gr * d;
        let sa = -ga * d;
        out.s_r.push(sr);
        out.s_a.push(sa);
        // max(0, ·) also maps a NaN minimum to 0.
        let m = sr.min(sa);
        out.p.push(if m > 0.0 { m } else { 0.0 });
    }
    Ok(out)
}

/// Scores every delta tensor against same-named gradient tensors.
pub fn score_all(
    g_r: &TensorMap,
    g_a: &TensorMap,
    delta: &TensorMap,
) -> Result<BTreeMap<String, CoordinateScores>> {
    let mut out = BTreeMap::new();
    for (name, d) in delta {
        let mut grads = Vec::with_capacity(2);
        for g in [g_r, g_a] {
            let t = g.get(name).ok_or_else(|| Error::MissingTensor {
                name: name.clone(),
                side: "gradient",
            })?;
            if t.shape() != d.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: d.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            grads.push(t.to_f64());
        }
        out.insert(
            name.clone(),
            coordinate_scores(&grads[0], &grads[1], &d.to_f64())?,
        );
    }
    Ok(out)
}

/// Row of a salience table: a component kind, or the per-layer anchor block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Row {
    Kind(ComponentKind),
    Anchor,
}

impl Row {
    pub fn name(self) -> &'static str {
        match self {
            Row::Kind(k) => k.name(),
            Row::Anchor => "anchor",
        }
    }

    pub fn parse(s: &str) -> Option<Row> {
        if s == "anchor" {
            Some(Row::Anchor)
        } else {
            ComponentKind::parse(s).map(Row::Kind)
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Row {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Row {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <String as serde::Deserialize>::deserialize(d)?;
        Row::parse(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown component kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SalienceEntry {
    #[cfg_attr(feature = "serde", serde(rename = "kind"))]
    pub row: Row,
    pub layer: Layer,
    #[cfg_attr(feature = "serde", serde(default))]
    pub family: MixerFamily,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorNorm {
    pub layer: Layer,
    pub value: f64,
}

/// One coefficient per (component kind, layer), plus anchor rows fixed at 1.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SalienceTable {
    /// Sorted by (row, layer).
    pub entries: Vec<SalienceEntry>,
    pub anchor_norms: Vec<AnchorNorm>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub metadata: BTreeMap<String, String>,
}

impl SalienceTable {
    pub fn get(&self, row: Row, layer: Layer) -> Option<f64> {
        self.entries
            .binary_search_by(|e| (e.row, e.layer).cmp(&(row, layer)))
            .ok()
            .map(|i| self.entries[i].value)
    }

    /// Coefficient applied to tensors of `kind` in `layer`.
    pub fn coefficient(&self, kind: ComponentKind, layer: Layer) -> Option<f64> {
        self.get(Row::Kind(kind), layer)
    }

    /// Non-anchor entries in the stable comparison order: kind name, then layer.
    pub fn grid(&self) -> Vec<&SalienceEntry> {
        let mut v: Vec<&SalienceEntry> = self
            .entries
            .iter()
            .filter(|e| e.row != Row::Anchor)
            .collect();
        v.sort_by(|a, b| (a.row.name(), a.layer).cmp(&(b.row.name(), b.layer)));
        v
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.value.is_finite() && e.value >= 0.0) {
                return Err(Error::InvalidValue {
                    what: "salience coefficient",
                    value: e.value,
                });
            }
        }
        Ok(())
    }

    /// Restores the (row, layer) order lookups rely on.
    pub fn sort(&mut self) {
        self.entries.sort_by_key(|a| (a.row, a.layer));
    }
}

#[derive(Default)]
struct Block {
    p_sum: f64,
    norm_sq: f64,
    family: MixerFamily,
}

/// Aggregates coordinate scores into the salience table.
///
/// Expert replicas of a kind are pooled into one coefficient per layer.
/// Global components are referenced to the mean anchor p-sum and mean
/// anchor norm over the transformer layers. Returns the table and any
/// warnings about coefficients forced to zero.
pub fn aggregate(
    scores: &BTreeMap<String, CoordinateScores>,
    bound: &BoundSchema,
    inst: &TensorMap,
) -> Result<(SalienceTable, Vec<String>)> {
    for name in scores.keys() {
        if bound.get(name).is_none() {
            return Err(Error::UnmatchedName(name.clone()));
        }
    }
    let mut blocks: BTreeMap<(Row, Layer), Block> = BTreeMap::new();
    let mut anchors: BTreeMap<Layer, Block> = BTreeMap::new();
    for (name, binding) in &bound.bindings {
        let theta = inst.get(name).ok_or_else(|| Error::MissingTensor {
            name: name.clone(),
            side: "instruct",
        })?;
        let mut norm_sq = 0.0;
        for v in theta.to_f64() {
            norm_sq += v * v;
        }
        let mut p_sum = 0.0;
        if let Some(s) = scores.get(name) {
            if s.p.len() != theta.numel() {
                return Err(Error::DimensionMismatch {
                    expected: theta.numel(),
                    found: s.p.len(),
                });
            }
            for &p in &s.p {
                p_sum += p;
            }
        }
        let layer = binding.component.layer;
        let kind = binding.component.kind;
        let block = blocks.entry((Row::Kind(kind), layer)).or_default();
        block.p_sum += p_sum;
        block.norm_sq += norm_sq;
        block.family = binding.family;
        if bound.anchor.contains(&kind) && layer != Layer::Global {
            let a = anchors.entry(layer).or_default();
            a.p_sum += p_sum;
            a.norm_sq += norm_sq;
        }
    }

    let layers = bound.layers();
    let mut warnings = Vec::new();
    let mut table = SalienceTable::default();
    let reference = |layer: Layer, warnings: &mut Vec<String>| -> (f64, f64) {
        match layer {
            Layer::Index(_) => anchors
                .get(&layer)
                .map(|a| (a.p_sum, libm::sqrt(a.norm_sq)))
                .unwrap_or((0.0, 0.0)),
            Layer::Global => {
                if anchors.is_empty() {
                    warnings.push("no per-layer anchor for global components".to_string());
                    return (0.0, 0.0);
                }
                let n = anchors.len() as f64;
                let p: f64 = anchors.values().map(|a| a.p_sum).sum::<f64>() / n;
                let norm: f64 = anchors.values().map(|a| libm::sqrt(a.norm_sq)).sum::<f64>() / n;
                (p, norm)
            }
        }
    };

    let mut zero_anchor_warned = Vec::new();
    for (&(row, layer), block) in &blocks {
        let (anchor_p, anchor_norm) = reference(layer, &mut warnings);
        let norm = libm::sqrt(block.norm_sq);
        let value = if anchor_p == 0.0 {
            if !zero_anchor_warned.contains(&layer) {
                zero_anchor_warned.push(layer);
                warnings.push(format!(
                    "layer {layer}: anchor block has zero gated salience; coefficients set to 0"
                ));
            }
            0.0
        } else if norm == 0.0 {
            warnings.push(format!(
                "layer {layer}: {row} has zero Instruct norm; coefficient set to 0"
            ));
            0.0
        } else {
            (block.p_sum / anchor_p) * (anchor_norm / norm)
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "salience of {row} in layer {layer}"
            )));
        }
        table.entries.push(SalienceEntry {
            row,
            layer,
            family: block.family,
            value,
        });
    }
    for &l in &layers {
        let layer = Layer::Index(l);
        table.entries.push(SalienceEntry {
            row: Row::Anchor,
            layer,
            family: MixerFamily::None,
            value: 1.0,
        });
        table.anchor_norms.push(AnchorNorm {
            layer,
            value: anchors.get(&layer).map_or(0.0, |a| libm::sqrt(a.norm_sq)),
        });
    }
    table.sort();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((table, warnings))
}

/// Divides mixer-family entries by κ(family); other entries are untouched.
pub fn arch_normalize(table: &SalienceTable, bound: &BoundSchema) -> Result<SalienceTable> {
    let mut out = table.clone();
    for e in &mut out.entries {
        if e.family == MixerFamily::None || e.row == Row::Anchor {
            continue;
        }
        let k = bound.kappa(e.family);
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::InvalidValue {
                what: "kappa",
                value: k,
            });
        }
        e.value /= k;
    }
    out.metadata.insert("arch_normalized".into(), "true".into());
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TopKOverlap {
    pub k: usize,
    pub overlap: usize,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SalienceComparison {
    pub pearson: f64,
    pub spearman: f64,
    pub top_k: Vec<TopKOverlap>,
}

/// Pearson correlation. When either side has zero variance the result is 1
/// for identical vectors and 0 otherwise.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() {
        return 1.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (sab / libm::sqrt(saa * sbb)).clamp(-1.0, 1.0)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = alloc::vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Indices of the `k` largest values; ties keep the lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

/// Correlations and top-k overlap over the flattened (kind, layer) grid.
pub fn compare_salience(
    a: &SalienceTable,
    b: &SalienceTable,
    ks: &[usize],
) -> Result<SalienceComparison> {
    let ga = a.grid();
    let gb = b.grid();
    if ga.len() != gb.len()
        || ga
            .iter()
            .zip(&gb)
            .any(|(x, y)| x.row != y.row || x.layer != y.layer)
    {
        return Err(Error::GridMismatch);
    }
    let va: Vec<f64> = ga.iter().map(|e| e.value).collect();
    let vb: Vec<f64> = gb.iter().map(|e| e.value).collect();
    let top_k = ks
        .iter()
        .map(|&k| {
            let ta = top_k(&va, k);
            let tb = top_k(&vb, k);
            TopKOverlap {
                k,
                overlap: ta.iter().filter(|i| tb.contains(i)).count(),
            }
        })
        .collect();
    Ok(SalienceComparison {
        pearson: pearson(&va, &vb),
        spearman: spearman(&va, &vb),
        top_k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DType;
    use crate::schema::ModelSchema;
    use crate::tensor::Tensor;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        let s = coordinate_scores(&[3.0], &[-4.0], &[0.0]).unwrap();
        assert_eq!((s.s_r[0].abs(), s.s_a[0].abs(), s.p[0]), (0.0, 0.0, 0.0));
        let s = coordinate_scores(&[-1.0], &[2.0], &[1.0]).unwrap();
        assert_eq!((s.s_r[0], s.s_a[0], s.p[0]), (1.0, -2.0, 0.0));
        let s = coordinate_scores(&[-1.0], &[-0.5], &[2.0]).unwrap();
        assert_eq!((s.s_r[0], s.s_a[0], s.p[0]), (2.0, 1.0, 1.0));
        assert!(coordinate_scores(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn gate_properties(v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..40)) {
            let gr: Vec<f64> = v.iter().map(|t| t.0).collect();
            let ga: Vec<f64> = v.iter().map(|t| t.1).collect();
            let d: Vec<f64> = v.iter().map(|t| t.2).collect();
            let s = coordinate_scores(&gr, &ga, &d).unwrap();
            for j in 0..d.len() {
                prop_assert!(s.p[j] >= 0.0);
                if s.p[j] > 0.0 {
                    prop_assert!(s.s_r[j] > 0.0 && s.s_a[j] > 0.0);
                }
                if (s.s_r[j] > 0.0) != (s.s_a[j] > 0.0) {
                    prop_assert_eq!(s.p[j], 0.0);
                }
            }
        }
    }

    /// One layer, dense FFN, plus a q projection.
    fn toy() -> (BoundSchema, TensorMap) {
        let schema = ModelSchema::micro_dense();
        let mut inst = TensorMap::new();
        let put = |inst: &mut TensorMap, n: &str, v: &[f64]| {
            inst.insert(
                n.into(),
                Tensor::from_f64(DType::F64, vec![v.len()], v).unwrap(),
            );
        };
        // Anchor Frobenius norm 2: gate [2,0], up [0,0], down [0,0].
        put(&mut inst, "layers.0.mlp.gate_proj.weight", &[2.0, 0.0]);
        put(&mut inst, "layers.0.mlp.up_proj.weight", &[0.0, 0.0]);
        put(&mut inst, "layers.0.mlp.down_proj.weight", &[0.0, 0.0]);
        // Component norm 1.
        put(&mut inst, "layers.0.attn.q_proj.weight", &[0.6, 0.8]);
        let bound = schema.bind(inst.keys().map(|s| s.as_str())).unwrap();
        (bound, inst)
    }

    fn p_only(p: &[f64]) -> CoordinateScores {
        CoordinateScores {
            s_r: p.to_vec(),
            s_a: p.to_vec(),
            p: p.to_vec(),
        }
    }

    #[test]
    fn two_block_toy() {
        let (bound, inst) = toy();
        let mut scores = BTreeMap::new();
        scores.insert("layers.0.mlp.gate_proj.weight".into(), p_only(&[1.0, 1.0]));
        scores.insert("layers.0.mlp.up_proj.weight".into(), p_only(&[1.0, 0.0]));
        scores.insert("layers.0.mlp.down_proj.weight".into(), p_only(&[0.0, 1.0]));
        scores.insert("layers.0.attn.q_proj.weight".into(), p_only(&[2.0, 0.0]));
        let (t, w) = aggregate(&scores, &bound, &inst).unwrap();
        let l0 = Layer::Index(0);
        // (2 / 4) · (2 / 1)
        assert!((t.coefficient(ComponentKind::QProj, l0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(t.get(Row::Anchor, l0), Some(1.0));
        // Anchor norm is 2 from gate alone.
        assert_eq!(
            t.anchor_norms,
            vec![AnchorNorm {
                layer: l0,
                value: 2.0
            }]
        );
        // up and down have zero Instruct norm.
        assert_eq!(t.coefficient(ComponentKind::DenseUp, l0), Some(0.0));
        assert_eq!(w.len(), 2);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn zero_scores_and_zero_anchor() {
        let (bound, inst) = toy();
        let mut scores = BTreeMap::new();
        scores.insert("layers.0.mlp.gate_proj.weight".into(), p_only(&[1.0, 0.0]));
        scores.insert("layers.0.attn.q_proj.weight".into(), p_only(&[0.0, 0.0]));
        let (t, _) = aggregate(&scores, &bound, &inst).unwrap();
        assert_eq!(
            t.coefficient(ComponentKind::QProj, Layer::Index(0)),
            Some(0.0)
        );

        let mut scores = BTreeMap::new();
        scores.insert("layers.0.attn.q_proj.weight".into(), p_only(&[5.0, 1.0]));
        let (t, w) = aggregate(&scores, &bound, &inst).unwrap();
        assert_eq!(
            t.coefficient(ComponentKind::QProj, Layer::Index(0)),
            Some(0.0)
        );
        assert!(w.iter().any(|m| m.contains("zero gated salience")));
        // Anchor row stays exactly one.
        assert_eq!(t.get(Row::Anchor, Layer::Index(0)), Some(1.0));
    }

    #[test]
    fn anchor_kind_rows_relative_to_union() {
        let (bound, mut inst) = toy();
        inst.insert(
            "layers.0.mlp.up_proj.weight".into(),
            Tensor::from_f64(DType::F64, vec![2], &[0.0, 1.0]).unwrap(),
        );
        inst.insert(
            "layers.0.mlp.down_proj.weight".into(),
            Tensor::from_f64(DType::F64, vec![2], &[1.0, 0.0]).unwrap(),
        );
        let mut scores = BTreeMap::new();
        for n in ["gate", "up", "down"] {
            scores.insert(format!("layers.0.mlp.{n}_proj.weight"), p_only(&[1.0, 0.0]));
        }
        let (t, _) = aggregate(&scores, &bound, &inst).unwrap();
        // Each anchor kind holds a third of the p mass; union norm sqrt(6).
        let want_gate = (1.0 / 3.0) * (libm::sqrt(6.0) / 2.0);
        let got = t
            .coefficient(ComponentKind::DenseGate, Layer::Index(0))
            .unwrap();
        assert!((got - want_gate).abs() < 1e-15);
    }

    #[test]
    fn unmatched_score_name() {
        let (bound, inst) = toy();
        let mut scores = BTreeMap::new();
        scores.insert("debug.tmp".into(), p_only(&[1.0]));
        assert!(matches!(
            aggregate(&scores, &bound, &inst),
            Err(Error::UnmatchedName(_))
        ));
    }

    #[test]
    fn arch_normalization_divides_mixer_rows() {
        let mut bound = toy().0;
        let mut t = SalienceTable::default();
        let l0 = Layer::Index(0);
        t.entries = vec![
            SalienceEntry {
                row: Row::Kind(ComponentKind::QProj),
                layer: l0,
                family: MixerFamily::LinearAttention,
                value: 0.9,
            },
            SalienceEntry {
                row: Row::Kind(ComponentKind::KProj),
                layer: l0,
                family: MixerFamily::FullAttention,
                value: 0.4,
            },
            SalienceEntry {
                row: Row::Kind(ComponentKind::DenseGate),
                layer: l0,
                family: MixerFamily::None,
                value: 0.7,
            },
            SalienceEntry {
                row: Row::Anchor,
                layer: l0,
                family: MixerFamily::None,
                value: 1.0,
            },
        ];
        t.sort();
        let same = arch_normalize(&t, &bound).unwrap();
        assert_eq!(same.entries, t.entries);
        bound.kappa.insert(MixerFamily::LinearAttention, 3.0);
        bound.kappa.insert(MixerFamily::FullAttention, 1.0);
        let n = arch_normalize(&t, &bound).unwrap();
        assert!((n.coefficient(ComponentKind::QProj, l0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(n.coefficient(ComponentKind::KProj, l0), Some(0.4));
        assert_eq!(n.coefficient(ComponentKind::DenseGate, l0), Some(0.7));
        bound.kappa.insert(MixerFamily::FullAttention, 0.0);
        assert!(arch_normalize(&t, &bound).is_err());
    }

    #[test]
    fn correlations_by_hand() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(
            average_ranks(&[10.0, 20.0, 10.0, 30.0]),
            vec![1.5, 3.0, 1.5, 4.0]
        );
        // Textbook: ranks [1,2,3,4,5] vs [2,1,4,3,5], d² sum 4 → 1 - 6·4/120 = 0.8.
        assert!(
            (spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]) - 0.8).abs() < 1e-15
        );
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 1.0]), 1.0);
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 2.0], 2), vec![1, 2]);
    }

    fn table(values: &[(ComponentKind, u32, f64)]) -> SalienceTable {
        let mut t = SalienceTable::default();
        for &(k, l, v) in values {
            t.entries.push(SalienceEntry {
                row: Row::Kind(k),
                layer: Layer::Index(l),
                family: MixerFamily::None,
                value: v,
            });
        }
        t.sort();
        t
    }

    #[test]
    fn compare_tables() {
        let a = table(&[
            (ComponentKind::QProj, 0, 0.5),
            (ComponentKind::QProj, 1, 0.2),
            (ComponentKind::DenseGate, 0, 0.9),
        ]);
        let c = compare_salience(&a, &a, &[1, 2, 3]).unwrap();
        assert_eq!((c.pearson, c.spearman), (1.0, 1.0));
        assert!(c.top_k.iter().all(|o| o.overlap == o.k));
        let b = table(&[(ComponentKind::QProj, 0, 0.5)]);
        assert_eq!(
            compare_salience(&a, &b, &[1]).unwrap_err(),
            Error::GridMismatch
        );
    }
}
