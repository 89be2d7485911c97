//! Component taxonomy: which layer, component kind, mixer family and
//! protected activation space each tensor belongs to.
//!
//! A [`ModelSchema`] is a list of name rules. Patterns are literal text with
//! at most one `{layer}` and one `{expert}` numeric capture, e.g.
//! `layers.{layer}.moe.experts.{expert}.up_proj.weight`. Binding a schema to
//! a set of tensor names yields a [`BoundSchema`] where every name resolves to
//! exactly one rule.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ComponentKind {
    QProj,
    KProj,
    VProj,
    OProj,
    ExpertGate,
    ExpertUp,
    ExpertDown,
    DenseGate,
    DenseUp,
    DenseDown,
    Router,
    Norm,
    LmHead,
    Embedding,
    MixerInner,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 15] = [
        ComponentKind::QProj,
        ComponentKind::KProj,
        ComponentKind::VProj,
        ComponentKind::OProj,
        ComponentKind::ExpertGate,
        ComponentKind::ExpertUp,
        ComponentKind::ExpertDown,
        ComponentKind::DenseGate,
        ComponentKind::DenseUp,
        ComponentKind::DenseDown,
        ComponentKind::Router,
        ComponentKind::Norm,
        ComponentKind::LmHead,
        ComponentKind::Embedding,
        ComponentKind::MixerInner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::QProj => "q_proj",
            ComponentKind::KProj => "k_proj",
            ComponentKind::VProj => "v_proj",
            ComponentKind::OProj => "o_proj",
            ComponentKind::ExpertGate => "expert_gate",
            ComponentKind::ExpertUp => "expert_up",
            ComponentKind::ExpertDown => "expert_down",
            ComponentKind::DenseGate => "dense_gate",
            ComponentKind::DenseUp => "dense_up",
            ComponentKind::DenseDown => "dense_down",
            ComponentKind::Router => "router",
            ComponentKind::Norm => "norm",
            ComponentKind::LmHead => "lm_head",
            ComponentKind::Embedding => "embedding",
            ComponentKind::MixerInner => "mixer_inner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ComponentKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_expert(self) -> bool {
        matches!(
            self,
            ComponentKind::ExpertGate | ComponentKind::ExpertUp | ComponentKind::ExpertDown
        )
    }

    /// Gate/up/down projections, dense or expert: the kinds an anchor may use.
    pub fn is_ffn(self) -> bool {
        self.is_expert()
            || matches!(
                self,
                ComponentKind::DenseGate | ComponentKind::DenseUp | ComponentKind::DenseDown
            )
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Transformer layer index, or `Global` for embeddings, final norm and head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Layer {
    Index(u32),
    Global,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Index(i) => write!(f, "{i}"),
            Layer::Global => f.write_str("global"),
        }
    }
}

impl Layer {
    pub fn parse(s: &str) -> Option<Layer> {
        if s == "global" {
            Some(Layer::Global)
        } else {
            s.parse().ok().map(Layer::Index)
        }
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Layer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        match self {
            Layer::Index(i) => s.serialize_u32(*i),
            Layer::Global => s.serialize_str("global"),
        }
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Layer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = Layer;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a layer index or \"global\"")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> core::result::Result<Layer, E> {
                u32::try_from(v)
                    .map(Layer::Index)
                    .map_err(|_| E::custom("layer index out of range"))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> core::result::Result<Layer, E> {
                u32::try_from(v)
                    .map(Layer::Index)
                    .map_err(|_| E::custom("layer index out of range"))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> core::result::Result<Layer, E> {
                Layer::parse(v).ok_or_else(|| E::custom("expected a layer index or \"global\""))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MixerFamily {
    FullAttention,
    LinearAttention,
    #[default]
    None,
}

impl MixerFamily {
    pub const MIXERS: [MixerFamily; 2] = [MixerFamily::FullAttention, MixerFamily::LinearAttention];

    pub fn name(self) -> &'static str {
        match self {
            MixerFamily::FullAttention => "full_attention",
            MixerFamily::LinearAttention => "linear_attention",
            MixerFamily::None => "none",
        }
    }
}

impl fmt::Display for MixerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which axis of a stored 2-D weight multiplies the protected input activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum InputSide {
    /// `[d_out, d_in]`, the usual `y = W x` layout.
    #[default]
    Right,
    /// `[d_in, d_out]`.
    Left,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComponentId {
    pub layer: Layer,
    pub kind: ComponentKind,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub expert: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Rule {
    pub pattern: String,
    pub kind: ComponentKind,
    #[cfg_attr(feature = "serde", serde(default))]
    pub family: MixerFamily,
    /// Activation-space template; `{layer}`/`{expert}` are substituted.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub space: Option<String>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub input_side: InputSide,
}

impl Rule {
    pub fn new(pattern: &str, kind: ComponentKind) -> Self {
        Rule {
            pattern: pattern.to_string(),
            kind,
            family: MixerFamily::None,
            space: None,
            input_side: InputSide::Right,
        }
    }

    pub fn family(mut self, family: MixerFamily) -> Self {
        self.family = family;
        self
    }

    pub fn space(mut self, template: &str) -> Self {
        self.space = Some(template.to_string());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSchema {
    pub rules: Vec<Rule>,
    /// Component kinds whose union forms the per-layer anchor block.
    pub anchor: Vec<ComponentKind>,
    /// Expected residual occupation; checked against the bound names when set.
    #[cfg_attr(feature = "serde", serde(default))]
    pub occupation: BTreeMap<MixerFamily, u32>,
    /// Explicit per-family κ. Families left out default to 1.
    #[cfg_attr(feature = "serde", serde(default))]
    pub kappa: BTreeMap<MixerFamily, f64>,
    /// When `kappa` is empty, derive κ from occupation relative to this family.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub kappa_reference: Option<MixerFamily>,
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Literal(String),
    Layer,
    Expert,
}

#[derive(Clone, Debug)]
struct Pattern {
    segments: Vec<Segment>,
}

impl Pattern {
    fn parse(pattern: &str) -> Result<Pattern> {
        let invalid = |reason: &str| Error::InvalidPattern {
            pattern: pattern.to_string(),
            reason: reason.to_string(),
        };
        let mut segments = Vec::new();
        let mut rest = pattern;
        while !rest.is_empty() {
            match rest.find('{') {
                Some(0) => {
                    let close = rest.find('}').ok_or_else(|| invalid("unclosed '{'"))?;
                    let seg = match &rest[1..close] {
                        "layer" => Segment::Layer,
                        "expert" => Segment::Expert,
                        _ => return Err(invalid("only {layer} and {expert} captures are allowed")),
                    };
                    if segments.contains(&seg) {
                        return Err(invalid("capture used twice"));
                    }
                    if matches!(segments.last(), Some(Segment::Layer | Segment::Expert)) {
                        return Err(invalid("adjacent captures"));
                    }
                    segments.push(seg);
                    rest = &rest[close + 1..];
                }
                found => {
                    let end = found.unwrap_or(rest.len());
                    let lit = &rest[..end];
                    if lit.contains('}') {
                        return Err(invalid("stray '}'"));
                    }
                    if matches!(segments.last(), Some(Segment::Layer | Segment::Expert))
                        && lit.starts_with(|c: char| c.is_ascii_digit())
                    {
                        return Err(invalid("a capture may not be followed by a digit"));
                    }
                    segments.push(Segment::Literal(lit.to_string()));
                    rest = &rest[end..];
                }
            }
        }
        Ok(Pattern { segments })
    }

    fn has(&self, seg: &Segment) -> bool {
        self.segments.contains(seg)
    }

    /// Returns `(layer, expert)` captures on a full match.
    fn matches(&self, name: &str) -> Option<(Option<u32>, Option<u32>)> {
        let (mut layer, mut expert) = (None, None);
        let mut pos = 0;
        for seg in &self.segments {
            match seg {
                Segment::Literal(lit) => {
                    if !name[pos..].starts_with(lit.as_str()) {
                        return None;
                    }
                    pos += lit.len();
                }
                Segment::Layer | Segment::Expert => {
                    let digits = name[pos..].bytes().take_while(u8::is_ascii_digit).count();
                    if digits == 0 {
                        return None;
                    }
                    let value: u32 = name[pos..pos + digits].parse().ok()?;
                    pos += digits;
                    if *seg == Segment::Layer {
                        layer = Some(value);
                    } else {
                        expert = Some(value);
                    }
                }
            }
        }
        (pos == name.len()).then_some((layer, expert))
    }
}

fn fill_template(template: &str, layer: Option<u32>, expert: Option<u32>) -> String {
    let mut s = template.to_string();
    if let Some(l) = layer {
        s = s.replace("{layer}", &format!("{l}"));
    }
    if let Some(e) = expert {
        s = s.replace("{expert}", &format!("{e}"));
    }
    s
}

/// Resolved taxonomy for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Binding {
    pub component: ComponentId,
    pub family: MixerFamily,
    pub space: Option<String>,
    pub input_side: InputSide,
}

/// A schema resolved against a concrete set of tensor names.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundSchema {
    pub bindings: BTreeMap<String, Binding>,
    pub anchor: Vec<ComponentKind>,
    pub occupation: BTreeMap<MixerFamily, u32>,
    pub kappa: BTreeMap<MixerFamily, f64>,
}

impl ModelSchema {
    /// Checks rule patterns and templates without binding.
    pub fn validate(&self) -> Result<()> {
        for rule in &self.rules {
            let p = Pattern::parse(&rule.pattern)?;
            let invalid = |reason: &str| Error::InvalidPattern {
                pattern: rule.pattern.clone(),
                reason: reason.to_string(),
            };
            if p.has(&Segment::Expert) != rule.kind.is_expert() {
                return Err(invalid(
                    "{expert} capture is required exactly for expert kinds",
                ));
            }
            if let Some(space) = &rule.space {
                if space.contains("{layer}") && !p.has(&Segment::Layer) {
                    return Err(invalid(
                        "space template uses {layer} but the pattern has none",
                    ));
                }
                if space.contains("{expert}") && !p.has(&Segment::Expert) {
                    return Err(invalid(
                        "space template uses {expert} but the pattern has none",
                    ));
                }
            }
        }
        if self.anchor.is_empty() || self.anchor.iter().any(|k| !k.is_ffn()) {
            return Err(Error::InvalidConfig(
                "anchor must be a non-empty set of gate/up/down kinds".into(),
            ));
        }
        for (&family, &k) in &self.kappa {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidValue {
                    what: family_kappa_label(family),
                    value: k,
                });
            }
        }
        Ok(())
    }

    pub fn bind<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<BoundSchema> {
        self.validate()?;
        let patterns = self
            .rules
            .iter()
            .map(|r| Pattern::parse(&r.pattern))
            .collect::<Result<Vec<_>>>()?;

        let mut bindings = BTreeMap::new();
        for name in names {
            let mut hits = patterns
                .iter()
                .zip(&self.rules)
                .filter_map(|(p, r)| p.matches(name).map(|caps| (r, caps)));
            let (rule, (layer, expert)) = hits
                .next()
                .ok_or_else(|| Error::UnmatchedName(name.to_string()))?;
            let others: Vec<String> = hits.map(|(r, _)| r.pattern.clone()).collect();
            if !others.is_empty() {
                let mut all = alloc::vec![rule.pattern.clone()];
                all.extend(others);
                return Err(Error::AmbiguousName {
                    name: name.to_string(),
                    patterns: all,
                });
            }
            let binding = Binding {
                component: ComponentId {
                    layer: layer.map_or(Layer::Global, Layer::Index),
                    kind: rule.kind,
                    expert,
                },
                family: rule.family,
                space: rule
                    .space
                    .as_deref()
                    .map(|t| fill_template(t, layer, expert)),
                input_side: rule.input_side,
            };
            bindings.insert(name.to_string(), binding);
        }

        let mut bound = BoundSchema {
            bindings,
            anchor: self.anchor.clone(),
            occupation: BTreeMap::new(),
            kappa: BTreeMap::new(),
        };
        for layer in bound.layers() {
            if bound.anchor_names(Layer::Index(layer)).is_empty() {
                return Err(Error::MissingAnchor(layer));
            }
        }
        bound.occupation = occupation_counts(&bound);
        if !self.occupation.is_empty() {
            for (family, &declared) in &self.occupation {
                let found = bound.occupation.get(family).copied().unwrap_or(0);
                if found != declared {
                    return Err(Error::InvalidConfig(format!(
                        "schema declares occupation {declared} for {family}, names give {found}"
                    )));
                }
            }
        }
        bound.kappa = if !self.kappa.is_empty() {
            let mut k = self.kappa.clone();
            for f in MixerFamily::MIXERS {
                k.entry(f).or_insert(1.0);
            }
            k
        } else {
            match self.kappa_reference {
                Some(reference) if bound.occupation.get(&reference).copied().unwrap_or(0) > 0 => {
                    kappa_from_occupation(&bound.occupation, reference)?
                }
                _ => MixerFamily::MIXERS.into_iter().map(|f| (f, 1.0)).collect(),
            }
        };
        Ok(bound)
    }

    pub fn bind_tensors(&self, tensors: &crate::TensorMap) -> Result<BoundSchema> {
        self.bind(tensors.keys().map(String::as_str))
    }

    /// Rules shared by the micro presets.
    pub(crate) fn micro_common(attention: &[MixerFamily], ffn_moe: bool) -> ModelSchema {
        use ComponentKind as K;
        let mut rules = alloc::vec![
            Rule::new("embed.weight", K::Embedding),
            Rule::new("final_norm.weight", K::Norm),
            Rule::new("lm_head.weight", K::LmHead).space("final_in"),
            Rule::new("layers.{layer}.attn_norm.weight", K::Norm),
            Rule::new("layers.{layer}.ffn_norm.weight", K::Norm),
        ];
        for &family in attention {
            let prefix = match family {
                MixerFamily::LinearAttention => "linear_attn",
                _ => "attn",
            };
            for (proj, kind) in [("q", K::QProj), ("k", K::KProj), ("v", K::VProj)] {
                rules.push(
                    Rule::new(
                        &format!("layers.{{layer}}.{prefix}.{proj}_proj.weight"),
                        kind,
                    )
                    .family(family)
                    .space("layers.{layer}.attn_in"),
                );
            }
            rules.push(
                Rule::new(
                    &format!("layers.{{layer}}.{prefix}.o_proj.weight"),
                    K::OProj,
                )
                .family(family)
                .space("layers.{layer}.mixer_out"),
            );
        }
        if ffn_moe {
            rules.push(
                Rule::new("layers.{layer}.moe.router.weight", K::Router)
                    .space("layers.{layer}.ffn_in"),
            );
            for (proj, kind) in [("gate", K::ExpertGate), ("up", K::ExpertUp)] {
                rules.push(
                    Rule::new(
                        &format!("layers.{{layer}}.moe.experts.{{expert}}.{proj}_proj.weight"),
                        kind,
                    )
                    .space("layers.{layer}.ffn_in"),
                );
            }
            rules.push(
                Rule::new(
                    "layers.{layer}.moe.experts.{expert}.down_proj.weight",
                    K::ExpertDown,
                )
                .space("layers.{layer}.experts.{expert}.hidden"),
            );
        } else {
            for (proj, kind) in [("gate", K::DenseGate), ("up", K::DenseUp)] {
                rules.push(
                    Rule::new(&format!("layers.{{layer}}.mlp.{proj}_proj.weight"), kind)
                        .space("layers.{layer}.ffn_in"),
                );
            }
            rules.push(
                Rule::new("layers.{layer}.mlp.down_proj.weight", K::DenseDown)
                    .space("layers.{layer}.mlp_hidden"),
            );
        }
        ModelSchema {
            rules,
            anchor: alloc::vec![
                K::DenseGate,
                K::DenseUp,
                K::DenseDown,
                K::ExpertGate,
                K::ExpertUp,
                K::ExpertDown,
            ],
            occupation: BTreeMap::new(),
            kappa: BTreeMap::new(),
            kappa_reference: Some(MixerFamily::FullAttention),
        }
    }

    pub fn micro_dense() -> ModelSchema {
        Self::micro_common(&[MixerFamily::FullAttention], false)
    }

    pub fn micro_moe() -> ModelSchema {
        Self::micro_common(&[MixerFamily::FullAttention], true)
    }

    pub fn micro_hybrid() -> ModelSchema {
        Self::micro_common(
            &[MixerFamily::FullAttention, MixerFamily::LinearAttention],
            true,
        )
    }

    pub fn preset(name: &str) -> Option<ModelSchema> {
        match name {
            "micro-dense" => Some(Self::micro_dense()),
            "micro-moe" => Some(Self::micro_moe()),
            "micro-hybrid" => Some(Self::micro_hybrid()),
            _ => None,
        }
    }
}

fn family_kappa_label(family: MixerFamily) -> &'static str {
    match family {
        MixerFamily::FullAttention => "kappa(full_attention)",
        MixerFamily::LinearAttention => "kappa(linear_attention)",
        MixerFamily::None => "kappa(none)",
    }
}

impl BoundSchema {
    pub fn get(&self, name: &str) -> Option<&Binding> {
        self.bindings.get(name)
    }

    /// Transformer layer indices present in the bound names.
    pub fn layers(&self) -> BTreeSet<u32> {
        self.bindings
            .values()
            .filter_map(|b| match b.component.layer {
                Layer::Index(i) => Some(i),
                Layer::Global => None,
            })
            .collect()
    }

    /// Tensor names forming the anchor block `b` of `layer`, in name order.
    pub fn anchor_names(&self, layer: Layer) -> Vec<&str> {
        self.bindings
            .iter()
            .filter(|(_, b)| b.component.layer == layer && self.anchor.contains(&b.component.kind))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Mixer family of a layer, from its attention-type tensors.
    pub fn layer_family(&self, layer: u32) -> MixerFamily {
        self.bindings
            .values()
            .find(|b| b.component.layer == Layer::Index(layer) && b.family != MixerFamily::None)
            .map_or(MixerFamily::None, |b| b.family)
    }

    pub fn kappa(&self, family: MixerFamily) -> f64 {
        match family {
            MixerFamily::None => 1.0,
            f => self.kappa.get(&f).copied().unwrap_or(1.0),
        }
    }

    /// Distinct activation spaces referenced by the bound tensors.
    pub fn spaces(&self) -> BTreeSet<String> {
        self.bindings
            .values()
            .filter_map(|b| b.space.clone())
            .collect()
    }
}

/// μ(f): number of layers whose token mixer has family `f`.
pub fn occupation_counts(bound: &BoundSchema) -> BTreeMap<MixerFamily, u32> {
    let mut seen: BTreeSet<(MixerFamily, u32)> = BTreeSet::new();
    for b in bound.bindings.values() {
        if let (Layer::Index(l), f) = (b.component.layer, b.family) {
            if f != MixerFamily::None {
                seen.insert((f, l));
            }
        }
    }
    let mut counts: BTreeMap<MixerFamily, u32> =
        MixerFamily::MIXERS.into_iter().map(|f| (f, 0)).collect();
    for (f, _) in seen {
        *counts.entry(f).or_insert(0) += 1;
    }
    counts
}

/// κ(f) = μ(f) / μ(reference).
pub fn kappa_from_occupation(
    occupation: &BTreeMap<MixerFamily, u32>,
    reference: MixerFamily,
) -> Result<BTreeMap<MixerFamily, f64>> {
    let ones: BTreeMap<MixerFamily, f64> = occupation.keys().map(|&f| (f, 1.0)).collect();
    kappa_measured(occupation, &ones, reference)
}

/// κ_meas(f) = μ(f)·a(f) / (μ(ref)·a(ref)) with measured perturbation scales `a`.
///
/// Families with zero occupation get κ = 1 (they carry no tensors to scale).
pub fn kappa_measured(
    occupation: &BTreeMap<MixerFamily, u32>,
    scale: &BTreeMap<MixerFamily, f64>,
    reference: MixerFamily,
) -> Result<BTreeMap<MixerFamily, f64>> {
    let mu_ref = occupation.get(&reference).copied().unwrap_or(0);
    if mu_ref == 0 {
        return Err(Error::ZeroReferenceOccupation(reference.name()));
    }
    let scale_of = |f: MixerFamily| -> Result<f64> {
        let a = scale.get(&f).copied().unwrap_or(1.0);
        if a.is_finite() && a > 0.0 {
            Ok(a)
        } else {
            Err(Error::InvalidValue {
                what: "perturbation scale",
                value: a,
            })
        }
    };
    let denom = mu_ref as f64 * scale_of(reference)?;
    let mut out = BTreeMap::new();
    for (&f, &mu) in occupation {
        let k = if f == reference {
            1.0
        } else if mu == 0 {
            1.0
        } else {
            mu as f64 * scale_of(f)? / denom
        };
        out.insert(f, k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn stack_names(families: &[MixerFamily], experts: u32) -> Vec<String> {
        let mut names = vec![
            "embed.weight".to_string(),
            "final_norm.weight".to_string(),
            "lm_head.weight".to_string(),
        ];
        for (l, f) in families.iter().enumerate() {
            let prefix = if *f == MixerFamily::LinearAttention {
                "linear_attn"
            } else {
                "attn"
            };
            for p in ["q", "k", "v", "o"] {
                names.push(format!("layers.{l}.{prefix}.{p}_proj.weight"));
            }
            names.push(format!("layers.{l}.attn_norm.weight"));
            names.push(format!("layers.{l}.ffn_norm.weight"));
            names.push(format!("layers.{l}.moe.router.weight"));
            for e in 0..experts {
                for p in ["gate", "up", "down"] {
                    names.push(format!("layers.{l}.moe.experts.{e}.{p}_proj.weight"));
                }
            }
        }
        names
    }

    fn bind_hybrid(families: &[MixerFamily]) -> BoundSchema {
        let names = stack_names(families, 2);
        ModelSchema::micro_hybrid()
            .bind(names.iter().map(String::as_str))
            .unwrap()
    }

    #[test]
    fn pattern_captures() {
        let p = Pattern::parse("layers.{layer}.moe.experts.{expert}.up_proj.weight").unwrap();
        assert_eq!(
            p.matches("layers.12.moe.experts.3.up_proj.weight"),
            Some((Some(12), Some(3)))
        );
        assert_eq!(p.matches("layers.12.moe.experts.3.up_proj.weight2"), None);
        assert_eq!(p.matches("layers.x.moe.experts.3.up_proj.weight"), None);
        assert!(Pattern::parse("a.{layer}{expert}").is_err());
        assert!(Pattern::parse("a.{layer}.{layer}").is_err());
        assert!(Pattern::parse("a.{head}").is_err());
        assert!(Pattern::parse("a.{layer}0").is_err());
        assert!(Pattern::parse("a.{layer").is_err());
    }

    #[test]
    fn unmatched_name_is_an_error() {
        let mut names = stack_names(&[MixerFamily::FullAttention], 2);
        names.push("debug.tmp".into());
        let err = ModelSchema::micro_moe()
            .bind(names.iter().map(String::as_str))
            .unwrap_err();
        assert_eq!(err, Error::UnmatchedName("debug.tmp".into()));
    }

    #[test]
    fn overlapping_rules_are_ambiguous() {
        let mut schema = ModelSchema::micro_dense();
        schema.rules.insert(
            0,
            Rule::new("layers.{layer}.attn.q_proj.weight", ComponentKind::QProj),
        );
        let names = ["layers.0.attn.q_proj.weight", "layers.0.mlp.up_proj.weight"];
        // Oracle: count matching rules per name directly.
        let count = schema
            .rules
            .iter()
            .filter(|r| {
                Pattern::parse(&r.pattern)
                    .unwrap()
                    .matches(names[0])
                    .is_some()
            })
            .count();
        assert_eq!(count, 2);
        assert!(matches!(
            schema.bind(names),
            Err(Error::AmbiguousName { .. })
        ));
    }

    #[test]
    fn expert_capture_must_match_kind() {
        let mut schema = ModelSchema::micro_dense();
        schema
            .rules
            .push(Rule::new("x.{layer}.{expert}.w", ComponentKind::DenseUp));
        assert!(schema.validate().is_err());
    }

    #[test]
    fn layers_need_an_anchor() {
        let names = ["layers.0.attn.q_proj.weight"];
        assert_eq!(
            ModelSchema::micro_dense().bind(names),
            Err(Error::MissingAnchor(0))
        );
    }

    #[test]
    fn bindings_carry_space_and_family() {
        let bound = bind_hybrid(&[MixerFamily::LinearAttention, MixerFamily::FullAttention]);
        let b = bound.get("layers.0.linear_attn.k_proj.weight").unwrap();
        assert_eq!(b.family, MixerFamily::LinearAttention);
        assert_eq!(b.space.as_deref(), Some("layers.0.attn_in"));
        let b = bound
            .get("layers.1.moe.experts.1.down_proj.weight")
            .unwrap();
        assert_eq!(b.component.expert, Some(1));
        assert_eq!(b.space.as_deref(), Some("layers.1.experts.1.hidden"));
        assert_eq!(
            bound.get("embed.weight").unwrap().component.layer,
            Layer::Global
        );
        assert_eq!(bound.layer_family(0), MixerFamily::LinearAttention);
    }

    #[test]
    fn anchor_is_union_of_ffn_projections() {
        let bound = bind_hybrid(&[MixerFamily::FullAttention; 2]);
        for l in 0..2u32 {
            // Enumeration oracle straight from the naming convention.
            let mut expected: Vec<String> = Vec::new();
            for e in 0..2 {
                for p in ["gate", "up", "down"] {
                    expected.push(format!("layers.{l}.moe.experts.{e}.{p}_proj.weight"));
                }
            }
            expected.sort();
            let got: Vec<String> = bound
                .anchor_names(Layer::Index(l))
                .into_iter()
                .map(String::from)
                .collect();
            assert_eq!(got, expected);
            assert!(!got.iter().any(|n| n.contains("router")));
        }
    }

    #[test]
    fn occupation_48_layer_hybrid() {
        let families: Vec<MixerFamily> = (0..48)
            .map(|l| {
                if l % 4 == 3 {
                    MixerFamily::FullAttention
                } else {
                    MixerFamily::LinearAttention
                }
            })
            .collect();
        let bound = bind_hybrid(&families);
        let occ = occupation_counts(&bound);
        assert_eq!(occ[&MixerFamily::LinearAttention], 36);
        assert_eq!(occ[&MixerFamily::FullAttention], 12);
        let kappa = kappa_from_occupation(&occ, MixerFamily::FullAttention).unwrap();
        assert_eq!(kappa[&MixerFamily::LinearAttention], 3.0);
        assert_eq!(kappa[&MixerFamily::FullAttention], 1.0);
        assert_eq!(bound.kappa(MixerFamily::LinearAttention), 3.0);
    }

    #[test]
    fn occupation_small_stacks() {
        let bound = bind_hybrid(&[MixerFamily::FullAttention; 4]);
        let occ = occupation_counts(&bound);
        assert_eq!(occ[&MixerFamily::FullAttention], 4);
        assert_eq!(occ[&MixerFamily::LinearAttention], 0);
        let kappa = kappa_from_occupation(&occ, MixerFamily::FullAttention).unwrap();
        assert!(kappa.values().all(|&k| k == 1.0));

        let alternating: Vec<MixerFamily> = (0..6)
            .map(|l| {
                if l % 2 == 0 {
                    MixerFamily::FullAttention
                } else {
                    MixerFamily::LinearAttention
                }
            })
            .collect();
        let occ = occupation_counts(&bind_hybrid(&alternating));
        assert_eq!(occ[&MixerFamily::FullAttention], 3);
        assert_eq!(occ[&MixerFamily::LinearAttention], 3);
    }

    #[test]
    fn kappa_ratios() {
        let occ: BTreeMap<_, _> = [
            (MixerFamily::LinearAttention, 6),
            (MixerFamily::FullAttention, 3),
        ]
        .into();
        let k = kappa_from_occupation(&occ, MixerFamily::FullAttention).unwrap();
        assert_eq!(k[&MixerFamily::LinearAttention], 2.0);

        let occ: BTreeMap<_, _> = [
            (MixerFamily::LinearAttention, 36),
            (MixerFamily::FullAttention, 12),
        ]
        .into();
        let scale: BTreeMap<_, _> = [
            (MixerFamily::LinearAttention, 0.5),
            (MixerFamily::FullAttention, 1.0),
        ]
        .into();
        let k = kappa_measured(&occ, &scale, MixerFamily::FullAttention).unwrap();
        assert_eq!(k[&MixerFamily::LinearAttention], 1.5);
        assert_eq!(k[&MixerFamily::FullAttention], 1.0);

        let equal: BTreeMap<_, _> = [
            (MixerFamily::LinearAttention, 0.7),
            (MixerFamily::FullAttention, 0.7),
        ]
        .into();
        let a = kappa_measured(&occ, &equal, MixerFamily::FullAttention).unwrap();
        let b = kappa_from_occupation(&occ, MixerFamily::FullAttention).unwrap();
        for (f, v) in &b {
            assert!((a[f] - v).abs() < 1e-12);
        }

        let bad: BTreeMap<_, _> = [(MixerFamily::LinearAttention, 0.0)].into();
        assert!(kappa_measured(&occ, &bad, MixerFamily::FullAttention).is_err());

        let empty: BTreeMap<_, _> = [(MixerFamily::LinearAttention, 4)].into();
        assert_eq!(
            kappa_from_occupation(&empty, MixerFamily::FullAttention),
            Err(Error::ZeroReferenceOccupation("full_attention"))
        );
    }

    #[test]
    fn declared_occupation_is_checked() {
        let mut schema = ModelSchema::micro_hybrid();
        schema.occupation.insert(MixerFamily::FullAttention, 3);
        let names = stack_names(&[MixerFamily::FullAttention; 2], 1);
        assert!(matches!(
            schema.bind(names.iter().map(String::as_str)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn binding_is_deterministic() {
        let names = stack_names(
            &[MixerFamily::LinearAttention, MixerFamily::FullAttention],
            3,
        );
        let mut reversed = names.clone();
        reversed.reverse();
        let a = ModelSchema::micro_hybrid()
            .bind(names.iter().map(String::as_str))
            .unwrap();
        let b = ModelSchema::micro_hybrid()
            .bind(reversed.iter().map(String::as_str))
            .unwrap();
        assert_eq!(a, b);
    }
}
