//! Calibration examples, format-mask support and its token neighbourhood.
//!
//! Positions are 0-based throughout.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Which calibration set an example belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum SetTag {
    /// Reasoning transfer (masked loss).
    R,
    /// Agent-behaviour preservation (masked loss).
    A,
    /// Format traces (activation collection only).
    F,
}

/// Token sequence `z = [x; y]` with a 0/1 mask.
///
/// For `R`/`A`, `mask[s] = 1` makes token `s` a prediction target scored from
/// the logits at `s - 1`. For `F`, `mask[s] = 1` marks a format-critical
/// position whose activations are protected.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationExample {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
    #[cfg_attr(feature = "serde", serde(rename = "set"))]
    pub set: SetTag,
}

impl CalibrationExample {
    pub fn new(tokens: Vec<u32>, mask: Vec<u8>, set: SetTag) -> Self {
        CalibrationExample { tokens, mask, set }
    }

    pub fn validate(&self) -> core::result::Result<(), String> {
        if self.mask.len() != self.tokens.len() {
            return Err(format!(
                "mask length {} differs from token length {}",
                self.mask.len(),
                self.tokens.len()
            ));
        }
        if let Some(v) = self.mask.iter().find(|&&m| m > 1) {
            return Err(format!("mask value {v} is not 0 or 1"));
        }
        if self.set != SetTag::F {
            if self.masked_count() == 0 {
                return Err("loss mask selects no tokens".into());
            }
            if self.mask.first() == Some(&1) {
                return Err("position 0 has no context and cannot be a loss target".into());
            }
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

/// Validates a whole set, naming the first offending example.
pub fn validate_all(examples: &[CalibrationExample]) -> Result<()> {
    for (index, ex) in examples.iter().enumerate() {
        ex.validate()
            .map_err(|reason| Error::InvalidExample { index, reason })?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SetCounts {
    pub r: usize,
    pub a: usize,
    pub f: usize,
}

pub fn count_sets(examples: &[CalibrationExample]) -> SetCounts {
    let mut c = SetCounts::default();
    for ex in examples {
        match ex.set {
            SetTag::R => c.r += 1,
            SetTag::A => c.a += 1,
            SetTag::F => c.f += 1,
        }
    }
    c
}

/// Masked format positions `(example, position)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FormatSupport {
    pub positions: BTreeSet<(usize, usize)>,
}

/// Support positions widened by a symmetric window of radius `rho`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Neighborhood {
    pub positions: BTreeSet<(usize, usize)>,
    pub rho: usize,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions of one example, ascending.
    pub fn positions_of(&self, example: usize) -> impl Iterator<Item = usize> + '_ {
        self.positions
            .range((example, 0)..(example + 1, 0))
            .map(|&(_, s)| s)
    }
}

pub fn format_support(examples: &[CalibrationExample]) -> FormatSupport {
    let positions = examples
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            ex.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 1)
                .map(move |(s, _)| (i, s))
        })
        .collect();
    FormatSupport { positions }
}

/// Union of windows `[s - rho, s + rho]` clipped to `[0, len)`.
pub fn expand_neighborhood(support: &FormatSupport, rho: usize, lengths: &[usize]) -> Neighborhood {
    let mut positions = BTreeSet::new();
    for &(i, s) in &support.positions {
        let len = lengths.get(i).copied().unwrap_or(0);
        if len == 0 {
            continue;
        }
        let lo = s.saturating_sub(rho);
        let hi = s.saturating_add(rho).min(len - 1);
        for t in lo..=hi {
            positions.insert((i, t));
        }
    }
    Neighborhood { positions, rho }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn f(mask: Vec<u8>) -> CalibrationExample {
        CalibrationExample::new(vec![1; mask.len()], mask, SetTag::F)
    }

    #[test]
    fn validation_errors() {
        let ex = CalibrationExample::new(vec![1, 2], vec![0, 1, 1], SetTag::R);
        assert!(ex.validate().unwrap_err().contains("length"));
        let ex = CalibrationExample::new(vec![1, 2], vec![0, 2], SetTag::A);
        assert!(ex.validate().is_err());
        let ex = CalibrationExample::new(vec![1, 2, 3], vec![0, 0, 0], SetTag::R);
        assert!(ex.validate().unwrap_err().contains("no tokens"));
        let ex = CalibrationExample::new(vec![1, 2, 3], vec![1, 0, 1], SetTag::R);
        assert!(ex.validate().is_err());
        // Format traces may have an empty mask.
        assert!(f(vec![0, 0]).validate().is_ok());
        let err = validate_all(&[
            f(vec![0]),
            CalibrationExample::new(vec![1], vec![0], SetTag::A),
        ]);
        assert!(matches!(err, Err(Error::InvalidExample { index: 1, .. })));
    }

    #[test]
    fn support_examples() {
        assert!(format_support(&[f(vec![0, 0, 0])]).positions.is_empty());
        let s = format_support(&[f(vec![0, 1, 0, 1])]);
        assert_eq!(s.positions, [(0, 1), (0, 3)].into());
        let s = format_support(&[f(vec![1, 0]), f(vec![0, 1])]);
        assert_eq!(s.positions, [(0, 0), (1, 1)].into());
    }

    #[test]
    fn neighborhood_examples() {
        let support = FormatSupport {
            positions: [(0, 2)].into(),
        };
        assert_eq!(
            expand_neighborhood(&support, 0, &[4]).positions,
            support.positions
        );
        let n = expand_neighborhood(&support, 2, &[4]);
        assert_eq!(n.positions, [(0, 0), (0, 1), (0, 2), (0, 3)].into());

        let adjacent = FormatSupport {
            positions: [(0, 2), (0, 3)].into(),
        };
        let n = expand_neighborhood(&adjacent, 1, &[10]);
        assert_eq!(n.positions, [(0, 1), (0, 2), (0, 3), (0, 4)].into());
        assert_eq!(n.positions_of(0).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn neighborhood_properties(
            masks in proptest::collection::vec(proptest::collection::vec(0u8..2, 1..12), 1..4),
            rho in 0usize..4,
        ) {
            let examples: Vec<_> = masks.into_iter().map(f).collect();
            let lengths: Vec<usize> = examples.iter().map(|e| e.tokens.len()).collect();
            let support = format_support(&examples);
            let n = expand_neighborhood(&support, rho, &lengths);
            let bigger = expand_neighborhood(&support, rho + 1, &lengths);
            prop_assert!(support.positions.is_subset(&n.positions));
            prop_assert!(n.positions.is_subset(&bigger.positions));
            prop_assert!(n.len() <= support.positions.len() * (2 * rho + 1));
            for &(i, t) in &n.positions {
                prop_assert!(t < lengths[i]);
                prop_assert!(support.positions.iter().any(|&(j, s)| j == i && s.abs_diff(t) <= rho));
            }
        }
    }
}
