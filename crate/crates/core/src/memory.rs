//! Structured condition records and the causal condition refiner.
//!
//! A [`ConditionRecord`] is the stand-in for a frame's text prompt: a character, a
//! background and a motion, each of which may be absent (the prompt refers to the
//! character only by pronoun, say). The refiner distils persistent context from earlier
//! records into each frame's condition so the diffusion corrector sees a complete one.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type AttrId = u16;

/// Per-frame structured condition. `None` marks an attribute the local prompt omits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub character: Option<AttrId>,
    pub background: Option<AttrId>,
    pub motion: Option<AttrId>,
}

/// Attribute selector, in record field order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Character,
    Background,
    Motion,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Character, Attribute::Background, Attribute::Motion];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Character => "character",
            Attribute::Background => "background",
            Attribute::Motion => "motion",
        }
    }
}

impl ConditionRecord {
    pub fn new(character: AttrId, background: AttrId, motion: AttrId) -> Self {
        Self {
            character: Some(character),
            background: Some(background),
            motion: Some(motion),
        }
    }

    pub fn get(&self, attr: Attribute) -> Option<AttrId> {
        match attr {
            Attribute::Character => self.character,
            Attribute::Background => self.background,
            Attribute::Motion => self.motion,
        }
    }

    pub fn set(&mut self, attr: Attribute, value: Option<AttrId>) {
        match attr {
            Attribute::Character => self.character = value,
            Attribute::Background => self.background = value,
            Attribute::Motion => self.motion = value,
        }
    }

    pub fn is_complete(&self) -> bool {
        Attribute::ALL.iter().all(|a| self.get(*a).is_some())
    }

    /// `true` if every attribute defined in `query` has the same value here.
    pub fn matches(&self, query: &ConditionRecord) -> bool {
        Attribute::ALL
            .iter()
            .all(|a| query.get(*a).is_none() || query.get(*a) == self.get(*a))
    }

    /// Attribute ids as an array, with `u16::MAX` for absent values.
    pub fn encoded(&self) -> [u16; 3] {
        Attribute::ALL.map(|a| self.get(a).unwrap_or(u16::MAX))
    }
}

impl fmt::Display for ConditionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<AttrId>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        write!(
            f,
            "character={} background={} motion={}",
            show(self.character),
            show(self.background),
            show(self.motion)
        )
    }
}

/// How the refiner treats one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CarryPolicy {
    /// The first value ever defined wins, overriding later local values.
    FirstDefined,
    /// Local value if present, otherwise the most recent defined value.
    Latest,
    /// Local value only; absent stays absent.
    LocalOnly,
}

/// One policy per attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerRule {
    pub character: CarryPolicy,
    pub background: CarryPolicy,
    pub motion: CarryPolicy,
}

impl Default for RefinerRule {
    fn default() -> Self {
        Self {
            character: CarryPolicy::FirstDefined,
            background: CarryPolicy::FirstDefined,
            motion: CarryPolicy::Latest,
        }
    }
}

impl RefinerRule {
    pub fn policy(&self, attr: Attribute) -> CarryPolicy {
        match attr {
            Attribute::Character => self.character,
            Attribute::Background => self.background,
            Attribute::Motion => self.motion,
        }
    }
}

/// Refines the condition of the last entry of `history` using all earlier entries.
pub fn refine(history: &[ConditionRecord], rules: &RefinerRule) -> Result<ConditionRecord> {
    let last = history
        .last()
        .ok_or_else(|| invalid("refine needs a non-empty condition history"))?;
    let mut out = *last;
    for attr in Attribute::ALL {
        let value = match rules.policy(attr) {
            CarryPolicy::FirstDefined => history.iter().find_map(|r| r.get(attr)),
            CarryPolicy::Latest => history.iter().rev().find_map(|r| r.get(attr)),
            CarryPolicy::LocalOnly => last.get(attr),
        };
        out.set(attr, value);
    }
    Ok(out)
}

/// Causally refines every prefix: element `i` is `refine(&history[..=i])`.
pub fn refine_all(history: &[ConditionRecord], rules: &RefinerRule) -> Vec<ConditionRecord> {
    let mut first: [Option<AttrId>; 3] = [None; 3];
    let mut latest: [Option<AttrId>; 3] = [None; 3];
    history
        .iter()
        .map(|rec| {
            let mut out = *rec;
            for (k, attr) in Attribute::ALL.into_iter().enumerate() {
                if let Some(v) = rec.get(attr) {
                    first[k].get_or_insert(v);
                    latest[k] = Some(v);
                }
                let value = match rules.policy(attr) {
                    CarryPolicy::FirstDefined => first[k],
                    CarryPolicy::Latest => latest[k],
                    CarryPolicy::LocalOnly => rec.get(attr),
                };
                out.set(attr, value);
            }
            out
        })
        .collect()
}

/// Weights for the attribute-wise Hamming distance between two conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionWeights {
    pub character: f64,
    pub background: f64,
    pub motion: f64,
}

impl Default for ConditionWeights {
    fn default() -> Self {
        Self {
            character: 1.0,
            background: 1.0,
            motion: 1.0,
        }
    }
}

/// Weighted Hamming distance; an absent value differs from any present one.
pub fn condition_distance(a: &ConditionRecord, b: &ConditionRecord, w: &ConditionWeights) -> f64 {
    let weight = [w.character, w.background, w.motion];
    Attribute::ALL
        .iter()
        .zip(weight)
        .filter(|(attr, _)| a.get(**attr) != b.get(**attr))
        .map(|(_, w)| w)
        .sum()
}
