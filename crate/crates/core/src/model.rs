//! The eight members of the general family and the bookkeeping around them.
//!
//! A model is an E/V triple over (volume, shape, orientation) of the
//! component covariances `Σ_j = λ_j Γ_j Δ_j Γ_j'`. "E" ties the factor across
//! components, "V" lets it vary.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Whether a covariance factor is shared across components or free per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Equal,
    Variable,
}

impl Constraint {
    fn letter(self) -> char {
        match self {
            Constraint::Equal => 'E',
            Constraint::Variable => 'V',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'E' => Some(Constraint::Equal),
            'V' => Some(Constraint::Variable),
            _ => None,
        }
    }

    pub fn is_variable(self) -> bool {
        self == Constraint::Variable
    }
}

/// One of the eight constraint patterns of the general family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelId {
    pub volume: Constraint,
    pub shape: Constraint,
    pub orientation: Constraint,
}

use Constraint::{Equal as E, Variable as V};

impl ModelId {
    pub const EEE: ModelId = ModelId::new(E, E, E);
    pub const VEE: ModelId = ModelId::new(V, E, E);
    pub const EVE: ModelId = ModelId::new(E, V, E);
    pub const EEV: ModelId = ModelId::new(E, E, V);
    pub const VVE: ModelId = ModelId::new(V, V, E);
    pub const VEV: ModelId = ModelId::new(V, E, V);
    pub const EVV: ModelId = ModelId::new(E, V, V);
    pub const VVV: ModelId = ModelId::new(V, V, V);

    /// All eight models, most to least parsimonious by hierarchy level.
    pub const ALL: [ModelId; 8] = [
        Self::EEE,
        Self::VEE,
        Self::EVE,
        Self::EEV,
        Self::VVE,
        Self::VEV,
        Self::EVV,
        Self::VVV,
    ];

    /// The seven null models tested against VVV.
    pub const NULLS: [ModelId; 7] = [
        Self::EEE,
        Self::VEE,
        Self::EVE,
        Self::EEV,
        Self::VVE,
        Self::VEV,
        Self::EVV,
    ];

    /// Models whose null hypotheses are elementary.
    pub const ELEMENTARY: [ModelId; 3] = [Self::VVE, Self::VEV, Self::EVV];

    pub const fn new(volume: Constraint, shape: Constraint, orientation: Constraint) -> Self {
        ModelId {
            volume,
            shape,
            orientation,
        }
    }

    fn flags(self) -> [Constraint; 3] {
        [self.volume, self.shape, self.orientation]
    }

    /// Position in [`ModelId::ALL`].
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&m| m == self).unwrap()
    }

    /// Number of factors allowed to vary; 0 for EEE, 3 for VVV.
    pub fn level(self) -> usize {
        self.flags().iter().filter(|c| c.is_variable()).count()
    }

    /// True when every factor tied in `other` is also tied in `self`,
    /// i.e. `self` is nested in `other`.
    pub fn is_nested_in(self, other: ModelId) -> bool {
        self.flags()
            .iter()
            .zip(other.flags().iter())
            .all(|(a, b)| !a.is_variable() || b.is_variable())
    }

    /// Common orientation across components (EEE, VEE, EVE, VVE).
    pub fn shares_orientation(self) -> bool {
        !self.orientation.is_variable()
    }

    /// Free covariance parameters for `k` components in dimension `p`.
    pub fn covariance_params(self, p: usize, k: usize) -> usize {
        let rot = p * (p - 1) / 2;
        match self {
            m if m == Self::EEE => p * (p + 1) / 2,
            m if m == Self::VEE => k + p - 1 + rot,
            m if m == Self::EVE => 1 + k * (p - 1) + rot,
            m if m == Self::EEV => p + k * rot,
            m if m == Self::VVE => k * p + rot,
            m if m == Self::VEV => k + p - 1 + k * rot,
            m if m == Self::EVV => 1 + k * (p - 1) + k * rot,
            _ => k * p * (p + 1) / 2,
        }
    }
}

/// Total free parameters: `(k - 1)` weights, `kp` means and the covariance parameters.
pub fn total_params(model: ModelId, p: usize, k: usize) -> usize {
    assert!(p >= 1 && k >= 1, "p and k must be positive");
    (k - 1) + k * p + model.covariance_params(p, k)
}

/// Degrees of freedom of the χ² reference for the LR test of `model` against VVV.
pub fn lr_degrees_of_freedom(model: ModelId, p: usize, k: usize) -> usize {
    total_params(ModelId::VVV, p, k) - total_params(model, p, k)
}

/// `model` together with every more restrictive null hypothesis it implies.
pub fn implied_hypotheses(model: ModelId) -> Result<BTreeSet<ModelId>> {
    if model == ModelId::VVV {
        return Err(Error::NotANullHypothesis(model));
    }
    Ok(ModelId::ALL.iter().copied().filter(|n| n.is_nested_in(model)).collect())
}

/// Parses a three-letter model code, ignoring case.
pub fn parse_model_id(name: &str) -> Result<ModelId> {
    name.parse()
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().chars().collect();
        if chars.len() != 3 {
            return Err(Error::InvalidModel(s.to_string()));
        }
        let flag = |c: char| Constraint::from_letter(c).ok_or_else(|| Error::InvalidModel(s.to_string()));
        Ok(ModelId::new(flag(chars[0])?, flag(chars[1])?, flag(chars[2])?))
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.flags().iter().map(|c| c.letter()).collect();
        f.pad(&s)
    }
}

impl PartialOrd for ModelId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ModelId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.index().cmp(&other.index())
    }
}

impl Serialize for ModelId {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
