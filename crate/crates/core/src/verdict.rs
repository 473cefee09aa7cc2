//! Outcomes of property checks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::prob::{Position, ProbSpace};

/// Concrete data that violates a property. Positions are stored as raw
/// values on the space given by `probs`, so a witness survives a JSON round trip.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub probs: Vec<f64>,
    pub positions: BTreeMap<String, Vec<f64>>,
    pub scalars: BTreeMap<String, f64>,
}

impl Witness {
    pub fn new(space: &ProbSpace) -> Self {
        Self {
            probs: space.probs().to_vec(),
            ..Self::default()
        }
    }

    pub fn with_position(mut self, name: &str, x: &Position) -> Self {
        self.positions.insert(name.to_string(), x.values().to_vec());
        self
    }

    pub fn with_scalar(mut self, name: &str, v: f64) -> Self {
        self.scalars.insert(name.to_string(), v);
        self
    }

    pub fn space(&self) -> Result<ProbSpace> {
        ProbSpace::new(self.probs.clone())
    }

    pub fn position(&self, name: &str) -> Option<Result<Position>> {
        let values = self.positions.get(name)?;
        Some(self.space().and_then(|s| s.position(values.clone())))
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum PropertyVerdict {
    CertifiedHolds { reason: String },
    SampledNoCounterexample { trials: usize },
    Counterexample { witness: Witness },
    Unknown { reason: String },
}

impl PropertyVerdict {
    pub fn certified(reason: impl Into<String>) -> Self {
        Self::CertifiedHolds {
            reason: reason.into(),
        }
    }

    pub fn unknown(reason: impl Into<String>) -> Self {
        Self::Unknown {
            reason: reason.into(),
        }
    }

    pub fn is_counterexample(&self) -> bool {
        matches!(self, Self::Counterexample { .. })
    }

    /// True for the two verdicts that assert the property.
    pub fn is_positive(&self) -> bool {
        matches!(
            self,
            Self::CertifiedHolds { .. } | Self::SampledNoCounterexample { .. }
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::CertifiedHolds { .. } => "certified_holds",
            Self::SampledNoCounterexample { .. } => "sampled_no_counterexample",
            Self::Counterexample { .. } => "counterexample",
            Self::Unknown { .. } => "unknown",
        }
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Self::Counterexample { witness } => Some(witness),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn witness_round_trip() {
        let s = ProbSpace::uniform(2).unwrap();
        let w = Witness::new(&s)
            .with_position("x", &s.position(vec![0.1, 1.0 / 3.0]).unwrap())
            .with_scalar("lambda", 0.5);
        let v = PropertyVerdict::Counterexample { witness: w };
        let text = serde_json::to_string(&v).unwrap();
        let back: PropertyVerdict = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
        let x = back.witness().unwrap().position("x").unwrap().unwrap();
        assert_eq!(x.values()[1], 1.0 / 3.0);
    }
}
