//! Scenario files: a probability space, named positions and named measures.
//!
//! ```json
//! {"space": {"probs": [0.5, 0.5]},
//!  "positions": {"X": [1, 2]},
//!  "measures": {"Q": {"density": [1.6, 0.4]}}}
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{Position, ProbSpace, ScenarioMeasure};

/// A JSON object whose keys must be unique.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct UniqueMap<T>(pub BTreeMap<String, T>);

impl<T> Default for UniqueMap<T> {
    fn default() -> Self {
        UniqueMap(BTreeMap::new())
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for UniqueMap<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = UniqueMap<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object with unique keys")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some(k) = map.next_key::<String>()? {
                    if out.contains_key(&k) {
                        return Err(serde::de::Error::custom(format!("duplicate name {k:?}")));
                    }
                    let v = map.next_value()?;
                    out.insert(k, v);
                }
                Ok(UniqueMap(out))
            }
        }
        d.deserialize_map(V(PhantomData))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSpace {
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeasure {
    pub density: Vec<f64>,
}

/// The file as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub space: RawSpace,
    pub positions: UniqueMap<Vec<f64>>,
    #[serde(default)]
    pub measures: UniqueMap<RawMeasure>,
}

/// A validated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub space: ProbSpace,
    pub positions: BTreeMap<String, Position>,
    pub measures: BTreeMap<String, ScenarioMeasure>,
}

impl Scenario {
    pub fn position(&self, name: &str) -> Result<&Position> {
        self.positions.get(name).ok_or_else(|| Error::Input {
            path: format!("positions.{name}"),
            reason: "no such position".into(),
        })
    }

    pub fn measure(&self, name: &str) -> Result<&ScenarioMeasure> {
        self.measures.get(name).ok_or_else(|| Error::Input {
            path: format!("measures.{name}"),
            reason: "no such measure".into(),
        })
    }
}

fn at(path: impl Into<String>, e: Error) -> Error {
    Error::Input {
        path: path.into(),
        reason: e.to_string(),
    }
}

/// Decodes JSON into `T`, reporting the field path of any failure.
pub(crate) fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let v = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Input {
            path: if path == "." { "<root>".into() } else { path },
            reason: e.into_inner().to_string(),
        }
    })?;
    Ok(v)
}

impl ScenarioFile {
    pub fn validate(&self) -> Result<Scenario> {
        let space = ProbSpace::new(self.space.probs.clone()).map_err(|e| at("space.probs", e))?;
        let mut positions = BTreeMap::new();
        for (name, values) in &self.positions.0 {
            if name.is_empty() {
                return Err(at("positions", Error::InvalidPosition("empty name".into())));
            }
            let x = space
                .position(values.clone())
                .map_err(|e| at(format!("positions.{name}"), e))?;
            positions.insert(name.clone(), x);
        }
        let mut measures = BTreeMap::new();
        for (name, m) in &self.measures.0 {
            if name.is_empty() {
                return Err(at("measures", Error::InvalidMeasure("empty name".into())));
            }
            let q = ScenarioMeasure::new(space.clone(), m.density.clone())
                .map_err(|e| at(format!("measures.{name}.density"), e))?;
            measures.insert(name.clone(), q);
        }
        Ok(Scenario {
            space,
            positions,
            measures,
        })
    }
}

pub fn parse_scenario(bytes: &[u8]) -> Result<Scenario> {
    decode::<ScenarioFile>(bytes)?.validate()
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let bytes = std::fs::read(path).map_err(|e| Error::Input {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_scenario(&bytes)
}
