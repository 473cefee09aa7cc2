//! Run configuration: which functional, family, solver, grids and seed.
//!
//! ```json
//! {"rho": {"kind": "expectation_floor", "params": {"k": 1.0}},
//!  "family": {"kind": "sup_norm_ball", "params": {"eps": 0.1}},
//!  "solver": {"kind": "auto"},
//!  "seed": 42}
//! ```

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::de::{Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::duality::PenaltyKind;
use crate::error::{Error, Result};
use crate::measures::{RiskFunctional, RiskMeasure};
use crate::robust::{Solver, SolverChoice};
use crate::scenario::decode;
use crate::uncertainty::Family;

/// An order p in [1, ∞], written as a number or "inf".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Order(pub f64);

impl Serialize for Order {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Order {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Order;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<Order, E> {
                Ok(Order(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<Order, E> {
                Ok(Order(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<Order, E> {
                Ok(Order(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<Order, E> {
                match v {
                    "inf" | "+inf" => Ok(Order(f64::INFINITY)),
                    _ => Err(E::custom(format!(
                        "expected a number or \"inf\", got {v:?}"
                    ))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// A family as written in a config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum FamilySpec {
    SupNormBall { eps: f64 },
    PNormBall { p: Order, eps: f64 },
    WassersteinBall { p: Order, eps: f64 },
    LevelBand { rho: RiskMeasure, eps: f64 },
    LevelUpperSet { rho: RiskMeasure, eps: f64 },
    Solidified { inner: Box<FamilySpec> },
}

impl FamilySpec {
    pub fn build(&self) -> Result<Family> {
        let level = |rho: &RiskMeasure| -> Result<Arc<dyn RiskFunctional>> {
            rho.validate()?;
            Ok(Arc::new(rho.clone()))
        };
        match self {
            FamilySpec::SupNormBall { eps } => Family::sup_norm_ball(*eps),
            FamilySpec::PNormBall { p, eps } => Family::p_norm_ball(p.0, *eps),
            FamilySpec::WassersteinBall { p, eps } => Family::wasserstein_ball(p.0, *eps),
            FamilySpec::LevelBand { rho, eps } => Family::level_band(level(rho)?, *eps),
            FamilySpec::LevelUpperSet { rho, eps } => Family::level_upper_set(level(rho)?, *eps),
            FamilySpec::Solidified { inner } => Ok(Family::Solidified(Box::new(inner.build()?))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_analytic")]
    pub analytic: f64,
    #[serde(default = "default_grid_tol")]
    pub grid: f64,
}

fn default_analytic() -> f64 {
    1e-9
}

fn default_grid_tol() -> f64 {
    1e-5
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            analytic: default_analytic(),
            grid: default_grid_tol(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_simplex_step")]
    pub simplex_step: f64,
    /// Box half-width for brute-force penalties; derived from the query when absent.
    #[serde(default)]
    pub box_bound: Option<f64>,
    #[serde(default)]
    pub lattice_step: Option<f64>,
    /// Random simplex points used when the space has more than three atoms.
    #[serde(default = "default_sample")]
    pub sample: usize,
}

fn default_simplex_step() -> f64 {
    0.01
}

fn default_sample() -> usize {
    2000
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            simplex_step: default_simplex_step(),
            box_bound: None,
            lattice_step: None,
            sample: default_sample(),
        }
    }
}

fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rho: RiskMeasure,
    #[serde(default)]
    pub family: Option<FamilySpec>,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub grid: GridConfig,
    /// Penalty surface for duality checks; picked from the functional when absent.
    #[serde(default)]
    pub penalty: Option<PenaltyKind>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn at(path: &str, e: Error) -> Error {
    Error::Input {
        path: path.into(),
        reason: e.to_string(),
    }
}

fn bad(path: &str, reason: impl Into<String>) -> Error {
    Error::Input {
        path: path.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn new(rho: RiskMeasure) -> Self {
        Self {
            rho,
            family: None,
            solver: SolverChoice::Auto,
            tolerances: Tolerances::default(),
            grid: GridConfig::default(),
            penalty: None,
            seed: default_seed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rho.validate().map_err(|e| at("rho.params", e))?;
        if let Some(f) = &self.family {
            f.build().map_err(|e| at("family.params", e))?;
        }
        for (path, v) in [
            ("tolerances.analytic", self.tolerances.analytic),
            ("tolerances.grid", self.tolerances.grid),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(path, format!("must be positive, got {v}")));
            }
        }
        let s = self.grid.simplex_step;
        let m = (1.0 / s).round();
        if !(s > 0.0 && s <= 1.0) || (m * s - 1.0).abs() > 1e-9 {
            return Err(bad(
                "grid.simplex_step",
                format!("must be 1/k for an integer k, got {s}"),
            ));
        }
        for (path, v) in [
            ("grid.box_bound", self.grid.box_bound),
            ("grid.lattice_step", self.grid.lattice_step),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(bad(path, format!("must be positive, got {v}")));
                }
            }
        }
        match &self.solver {
            SolverChoice::Grid { resolution, budget } => {
                if !(*resolution > 0.0 && resolution.is_finite()) || *budget == 0 {
                    return Err(bad(
                        "solver.params",
                        "grid needs a positive resolution and budget",
                    ));
                }
            }
            SolverChoice::ProjectedAscent { restarts } if *restarts == 0 => {
                return Err(bad("solver.params.restarts", "must be at least 1"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn family(&self) -> Result<Option<Family>> {
        self.family.as_ref().map(|f| f.build()).transpose()
    }

    pub fn solver(&self) -> Solver {
        Solver::new(self.solver.clone(), self.seed)
    }

    pub fn rho(&self) -> Arc<dyn RiskFunctional> {
        Arc::new(self.rho.clone())
    }
}

pub fn parse_run_config(bytes: &[u8]) -> Result<RunConfig> {
    let c: RunConfig = decode(bytes)?;
    c.validate()?;
    Ok(c)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let bytes = std::fs::read(path).map_err(|e| Error::Input {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    parse_run_config(&bytes)
}
