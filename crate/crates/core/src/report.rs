//! Run reports: JSON with 17 significant digits, CSV rows, and witness replay.

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::allocation::{no_undercut_at, sandwich_at, AllocationRule, GradientCar};
use crate::config::RunConfig;
use crate::duality::SimplexGrid;
use crate::error::{Error, Result};
use crate::measures::{replay_axiom, Axiom};
use crate::prob::ExtReal;
use crate::robust::{
    replay_largest, replay_preservation, Guarantee, LargestProperty, Preserved, Robustified,
};
use crate::scenario::decode;
use crate::uncertainty::{replay_property, FamilyProperty};
use crate::verdict::{PropertyVerdict, Witness};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Eval,
    RobustValue,
    DualGap,
    Bound,
    Acceptance,
    Allocation,
    Axiom,
    FamilyProperty,
    Preservation,
    Largest,
}

impl EntryKind {
    pub fn name(&self) -> &'static str {
        match self {
            EntryKind::Eval => "eval",
            EntryKind::RobustValue => "robust_value",
            EntryKind::DualGap => "dual_gap",
            EntryKind::Bound => "bound",
            EntryKind::Acceptance => "acceptance",
            EntryKind::Allocation => "allocation",
            EntryKind::Axiom => "axiom",
            EntryKind::FamilyProperty => "family_property",
            EntryKind::Preservation => "preservation",
            EntryKind::Largest => "largest",
        }
    }
}

/// One line of a report. `label` names the quantity or property.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub kind: EntryKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<ExtReal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guarantee: Option<Guarantee>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<PropertyVerdict>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Entry {
    pub fn new(kind: EntryKind, label: impl Into<String>) -> Self {
        Self {
            kind,
            label: label.into(),
            position: None,
            value: None,
            guarantee: None,
            verdict: None,
            details: BTreeMap::new(),
        }
    }

    pub fn at(mut self, position: &str) -> Self {
        self.position = Some(position.to_string());
        self
    }

    pub fn value(mut self, v: ExtReal, g: Guarantee) -> Self {
        self.value = Some(v);
        self.guarantee = Some(g);
        self
    }

    pub fn verdict(mut self, v: PropertyVerdict) -> Self {
        self.verdict = Some(v);
        self
    }

    pub fn detail(mut self, key: &str, v: impl Serialize) -> Self {
        let v = serde_json::to_value(v).unwrap_or(serde_json::Value::Null);
        self.details.insert(key.to_string(), v);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub command: String,
    pub config: RunConfig,
    pub entries: Vec<Entry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            command: command.to_string(),
            config,
            entries: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn has_counterexample(&self) -> bool {
        self.entries.iter().any(|e| {
            e.verdict
                .as_ref()
                .is_some_and(PropertyVerdict::is_counterexample)
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut out, Digits17::default());
        self.serialize(&mut ser).expect("report serializes");
        out.push(b'\n');
        out
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io_err = |e: csv::Error| Error::Input {
            path: "<csv>".into(),
            reason: e.to_string(),
        };
        w.write_record(["kind", "label", "position", "value", "guarantee", "verdict"])
            .map_err(io_err)?;
        for e in &self.entries {
            let value = match e.value {
                Some(ExtReal::Finite(v)) => format_f64(v),
                Some(ExtReal::PosInf) => "+inf".into(),
                Some(ExtReal::NegInf) => "-inf".into(),
                None => String::new(),
            };
            let guarantee = e
                .guarantee
                .map(|g| {
                    serde_json::to_value(g)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default()
                })
                .unwrap_or_default();
            let verdict = e.verdict.as_ref().map(|v| v.label()).unwrap_or("");
            w.write_record([
                e.kind.name(),
                &e.label,
                e.position.as_deref().unwrap_or(""),
                &value,
                &guarantee,
                verdict,
            ])
            .map_err(io_err)?;
        }
        w.into_inner().map_err(|e| Error::Input {
            path: "<csv>".into(),
            reason: e.to_string(),
        })
    }
}

/// 17 significant digits: enough to round-trip every f64.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Pretty JSON whose floats carry 17 significant digits.
#[derive(Default)]
struct Digits17 {
    inner: PrettyFormatter<'static>,
}

impl Formatter for Digits17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

pub fn parse_report(bytes: &[u8]) -> Result<Report> {
    let r: Report = decode(bytes)?;
    r.config.validate()?;
    Ok(r)
}

/// Outcome of replaying one stored counterexample.
#[derive(Clone, Debug, PartialEq)]
pub struct Replay {
    pub index: usize,
    pub kind: EntryKind,
    pub label: String,
    /// The witness still violates the property.
    pub violated: bool,
}

fn need_family(config: &RunConfig) -> Result<crate::uncertainty::Family> {
    config.family()?.ok_or_else(|| Error::Input {
        path: "config.family".into(),
        reason: "a family is required to replay this entry".into(),
    })
}

fn gradient_car(config: &RunConfig, w: &Witness) -> Result<GradientCar> {
    let grid = SimplexGrid::new(
        &w.space()?,
        config.grid.simplex_step,
        config.grid.sample,
        config.seed,
    )?;
    GradientCar::new(config.rho(), grid)
}

fn replay_allocation(config: &RunConfig, label: &str, w: &Witness) -> Result<bool> {
    let family = need_family(config)?;
    let solver = config.solver();
    let get = |name: &str| {
        w.position(name)
            .unwrap_or_else(|| Err(Error::Hypothesis(format!("witness lacks position {name}"))))
    };
    let rule = gradient_car(config, w)?;
    let rule: &dyn AllocationRule = &rule;
    match label {
        "no_undercut" => {
            Ok(no_undercut_at(rule, &family, &get("x")?, &get("y")?, &solver)?.is_some())
        }
        "sandwich" => Ok(sandwich_at(rule, &family, &get("y")?, &solver)?.is_some()),
        other => Err(Error::Input {
            path: "entries.label".into(),
            reason: format!("no replay for allocation check {other:?}"),
        }),
    }
}

/// Replays one entry's witness under the report's configuration.
pub fn replay_entry(config: &RunConfig, entry: &Entry, w: &Witness) -> Result<bool> {
    match entry.kind {
        EntryKind::Axiom => replay_axiom(&config.rho, Axiom::parse(&entry.label)?, w),
        EntryKind::FamilyProperty => replay_property(
            &need_family(config)?,
            FamilyProperty::parse(&entry.label)?,
            w,
        ),
        EntryKind::Preservation => {
            let robust = Robustified::new(
                Arc::new(config.rho.clone()),
                need_family(config)?,
                config.solver(),
            );
            replay_preservation(&robust, Preserved::parse(&entry.label)?, w)
        }
        EntryKind::Largest => {
            let robust = Robustified::new(
                Arc::new(config.rho.clone()),
                need_family(config)?,
                config.solver(),
            );
            replay_largest(&robust, LargestProperty::parse(&entry.label)?, w)
        }
        EntryKind::Allocation => replay_allocation(config, &entry.label, w),
        kind => Err(Error::Input {
            path: "entries.kind".into(),
            reason: format!("{} entries carry no replayable witness", kind.name()),
        }),
    }
}

/// Replays every counterexample in the report.
pub fn replay_report(report: &Report) -> Result<Vec<Replay>> {
    let mut out = Vec::new();
    for (index, e) in report.entries.iter().enumerate() {
        let Some(w) = e.verdict.as_ref().and_then(PropertyVerdict::witness) else {
            continue;
        };
        out.push(Replay {
            index,
            kind: e.kind,
            label: e.label.clone(),
            violated: replay_entry(&report.config, e, w)?,
        });
    }
    Ok(out)
}
