//! Command-line driver: reads a scenario and a run config, dispatches one
//! subcommand and emits a report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use robust_risk::acceptance::{
    acceptance_level, is_acceptable, robust_acceptance_check, robust_level_by_sets, LevelForm,
};
use robust_risk::allocation::{
    check_no_undercut, check_sandwich, check_subadditive_allocation, robust_car, AllocationRule,
    GradientCar,
};
use robust_risk::config::{load_run_config, RunConfig};
use robust_risk::duality::{
    non_expansivity_check, penalty_type, verify_convex_cash_additive_dual, verify_primal_dual,
    verify_robust_dual, verify_second_approach_dual, wasserstein_bound_check, PenaltyKind,
    PenaltySurface, SimplexGrid,
};
use robust_risk::measures::{check_axiom, Axiom};
use robust_risk::report::{Entry, EntryKind, Report};
use robust_risk::robust::{
    largest_family_properties, robust_value, verify_preservation, Guarantee, Preserved,
};
use robust_risk::scenario::{load_scenario, Scenario};
use robust_risk::uncertainty::check_property;
use robust_risk::{
    ExtReal, Family, FamilyProperty, Position, PropertyVerdict, RiskFunctional, RiskMeasure,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Engine(#[from] robust_risk::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_COUNTEREXAMPLE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "robrisk",
    version,
    about = "Robust risk measures on finite scenario spaces"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Where to write the machine-readable report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Exit with status 1 when any check finds a counterexample.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    /// Restrict to these positions (default: all).
    #[arg(long = "position")]
    pub positions: Vec<String>,
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[arg(long)]
    pub box_bound: Option<f64>,
    #[arg(long)]
    pub lattice_step: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verifier {
    PrimalDual,
    Robust,
    ConvexCashAdditive,
    SecondApproach,
    WassersteinBound,
    NonExpansive,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// ρ(X), and ρ̃(X) when the config names a family.
    Eval(Common),
    /// ρ̃(X) with the maximizing member of the family.
    Robustify(Common),
    /// Gap between a primal value and its dual representation.
    DualCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        verifier: Option<Verifier>,
    },
    /// Acceptance levels and the robust acceptance correspondence.
    Acceptance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Gradient capital allocation of parts of a portfolio.
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Name of the aggregate position.
        #[arg(long)]
        portfolio: String,
        /// Comma-separated names of the parts.
        #[arg(long, value_delimiter = ',')]
        partition: Vec<String>,
    },
    /// Axioms of ρ, properties of the family, and what ρ̃ inherits.
    Properties {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        property: Vec<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Eval(_) => "eval",
            Command::Robustify(_) => "robustify",
            Command::DualCheck { .. } => "dual-check",
            Command::Acceptance { .. } => "acceptance",
            Command::Allocate { .. } => "allocate",
            Command::Properties { .. } => "properties",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Eval(c) | Command::Robustify(c) => c,
            Command::DualCheck { common, .. }
            | Command::Acceptance { common, .. }
            | Command::Allocate { common, .. }
            | Command::Properties { common, .. } => common,
        }
    }
}

pub struct Outcome {
    pub report: Report,
    pub exit_code: i32,
}

/// Loaded inputs with command-line overrides applied.
struct Ctx {
    config: RunConfig,
    scenario: Scenario,
    positions: Vec<(String, Position)>,
    trials: usize,
}

impl Ctx {
    fn load(common: &Common) -> CliResult<Self> {
        let mut config = load_run_config(&common.config)?;
        if let Some(s) = common.seed {
            config.seed = s;
        }
        if let Some(h) = common.grid_step {
            config.grid.simplex_step = h;
        }
        if common.box_bound.is_some() {
            config.grid.box_bound = common.box_bound;
        }
        if common.lattice_step.is_some() {
            config.grid.lattice_step = common.lattice_step;
        }
        config.validate()?;
        let scenario = load_scenario(&common.scenario)?;
        let positions = if common.positions.is_empty() {
            scenario
                .positions
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        } else {
            common
                .positions
                .iter()
                .map(|k| Ok((k.clone(), scenario.position(k)?.clone())))
                .collect::<robust_risk::Result<_>>()?
        };
        Ok(Self {
            config,
            scenario,
            positions,
            trials: common.trials,
        })
    }

    fn family(&self) -> CliResult<Option<Family>> {
        Ok(self.config.family()?)
    }

    fn require_family(&self) -> CliResult<Family> {
        self.family()?.ok_or_else(|| {
            robust_risk::Error::Input {
                path: "family".into(),
                reason: "this command needs a family in the config".into(),
            }
            .into()
        })
    }

    fn grid(&self) -> CliResult<SimplexGrid> {
        let g = &self.config.grid;
        Ok(SimplexGrid::new(
            &self.scenario.space,
            g.simplex_step,
            g.sample,
            self.config.seed,
        )?)
    }

    fn surface(&self) -> CliResult<PenaltySurface> {
        let kind = match &self.config.penalty {
            Some(PenaltyKind::BruteForce { bound, step }) => PenaltyKind::BruteForce {
                bound: bound.or(self.config.grid.box_bound),
                step: step.or(self.config.grid.lattice_step),
            },
            Some(k) => k.clone(),
            None => match &self.config.rho {
                RiskMeasure::CertaintyEquivalent { loss } => {
                    PenaltyKind::LossClosedForm { loss: *loss }
                }
                r if r.flags().cash_additive => PenaltyKind::CashAdditiveClosedForm,
                _ => PenaltyKind::BruteForce {
                    bound: self.config.grid.box_bound,
                    step: self.config.grid.lattice_step,
                },
            },
        };
        Ok(penalty_type(self.config.rho(), kind)?)
    }
}

/// Turns a hypothesis failure into a warning; other errors propagate.
fn soft<T>(report: &mut Report, context: &str, r: robust_risk::Result<T>) -> CliResult<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ robust_risk::Error::Hypothesis(_)) => {
            report.warnings.push(format!("{context}: {e}"));
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

fn run_eval(ctx: &Ctx, report: &mut Report, robust_only: bool) -> CliResult<()> {
    let family = if robust_only {
        Some(ctx.require_family()?)
    } else {
        ctx.family()?
    };
    let solver = ctx.config.solver();
    for (name, x) in &ctx.positions {
        if !robust_only {
            let v = ctx.config.rho.evaluate(x)?;
            report.entries.push(
                Entry::new(EntryKind::Eval, "rho")
                    .at(name)
                    .value(v, Guarantee::Exact),
            );
        }
        if let Some(f) = &family {
            let Some(rv) = soft(report, name, robust_value(&ctx.config.rho, f, x, &solver))? else {
                continue;
            };
            let mut e = Entry::new(EntryKind::RobustValue, "robust")
                .at(name)
                .value(rv.value, rv.guarantee)
                .detail("solver", &rv.solver);
            if let Some(w) = &rv.witness {
                e = e.detail("witness", w.values());
            }
            report.entries.push(e);
        }
    }
    Ok(())
}

fn default_verifier(ctx: &Ctx) -> CliResult<Verifier> {
    Ok(if ctx.family()?.is_some() {
        Verifier::Robust
    } else {
        Verifier::PrimalDual
    })
}

fn verifier_name(v: Verifier) -> &'static str {
    match v {
        Verifier::PrimalDual => "primal_dual",
        Verifier::Robust => "robust",
        Verifier::ConvexCashAdditive => "convex_cash_additive",
        Verifier::SecondApproach => "second_approach",
        Verifier::WassersteinBound => "wasserstein_bound",
        Verifier::NonExpansive => "non_expansive",
    }
}

fn run_dual(ctx: &Ctx, report: &mut Report, verifier: Option<Verifier>) -> CliResult<()> {
    let verifier = match verifier {
        Some(v) => v,
        None => default_verifier(ctx)?,
    };
    let label = verifier_name(verifier);
    let grid = ctx.grid()?;
    let rho = ctx.config.rho();
    if verifier == Verifier::NonExpansive {
        let surface = ctx.surface()?;
        if let Some(v) = soft(
            report,
            label,
            non_expansivity_check(&surface, &ctx.scenario.space, ctx.trials, ctx.config.seed),
        )? {
            report
                .entries
                .push(Entry::new(EntryKind::DualGap, label).verdict(v));
        }
        return Ok(());
    }
    for (name, x) in &ctx.positions {
        let gap = match verifier {
            Verifier::PrimalDual => {
                let surface = ctx.surface()?.with_anchors(vec![x.clone()]);
                verify_primal_dual(rho.clone(), x, &grid, &surface)
            }
            Verifier::Robust => {
                let surface = ctx.surface()?;
                verify_robust_dual(rho.clone(), &ctx.require_family()?, x, &grid, &surface)
            }
            Verifier::ConvexCashAdditive => {
                verify_convex_cash_additive_dual(rho.clone(), &ctx.require_family()?, x, &grid)
            }
            Verifier::SecondApproach => {
                verify_second_approach_dual(rho.clone(), &ctx.require_family()?, x, &grid)
            }
            Verifier::WassersteinBound => {
                let (p, eps) = match ctx.require_family()? {
                    Family::WassersteinBall { p, eps } => (p, eps),
                    f => {
                        return Err(robust_risk::Error::Input {
                            path: "family.kind".into(),
                            reason: format!("the bound needs a Wasserstein ball, got {}", f.name()),
                        }
                        .into())
                    }
                };
                let surface = ctx.surface()?;
                let Some(b) = soft(
                    report,
                    name,
                    wasserstein_bound_check(rho.clone(), eps, p, x, &grid, &surface),
                )?
                else {
                    continue;
                };
                report.entries.push(
                    Entry::new(EntryKind::Bound, label)
                        .at(name)
                        .value(b.lhs, b.lhs_guarantee)
                        .detail("rhs", b.rhs)
                        .detail("holds", b.holds)
                        .detail("argmax", &b.argmax),
                );
                continue;
            }
            Verifier::NonExpansive => unreachable!("handled above"),
        };
        let Some(g) = soft(report, name, gap)? else {
            continue;
        };
        report.entries.push(
            Entry::new(EntryKind::DualGap, label)
                .at(name)
                .value(g.gap, g.primal_guarantee)
                .detail("report", &g),
        );
    }
    Ok(())
}

fn run_acceptance(ctx: &Ctx, report: &mut Report, level: Option<f64>) -> CliResult<()> {
    let family = ctx.family()?;
    let solver = ctx.config.solver();
    let rho = &ctx.config.rho;
    for (name, x) in &ctx.positions {
        let m = acceptance_level(rho, x, None)?;
        report.entries.push(
            Entry::new(EntryKind::Acceptance, "level")
                .at(name)
                .value(ExtReal::from(m), Guarantee::Exact),
        );
        if let Some(m) = level {
            let label = if is_acceptable(rho, x, m)? {
                "acceptable"
            } else {
                "not_acceptable"
            };
            report.entries.push(
                Entry::new(EntryKind::Acceptance, label)
                    .at(name)
                    .detail("level", m),
            );
        }
        let Some(f) = &family else { continue };
        let forms: &[(LevelForm, &str)] = if rho.flags().cash_additive {
            &[
                (LevelForm::Inclusion, "robust_level"),
                (LevelForm::Shifted, "robust_level_shifted"),
            ]
        } else {
            &[(LevelForm::Inclusion, "robust_level")]
        };
        for (form, label) in forms {
            if let Some(v) = soft(
                report,
                name,
                robust_level_by_sets(rho, f, x, None, &solver, *form),
            )? {
                let rv = robust_value(rho, f, x, &solver)?;
                report.entries.push(
                    Entry::new(EntryKind::Acceptance, *label)
                        .at(name)
                        .value(ExtReal::from(v), rv.guarantee),
                );
            }
        }
        if let Some(m) = level {
            if let Some(r) = soft(report, name, robust_acceptance_check(rho, f, x, m, &solver))? {
                report.entries.push(
                    Entry::new(EntryKind::Acceptance, "robust_correspondence")
                        .at(name)
                        .value(r.robust, r.guarantee)
                        .detail("record", &r),
                );
            }
        }
    }
    Ok(())
}

fn run_allocate(
    ctx: &Ctx,
    report: &mut Report,
    portfolio: &str,
    partition: &[String],
) -> CliResult<()> {
    let y = ctx.scenario.position(portfolio)?.clone();
    let family = ctx.family()?;
    let solver = ctx.config.solver();
    let rule = GradientCar::new(ctx.config.rho(), ctx.grid()?)?;
    let dual = rule.dual_point(&y)?;
    report.entries.push(
        Entry::new(EntryKind::Allocation, "dual_point")
            .at(portfolio)
            .value(ctx.config.rho.evaluate(&y)?, Guarantee::Exact)
            .detail("point", &dual),
    );
    let parts: Vec<(String, Position)> = if partition.is_empty() {
        ctx.positions
            .iter()
            .filter(|(k, _)| k != portfolio)
            .cloned()
            .collect()
    } else {
        partition
            .iter()
            .map(|k| Ok((k.clone(), ctx.scenario.position(k)?.clone())))
            .collect::<robust_risk::Result<_>>()?
    };
    for (name, x) in &parts {
        report.entries.push(
            Entry::new(EntryKind::Allocation, "car")
                .at(name)
                .value(rule.allocate(x, &y)?, Guarantee::Exact),
        );
        if let Some(f) = &family {
            let e = robust_car(&rule, f, x, &y, &solver)?;
            report.entries.push(
                Entry::new(EntryKind::Allocation, "robust_car")
                    .at(name)
                    .value(e.value, e.guarantee),
            );
        }
    }
    let Some(f) = &family else { return Ok(()) };
    let space = &ctx.scenario.space;
    let seed = ctx.config.seed;
    if let Some(v) = soft(
        report,
        "no_undercut",
        check_no_undercut(&rule, f, space, ctx.trials, seed, &solver),
    )? {
        report
            .entries
            .push(Entry::new(EntryKind::Allocation, "no_undercut").verdict(v));
    }
    if let Some(v) = soft(
        report,
        "sandwich",
        check_sandwich(&rule, f, space, ctx.trials, seed, &solver),
    )? {
        report
            .entries
            .push(Entry::new(EntryKind::Allocation, "sandwich").verdict(v));
    }
    if !partition.is_empty() {
        let xs: Vec<Position> = parts.iter().map(|(_, x)| x.clone()).collect();
        let v = check_subadditive_allocation(&rule, f, &y, &xs, ctx.trials, seed, &solver);
        let v = match v {
            Err(robust_risk::Error::InvalidParameter { reason, .. }) => {
                PropertyVerdict::unknown(reason)
            }
            v => v?,
        };
        report.entries.push(
            Entry::new(EntryKind::Allocation, "sub_allocation")
                .at(portfolio)
                .verdict(v),
        );
    }
    Ok(())
}

fn wanted(filter: &[String], name: &str) -> bool {
    filter.is_empty() || filter.iter().any(|f| f == name)
}

fn run_properties(ctx: &Ctx, report: &mut Report, filter: &[String]) -> CliResult<()> {
    let known = |s: &str| {
        Axiom::parse(s).is_ok()
            || FamilyProperty::parse(s).is_ok()
            || Preserved::parse(s).is_ok()
            || robust_risk::robust::LargestProperty::parse(s).is_ok()
    };
    if let Some(bad) = filter.iter().find(|s| !known(s)) {
        return Err(robust_risk::Error::Input {
            path: "--property".into(),
            reason: format!("unknown property {bad:?}"),
        }
        .into());
    }
    let space = &ctx.scenario.space;
    let seed = ctx.config.seed;
    let rho: Arc<dyn RiskFunctional> = ctx.config.rho();
    for axiom in Axiom::ALL.into_iter().filter(|a| wanted(filter, a.name())) {
        let v = check_axiom(rho.as_ref(), axiom, space, ctx.trials, seed)?;
        report
            .entries
            .push(Entry::new(EntryKind::Axiom, axiom.name()).verdict(v));
    }
    let Some(family) = ctx.family()? else {
        return Ok(());
    };
    for prop in FamilyProperty::ALL
        .into_iter()
        .filter(|p| wanted(filter, p.name()))
    {
        let v = check_property(&family, prop, space, ctx.trials, seed)?;
        report
            .entries
            .push(Entry::new(EntryKind::FamilyProperty, prop.name()).verdict(v));
    }
    let solver = ctx.config.solver();
    for prop in Preserved::ALL
        .into_iter()
        .filter(|p| wanted(filter, p.name()))
    {
        let v =
            match verify_preservation(rho.clone(), &family, prop, space, ctx.trials, seed, &solver)
            {
                Err(robust_risk::Error::Hypothesis(r)) => {
                    report
                        .warnings
                        .push(format!("preservation {}: {r}", prop.name()));
                    PropertyVerdict::unknown(r)
                }
                v => v?,
            };
        report
            .entries
            .push(Entry::new(EntryKind::Preservation, prop.name()).verdict(v));
    }
    if filter.is_empty()
        || filter
            .iter()
            .any(|f| robust_risk::robust::LargestProperty::parse(f).is_ok())
    {
        let trials = ctx.trials.min(64);
        let all = soft(
            report,
            "largest family",
            largest_family_properties(rho, &family, space, trials, seed, &solver),
        )?;
        for (prop, v) in all
            .into_iter()
            .flatten()
            .filter(|(p, _)| wanted(filter, p.name()))
        {
            report
                .entries
                .push(Entry::new(EntryKind::Largest, prop.name()).verdict(v));
        }
    }
    Ok(())
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs one subcommand and writes the report if `--out` was given.
pub fn run(command: &Command) -> CliResult<Outcome> {
    let common = command.common();
    let ctx = Ctx::load(common)?;
    let mut report = Report::new(command.name(), ctx.config.clone());
    match command {
        Command::Eval(_) => run_eval(&ctx, &mut report, false)?,
        Command::Robustify(_) => run_eval(&ctx, &mut report, true)?,
        Command::DualCheck { verifier, .. } => run_dual(&ctx, &mut report, *verifier)?,
        Command::Acceptance { level, .. } => run_acceptance(&ctx, &mut report, *level)?,
        Command::Allocate {
            portfolio,
            partition,
            ..
        } => run_allocate(&ctx, &mut report, portfolio, partition)?,
        Command::Properties { property, .. } => run_properties(&ctx, &mut report, property)?,
    }
    if let Some(path) = &common.out {
        let bytes = match common.format {
            Format::Json => report.to_json(),
            Format::Csv => report.to_csv()?,
        };
        write_out(path, &bytes)?;
    }
    let exit_code = if common.strict && report.has_counterexample() {
        EXIT_COUNTEREXAMPLE
    } else {
        EXIT_OK
    };
    Ok(Outcome { report, exit_code })
}

fn short(v: &ExtReal) -> String {
    match v {
        ExtReal::Finite(x) => format!("{x:.9}"),
        ExtReal::PosInf => "+inf".into(),
        ExtReal::NegInf => "-inf".into(),
    }
}

/// Plain-text table of the report entries, followed by warnings.
pub fn render_table(report: &Report) -> String {
    let header = ["kind", "label", "position", "value", "guarantee", "verdict"];
    let rows: Vec<[String; 6]> = report
        .entries
        .iter()
        .map(|e| {
            [
                e.kind.name().to_string(),
                e.label.clone(),
                e.position.clone().unwrap_or_default(),
                e.value.as_ref().map(short).unwrap_or_default(),
                e.guarantee
                    .map(|g| match g {
                        Guarantee::Exact => "exact",
                        Guarantee::LowerBound => "lower_bound",
                        Guarantee::UpperBound => "upper_bound",
                    })
                    .unwrap_or("")
                    .to_string(),
                e.verdict
                    .as_ref()
                    .map(|v| v.label())
                    .unwrap_or("")
                    .to_string(),
            ]
        })
        .collect();
    let mut width = header.map(str::len);
    for r in &rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let cells: Vec<String> = cells
            .iter()
            .zip(width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    };
    line(&mut out, &header);
    for r in &rows {
        line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for e in &report.entries {
        if let Some(w) = e.verdict.as_ref().and_then(PropertyVerdict::witness) {
            let _ = writeln!(out, "\ncounterexample for {} {}:", e.kind.name(), e.label);
            for (k, v) in &w.positions {
                let _ = writeln!(out, "  {k} = {v:?}");
            }
            for (k, v) in &w.scalars {
                let _ = writeln!(out, "  {k} = {v}");
            }
        }
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
