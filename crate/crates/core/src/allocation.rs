//! Capital allocation rules Λ(X, Y), their robust version
//! Λ̃(X, Y) = sup over U_X of Λ(Z, Y), and sampled property checks.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::duality::{minimal_penalty, refine_simplex, support_function, SimplexGrid};
use crate::error::{param, Error, Result};
use crate::measures::{AxiomFlags, RiskFunctional};
use crate::prob::{density_norm, expectation_under, ExtReal, Position, ProbSpace, ScenarioMeasure};
use crate::robust::{robust_value, Estimate, Guarantee, Solver, GRID_TOL};
use crate::sampling;
use crate::uncertainty::{lex_cmp, Family};
use crate::verdict::{PropertyVerdict, Witness};

/// Λ(X, Y): the capital charged to X as part of the aggregate Y.
pub trait AllocationRule: Debug + Send + Sync {
    fn allocate(&self, x: &Position, y: &Position) -> Result<ExtReal>;

    /// The risk functional the rule allocates.
    fn base(&self) -> &Arc<dyn RiskFunctional>;

    fn name(&self) -> String;

    /// `Some((Q, c))` when Λ(·, Y) = E_Q[-·] + c.
    fn linear_in_x(&self, _y: &Position) -> Result<Option<(ScenarioMeasure, f64)>> {
        Ok(None)
    }
}

/// Λ(X, Y) = E_{Q*}[-X] - c_ρ(Q*) where Q* attains the dual sup for ρ(Y).
#[derive(Debug, Clone)]
pub struct GradientCar {
    rho: Arc<dyn RiskFunctional>,
    grid: SimplexGrid,
}

/// The scenario measure chosen for Y and its penalty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub masses: Vec<f64>,
    pub penalty: f64,
    /// ρ(Y) minus the dual value at the chosen point.
    pub attainment_gap: f64,
}

impl GradientCar {
    pub fn new(rho: Arc<dyn RiskFunctional>, grid: SimplexGrid) -> Result<Self> {
        let f = rho.flags();
        if !(f.convex && f.cash_additive) {
            return Err(Error::Hypothesis(format!(
                "{} must be convex and cash-additive",
                rho.name()
            )));
        }
        Ok(Self { rho, grid })
    }

    fn penalty(&self, q: &ScenarioMeasure, y: &Position) -> Result<ExtReal> {
        let b = 10.0 * (y.sup_norm() + 1.0);
        Ok(minimal_penalty(self.rho.as_ref(), q, b, b / 50.0)?.value)
    }

    /// Q*_Y: closed-form argmax when the functional has one, otherwise the grid
    /// argmax (ties to the smallest L² density norm, then lexicographic masses)
    /// refined on the simplex.
    pub fn dual_measure(&self, y: &Position) -> Result<(ScenarioMeasure, f64)> {
        if y.space() != self.grid.space() {
            return Err(Error::SpaceMismatch);
        }
        if let Some(q) = self.rho.dual_argmax(y) {
            if let Some(c) = self.penalty(&q, y)?.finite() {
                return Ok((q, c));
            }
        }
        let mut obj = |q: &ScenarioMeasure| -> Result<ExtReal> {
            let c = self.penalty(q, y)?;
            Ok(match c {
                ExtReal::Finite(c) => ExtReal::from(-expectation_under(q, y)? - c),
                _ => ExtReal::NegInf,
            })
        };
        let mut best: Option<(ExtReal, f64, Vec<f64>)> = None;
        for q in self.grid.points() {
            let v = obj(q)?;
            let nrm = density_norm(q, 2.0)?;
            let m = q.masses();
            let better = match &best {
                None => true,
                Some((bv, bn, bm)) => {
                    v > *bv || (v == *bv && (nrm < *bn || (nrm == *bn && lex_cmp(&m, bm).is_lt())))
                }
            };
            if better {
                best = Some((v, nrm, m));
            }
        }
        let (bv, _, bm) = best.ok_or_else(|| Error::NoSolver("empty simplex grid".into()))?;
        let (v, m) = refine_simplex(self.grid.space(), &bm, self.grid.step(), &mut obj)?;
        let m = if v > bv { m } else { bm };
        let q = ScenarioMeasure::from_masses(self.grid.space().clone(), &m)?;
        let c = self
            .penalty(&q, y)?
            .finite()
            .ok_or_else(|| Error::NoSolver("dual sup not attained on the grid".into()))?;
        Ok((q, c))
    }

    pub fn dual_point(&self, y: &Position) -> Result<DualPoint> {
        let (q, c) = self.dual_measure(y)?;
        let dual = -expectation_under(&q, y)? - c;
        Ok(DualPoint {
            masses: q.masses(),
            penalty: c,
            attainment_gap: self.rho.evaluate(y)?.to_f64() - dual,
        })
    }
}

impl AllocationRule for GradientCar {
    fn allocate(&self, x: &Position, y: &Position) -> Result<ExtReal> {
        let (q, c) = self.dual_measure(y)?;
        Ok(ExtReal::from(-expectation_under(&q, x)? - c))
    }

    fn base(&self) -> &Arc<dyn RiskFunctional> {
        &self.rho
    }

    fn name(&self) -> String {
        format!("gradient_car[{}]", self.rho.name())
    }

    fn linear_in_x(&self, y: &Position) -> Result<Option<(ScenarioMeasure, f64)>> {
        let (q, c) = self.dual_measure(y)?;
        Ok(Some((q, -c)))
    }
}

/// Z ↦ Λ(Z, Y) for a fixed aggregate.
#[derive(Debug)]
struct Slice<'a> {
    rule: &'a dyn AllocationRule,
    y: &'a Position,
}

impl RiskFunctional for Slice<'_> {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        self.rule.allocate(x, self.y)
    }

    fn flags(&self) -> AxiomFlags {
        AxiomFlags::default()
    }

    fn name(&self) -> String {
        format!("{} at fixed aggregate", self.rule.name())
    }
}

/// Λ̃(X, Y). Rules linear in X reduce to the support function of the family.
pub fn robust_car(
    rule: &dyn AllocationRule,
    family: &Family,
    x: &Position,
    y: &Position,
    solver: &Solver,
) -> Result<Estimate> {
    if let Some((q, c)) = rule.linear_in_x(y)? {
        let phi = support_function(family, &q, x)?;
        return Ok(Estimate {
            value: phi.value.add_f64(c),
            guarantee: phi.guarantee,
        });
    }
    let rv = robust_value(&Slice { rule, y }, family, x, solver)?;
    Ok(Estimate::from(&rv))
}

fn tolerance(a: &Estimate, b: &Estimate) -> f64 {
    let scale = 1.0 + a.value.to_f64().abs().min(1e12) + b.value.to_f64().abs().min(1e12);
    if a.is_exact() && b.is_exact() {
        1e-9 * scale
    } else {
        GRID_TOL * scale
    }
}

fn exact(v: ExtReal) -> Estimate {
    Estimate {
        value: v,
        guarantee: Guarantee::Exact,
    }
}

/// `Some(witness)` when Λ(X, Y) > ρ(X) or Λ̃(X, Y) > ρ̃(X) at this pair.
pub fn no_undercut_at(
    rule: &dyn AllocationRule,
    family: &Family,
    x: &Position,
    y: &Position,
    solver: &Solver,
) -> Result<Option<Witness>> {
    let rho = rule.base().as_ref();
    let w = || {
        Witness::new(x.space())
            .with_position("x", x)
            .with_position("y", y)
    };
    let base = exact(rule.allocate(x, y)?);
    let rx = exact(rho.evaluate(x)?);
    if !base.value.le_tol(rx.value, tolerance(&base, &rx)) {
        return Ok(Some(
            w().with_scalar("base_allocation", base.value.to_f64())
                .with_scalar("rho", rx.value.to_f64()),
        ));
    }
    let lam = robust_car(rule, family, x, y, solver)?;
    let rr = Estimate::from(&robust_value(rho, family, x, solver)?);
    // A lower-bound ρ̃ can only be trusted up to the grid tolerance.
    if !lam.value.le_tol(rr.value, tolerance(&lam, &rr)) {
        return Ok(Some(
            w().with_scalar("robust_allocation", lam.value.to_f64())
                .with_scalar("robust_rho", rr.value.to_f64()),
        ));
    }
    Ok(None)
}

/// Sampled Λ̃(X, Y) ≤ ρ̃(X), after the base rule's own no-undercut.
pub fn check_no_undercut(
    rule: &dyn AllocationRule,
    family: &Family,
    space: &ProbSpace,
    samples: usize,
    seed: u64,
    solver: &Solver,
) -> Result<PropertyVerdict> {
    let mut rng = sampling::rng(seed);
    for _ in 0..samples {
        let x = sampling::random_position(&mut rng, space, 3.0);
        let y = sampling::random_position(&mut rng, space, 3.0);
        if let Some(w) = no_undercut_at(rule, family, &x, &y, solver)? {
            return Ok(PropertyVerdict::Counterexample { witness: w });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials: samples })
}

/// `Some(witness)` when ρ(Y) ≤ Λ̃(Y, Y) ≤ ρ̃(Y) fails at Y.
pub fn sandwich_at(
    rule: &dyn AllocationRule,
    family: &Family,
    y: &Position,
    solver: &Solver,
) -> Result<Option<Witness>> {
    if !family.contains(y, y)? {
        return Err(Error::Hypothesis(format!(
            "{} does not contain its centre",
            family.name()
        )));
    }
    let rho = rule.base().as_ref();
    let r = exact(rho.evaluate(y)?);
    let lam = robust_car(rule, family, y, y, solver)?;
    let rr = Estimate::from(&robust_value(rho, family, y, solver)?);
    let lower = r.value.le_tol(
        lam.value,
        tolerance(&r, &lam).max(car_identity_tol(rule, y)?),
    );
    let upper = lam.value.le_tol(rr.value, tolerance(&lam, &rr));
    if lower && upper {
        return Ok(None);
    }
    Ok(Some(
        Witness::new(y.space())
            .with_position("y", y)
            .with_scalar("rho", r.value.to_f64())
            .with_scalar("robust_allocation", lam.value.to_f64())
            .with_scalar("robust_rho", rr.value.to_f64()),
    ))
}

/// Slack for Λ(Y, Y) = ρ(Y) when the dual point came from a grid.
fn car_identity_tol(rule: &dyn AllocationRule, y: &Position) -> Result<f64> {
    let r = rule.base().evaluate(y)?.to_f64();
    let l = rule.allocate(y, y)?.to_f64();
    Ok((r - l).abs().min(GRID_TOL * (1.0 + r.abs())))
}

/// Sampled sandwich over random aggregates.
pub fn check_sandwich(
    rule: &dyn AllocationRule,
    family: &Family,
    space: &ProbSpace,
    samples: usize,
    seed: u64,
    solver: &Solver,
) -> Result<PropertyVerdict> {
    let mut rng = sampling::rng(seed);
    for _ in 0..samples {
        let y = sampling::random_position(&mut rng, space, 3.0);
        if let Some(w) = sandwich_at(rule, family, &y, solver)? {
            return Ok(PropertyVerdict::Counterexample { witness: w });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials: samples })
}

/// Sub-allocation: under ∪ U_{Y_i} ⊇ U_Y, Λ̃(Y, Y) ≤ max_i Λ̃(Y_i, Y); if also
/// 0 ∈ U_{Y_i} for all i and Λ(0, Y) ≥ 0, then Λ̃(Y, Y) ≤ Σ_i Λ̃(Y_i, Y).
/// A failed hypothesis yields `Unknown`, not a counterexample.
pub fn check_subadditive_allocation(
    rule: &dyn AllocationRule,
    family: &Family,
    y: &Position,
    parts: &[Position],
    members: usize,
    seed: u64,
    solver: &Solver,
) -> Result<PropertyVerdict> {
    if parts.is_empty() {
        return Err(param("parts", "need at least one component"));
    }
    let mut total = y.space().constant(0.0)?;
    for p in parts {
        total = total.add(p)?;
    }
    let mismatch = total.sub(y)?.sup_norm();
    if mismatch > 1e-9 * (1.0 + y.sup_norm()) {
        return Err(param(
            "parts",
            format!("components do not sum to the aggregate (off by {mismatch:e})"),
        ));
    }
    // Union hypothesis on members of U_Y.
    let res = (family.eps() / 4.0).max(1e-3);
    let mut pts = family.discretize(y, res, members.max(1), seed)?;
    let mut rng = sampling::rng(seed);
    while pts.len() < members {
        let z = y.add(&sampling::random_position(
            &mut rng,
            y.space(),
            family.eps().max(1e-3),
        ))?;
        if family.contains(y, &z)? {
            pts.push(z);
        } else {
            pts.push(y.clone());
        }
    }
    for z in &pts {
        let mut covered = false;
        for p in parts {
            if family.contains(p, z)? {
                covered = true;
                break;
            }
        }
        if !covered {
            return Ok(PropertyVerdict::unknown(format!(
                "hypothesis failure: member {:?} of U_Y lies in no U_Yi",
                z.values()
            )));
        }
    }
    let lam_y = robust_car(rule, family, y, y, solver)?;
    let lam_parts: Vec<Estimate> = parts
        .iter()
        .map(|p| robust_car(rule, family, p, y, solver))
        .collect::<Result<_>>()?;
    let witness = || {
        let mut w = Witness::new(y.space()).with_position("y", y);
        for (i, p) in parts.iter().enumerate() {
            w = w.with_position(&format!("part_{i}"), p);
        }
        w
    };
    let max_part = lam_parts
        .iter()
        .max_by(|a, b| a.value.cmp(&b.value))
        .expect("nonempty");
    if !lam_y
        .value
        .le_tol(max_part.value, tolerance(&lam_y, max_part))
    {
        return Ok(PropertyVerdict::Counterexample {
            witness: witness().with_scalar("form_max", 1.0),
        });
    }
    let zero = y.space().constant(0.0)?;
    let mut zero_in_all = true;
    for p in parts {
        zero_in_all &= family.contains(p, &zero)?;
    }
    let zero_charge = rule.allocate(&zero, y)?;
    if zero_in_all && zero_charge >= ExtReal::Finite(-1e-12) {
        let mut sum = ExtReal::Finite(0.0);
        let mut tol = 0.0f64;
        for l in &lam_parts {
            sum = sum.checked_add(l.value).unwrap_or(ExtReal::PosInf);
            tol = tol.max(tolerance(&lam_y, l));
        }
        if !lam_y.value.le_tol(sum, tol * parts.len() as f64) {
            return Ok(PropertyVerdict::Counterexample {
                witness: witness().with_scalar("form_sum", 1.0),
            });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials: pts.len() })
}
