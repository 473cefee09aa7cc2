//! The worst-case operator ρ̃(X) = sup over U_X of ρ, its solvers, and
//! property checks on ρ̃ and on the largest family inducing it.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::measures::{eval_finite, AxiomFlags, RiskFunctional};
use crate::prob::{
    conjugate_exponent, density_norm, expectation_under, ExtReal, Position, ProbSpace,
    ScenarioMeasure,
};
use crate::sampling;
use crate::uncertainty::{check_property, lex_cmp, raise_to_level, Family, FamilyProperty};
use crate::verdict::{PropertyVerdict, Witness};

/// Which solver to run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum SolverChoice {
    /// First applicable of analytic, vertex enumeration, projected ascent.
    #[default]
    Auto,
    Analytic,
    VertexEnum,
    Grid {
        resolution: f64,
        #[serde(default = "default_budget")]
        budget: usize,
    },
    ProjectedAscent {
        #[serde(default = "default_restarts")]
        restarts: usize,
    },
}

fn default_budget() -> usize {
    4096
}

fn default_restarts() -> usize {
    32
}

/// Solver settings shared by all strategies.
#[derive(Clone, Debug, PartialEq)]
pub struct Solver {
    pub choice: SolverChoice,
    pub seed: u64,
}

impl Solver {
    pub fn auto() -> Self {
        Self {
            choice: SolverChoice::Auto,
            seed: 42,
        }
    }

    pub fn new(choice: SolverChoice, seed: u64) -> Self {
        Self { choice, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverTag {
    Analytic,
    VertexEnum,
    Grid { resolution: f64 },
    ProjectedAscent { restarts: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guarantee {
    Exact,
    LowerBound,
    UpperBound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustValue {
    pub value: ExtReal,
    pub witness: Option<Position>,
    pub solver: SolverTag,
    pub guarantee: Guarantee,
}

/// A value and how far it can be trusted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: ExtReal,
    pub guarantee: Guarantee,
}

impl Estimate {
    pub fn is_exact(&self) -> bool {
        self.guarantee == Guarantee::Exact
    }
}

impl From<&RobustValue> for Estimate {
    fn from(v: &RobustValue) -> Self {
        Estimate {
            value: v.value,
            guarantee: v.guarantee,
        }
    }
}

impl RobustValue {
    pub fn is_exact(&self) -> bool {
        self.guarantee == Guarantee::Exact
    }
}

const ASCENT_MAX_ITERS: usize = 500;
const ASCENT_MIN_STEP: f64 = 1e-7;
const PAIR_MOVES_MAX_N: usize = 8;

/// Objective sup over a family; ρ itself or any functional of Z.
pub fn robust_value(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
    solver: &Solver,
) -> Result<RobustValue> {
    match &solver.choice {
        SolverChoice::Analytic => analytic(rho, family, x)?.ok_or_else(|| {
            Error::NoSolver(format!(
                "no closed form for {} over {}",
                rho.name(),
                family.name()
            ))
        }),
        SolverChoice::VertexEnum => vertex_enum(rho, family, x)?.ok_or_else(|| {
            Error::NoSolver(format!(
                "vertex enumeration needs a quasi-convex objective over a polytope; got {} over {}",
                rho.name(),
                family.name()
            ))
        }),
        SolverChoice::Grid { resolution, budget } => {
            grid(rho, family, x, *resolution, *budget, solver.seed)
        }
        SolverChoice::ProjectedAscent { restarts } => {
            ascent(rho, family, x, *restarts, solver.seed)
        }
        SolverChoice::Auto => {
            if let Some(v) = analytic(rho, family, x)? {
                return Ok(v);
            }
            if let Some(v) = vertex_enum(rho, family, x)? {
                return Ok(v);
            }
            ascent(rho, family, x, default_restarts(), solver.seed)
        }
    }
}

fn exact(value: ExtReal, witness: Position, solver: SolverTag) -> RobustValue {
    RobustValue {
        value,
        witness: Some(witness),
        solver,
        guarantee: Guarantee::Exact,
    }
}

fn same_functional(a: &dyn RiskFunctional, b: &dyn RiskFunctional) -> bool {
    match (a.as_measure(), b.as_measure()) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

/// Shift vector δ with ‖δ‖_{L^p(P)} ≤ ε maximizing E_Q[-δ] = ε‖dQ/dP‖_q.
pub(crate) fn holder_shift(q: &ScenarioMeasure, p: f64, eps: f64) -> Result<Vec<f64>> {
    let d = q.density();
    let probs = q.space().probs();
    let n = d.len();
    if eps == 0.0 {
        return Ok(vec![0.0; n]);
    }
    if p.is_infinite() {
        return Ok(vec![-eps; n]);
    }
    if p == 1.0 {
        // All of the budget on the largest-density atom.
        let i = (0..n)
            .max_by(|&a, &b| d[a].total_cmp(&d[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let mut v = vec![0.0; n];
        v[i] = -eps / probs[i];
        return Ok(v);
    }
    let qexp = conjugate_exponent(p)?;
    let norm = density_norm(q, qexp)?;
    Ok(d.iter()
        .map(|&di| -eps * (di / norm).powf(qexp - 1.0))
        .collect())
}

/// Closed forms with exact witnesses.
fn analytic(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
) -> Result<Option<RobustValue>> {
    let flags = rho.flags();
    let tag = SolverTag::Analytic;
    if family.is_degenerate() {
        return Ok(Some(exact(rho.evaluate(x)?, x.clone(), tag)));
    }
    if let Family::WassersteinBall { eps, .. } = family {
        // W_p(Z, X) = 0 means Z has the law of X.
        if *eps == 0.0 && flags.law_invariant {
            return Ok(Some(exact(rho.evaluate(x)?, x.clone(), tag)));
        }
    }
    match family {
        Family::SupNormBall { eps } if flags.monotone => {
            // X - ε is the least element of the band.
            let z = x.shift(-eps)?;
            Ok(Some(exact(rho.evaluate(&z)?, z, tag)))
        }
        Family::PNormBall { p, eps } if flags.monotone && p.is_infinite() => {
            let z = x.shift(-eps)?;
            Ok(Some(exact(rho.evaluate(&z)?, z, tag)))
        }
        Family::Solidified(inner) if flags.monotone => match inner.as_ref() {
            Family::SupNormBall { eps } => {
                let z = x.shift(-eps)?;
                Ok(Some(exact(rho.evaluate(&z)?, z, tag)))
            }
            other => analytic(rho, other, x),
        },
        Family::LevelUpperSet { rho: level, eps } | Family::LevelBand { rho: level, eps }
            if same_functional(rho, level.as_ref()) && flags.monotone =>
        {
            let target = eval_finite(rho, x)? + eps;
            let k = if flags.cash_additive {
                Some(*eps)
            } else {
                raise_to_level(rho, x, target)?
            };
            let Some(k) = k else { return Ok(None) };
            let z = x.shift(-k)?;
            let rz = eval_finite(rho, &z)?;
            if !family.contains(x, &z)? || (rz - target).abs() > 1e-9 * (1.0 + target.abs()) {
                return Ok(None);
            }
            Ok(Some(exact(ExtReal::from(target), z, tag)))
        }
        Family::SupNormBall { eps } | Family::PNormBall { eps, .. } => {
            let p = match family {
                Family::PNormBall { p, .. } => *p,
                _ => f64::INFINITY,
            };
            let Some((q, c)) = rho.linear_form(x.space()) else {
                return Ok(None);
            };
            let delta = holder_shift(&q, p, *eps)?;
            let z = x.add(&x.with_values(delta)?)?;
            let qexp = conjugate_exponent(p)?;
            let value = -expectation_under(&q, x)? + c + eps * density_norm(&q, qexp)?;
            Ok(Some(exact(ExtReal::from(value), z, tag)))
        }
        Family::WassersteinBall { p, eps } => {
            if let Some((q, c)) = rho.linear_form(x.space()) {
                if q.is_reference() {
                    // E[-Z] ≤ E[-X] + ε for any Z within W_p distance ε.
                    let z = x.shift(-eps)?;
                    return Ok(Some(exact(
                        ExtReal::from(-crate::prob::expectation(x) + c + eps),
                        z,
                        tag,
                    )));
                }
                if x.space().is_uniform() {
                    let z = wasserstein_linear_witness(&q, x, *p, *eps)?;
                    let value = crate::prob::comonotone_expectation(&q, x)?
                        + c
                        + eps * density_norm(&q, conjugate_exponent(*p)?)?;
                    return Ok(Some(exact(ExtReal::from(value), z, tag)));
                }
                return Ok(None);
            }
            if p.is_infinite() && flags.monotone && flags.law_invariant && x.space().is_uniform() {
                let z = x.shift(-eps)?;
                return Ok(Some(exact(rho.evaluate(&z)?, z, tag)));
            }
            Ok(None)
        }
        _ => Ok(None),
    }
}

/// Rearranges X so that -X is comonotone with the density, then applies the Hölder shift.
fn wasserstein_linear_witness(
    q: &ScenarioMeasure,
    x: &Position,
    p: f64,
    eps: f64,
) -> Result<Position> {
    let n = x.n();
    let d = q.density();
    let mut by_density: Vec<usize> = (0..n).collect();
    by_density.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    let mut xs = x.values().to_vec();
    xs.sort_by(f64::total_cmp);
    let mut v = vec![0.0; n];
    for (rank, &i) in by_density.iter().enumerate() {
        v[i] = xs[rank];
    }
    let delta = holder_shift(q, p, eps)?;
    x.with_values(v.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Extreme points when U_X is a polytope on which a quasi-convex objective peaks.
fn vertex_enum(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
) -> Result<Option<RobustValue>> {
    if !rho.flags().quasi_convex {
        return Ok(None);
    }
    let n = x.n();
    let (kind, eps) = match family {
        Family::SupNormBall { eps } => (f64::INFINITY, *eps),
        Family::PNormBall { p, eps } if *p == 1.0 || p.is_infinite() => (*p, *eps),
        // On a uniform space a law-invariant objective sees the W_p ball as the L^p ball.
        Family::WassersteinBall { p, eps }
            if (*p == 1.0 || p.is_infinite())
                && rho.flags().law_invariant
                && x.space().is_uniform() =>
        {
            (*p, *eps)
        }
        _ => return Ok(None),
    };
    let probs = x.space().probs();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    if kind.is_infinite() {
        if n > 20 {
            return Err(Error::TooLarge(format!(
                "2^{n} vertices exceed the limit of 2^20"
            )));
        }
        for mask in 0u32..(1u32 << n) {
            pts.push(
                (0..n)
                    .map(|i| x.values()[i] + if mask >> i & 1 == 1 { eps } else { -eps })
                    .collect(),
            );
        }
    } else {
        for i in 0..n {
            for s in [-1.0, 1.0] {
                let mut v = x.values().to_vec();
                v[i] += s * eps / probs[i];
                pts.push(v);
            }
        }
    }
    let best = best_of(rho, pts.into_iter().map(|v| x.with_values(v)))?;
    Ok(best.map(|(value, z)| exact(value, z, SolverTag::VertexEnum)))
}

/// Largest objective value over candidates, ties to the lexicographically
/// smallest point, +inf returned at once.
fn best_of(
    rho: &dyn RiskFunctional,
    pts: impl Iterator<Item = Result<Position>>,
) -> Result<Option<(ExtReal, Position)>> {
    let mut best: Option<(ExtReal, Position)> = None;
    for z in pts {
        let z = z?;
        let v = rho.evaluate(&z)?;
        if v == ExtReal::PosInf {
            return Ok(Some((v, z)));
        }
        let better = match &best {
            None => true,
            Some((bv, bz)) => v > *bv || (v == *bv && lex_cmp(z.values(), bz.values()).is_lt()),
        };
        if better {
            best = Some((v, z));
        }
    }
    Ok(best)
}

fn grid(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
    resolution: f64,
    budget: usize,
    seed: u64,
) -> Result<RobustValue> {
    let pts = family.discretize(x, resolution, budget, seed)?;
    let (value, z) = best_of(rho, pts.into_iter().map(Ok))?.expect("discretization contains X");
    Ok(RobustValue {
        value,
        witness: Some(z),
        solver: SolverTag::Grid { resolution },
        guarantee: Guarantee::LowerBound,
    })
}

/// Pulls a trial point back into U_X.
fn retract(family: &Family, x: &Position, from: &Position, to: &Position) -> Result<Position> {
    match family {
        Family::SupNormBall { eps } => x.zip(to, |a, b| b.clamp(a - eps, a + eps)),
        Family::PNormBall { p, eps } => {
            let d: Vec<f64> = to
                .values()
                .iter()
                .zip(x.values())
                .map(|(a, b)| a - b)
                .collect();
            let norm = crate::prob::lp_norm(x.space().probs(), &d, *p);
            let s = if norm > *eps { eps / norm } else { 1.0 };
            x.with_values(
                x.values()
                    .iter()
                    .zip(&d)
                    .map(|(a, di)| a + s * di)
                    .collect(),
            )
        }
        _ => {
            if family.contains(x, to)? {
                return Ok(to.clone());
            }
            if let Some(z) = lift_onto_level(family, x, to)? {
                return Ok(z);
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if family.contains(x, &from.mix(to, 1.0 - mid)?)? {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            from.mix(to, 1.0 - lo)
        }
    }
}

/// For level families of a monotone functional, the least upward shift of `to`
/// back into the set; this keeps the search on the curved boundary.
fn lift_onto_level(family: &Family, x: &Position, to: &Position) -> Result<Option<Position>> {
    let (rho, eps) = match family {
        Family::LevelUpperSet { rho, eps } | Family::LevelBand { rho, eps }
            if rho.flags().monotone =>
        {
            (rho, *eps)
        }
        _ => return Ok(None),
    };
    let level = eval_finite(rho.as_ref(), x)? + eps;
    let f = |u: f64| -> Result<f64> { Ok(rho.evaluate(&to.shift(u)?)?.to_f64()) };
    let mut hi = 1e-3 * (1.0 + eps);
    while f(hi)? > level {
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > level {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + hi) {
            break;
        }
    }
    let z = to.shift(hi)?;
    Ok(family.contains(x, &z)?.then_some(z))
}

fn ascent(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
    restarts: usize,
    seed: u64,
) -> Result<RobustValue> {
    let restarts = restarts.max(1);
    let eps = family.eps();
    let scale = if eps > 0.0 { eps } else { 1.0 };
    let mut rng = sampling::rng(seed);
    let pool = family.discretize(x, (scale / 4.0).max(1e-3), 256, seed)?;
    // Seed with the best grid points, then random members.
    let mut scored: Vec<(ExtReal, Position)> = Vec::with_capacity(pool.len());
    for z in pool {
        let v = rho.evaluate(&z)?;
        if v == ExtReal::PosInf {
            return Ok(RobustValue {
                value: v,
                witness: Some(z),
                solver: SolverTag::ProjectedAscent { restarts },
                guarantee: Guarantee::LowerBound,
            });
        }
        scored.push((v, z));
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(lex_cmp(a.1.values(), b.1.values())));
    let mut starts: Vec<Position> = scored
        .iter()
        .take(restarts / 2 + 1)
        .map(|s| s.1.clone())
        .collect();
    while starts.len() < restarts {
        let k = rng.random_range(0..scored.len());
        starts.push(scored[k].1.clone());
    }
    // A Wasserstein ball on a uniform space is a union of balls around the
    // rearrangements of X; start from each of them when there are few.
    if matches!(family, Family::WassersteinBall { .. }) && x.space().is_uniform() && x.n() <= 6 {
        for perm in permutations(x.n()) {
            starts.push(x.with_values(perm.iter().map(|&i| x.values()[i]).collect())?);
        }
    }
    let mut candidates: Vec<Position> = scored.into_iter().map(|s| s.1).collect();
    let n = x.n();
    for start in starts {
        let mut z = start;
        let mut fz = rho.evaluate(&z)?;
        let mut step = scale;
        let mut iters = 0;
        while step >= ASCENT_MIN_STEP && iters < ASCENT_MAX_ITERS {
            iters += 1;
            let mut improved = false;
            let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(2 * n + 2);
            for i in 0..n {
                for s in [-1.0, 1.0] {
                    let mut d = vec![0.0; n];
                    d[i] = s;
                    dirs.push(d);
                }
            }
            dirs.push(vec![-1.0; n]);
            dirs.push(vec![1.0; n]);
            // Transfers between atoms, for faces where single-coordinate moves stall.
            if n <= PAIR_MOVES_MAX_N {
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            let mut d = vec![0.0; n];
                            d[i] = 1.0;
                            d[j] = -1.0;
                            dirs.push(d);
                        }
                    }
                }
            }
            for d in dirs {
                let trial = z.with_values(
                    z.values()
                        .iter()
                        .zip(&d)
                        .map(|(a, b)| a + step * b)
                        .collect(),
                )?;
                let cand = retract(family, x, &z, &trial)?;
                let fc = rho.evaluate(&cand)?;
                if fc > fz {
                    z = cand;
                    fz = fc;
                    improved = true;
                    if fz == ExtReal::PosInf {
                        break;
                    }
                }
            }
            if fz == ExtReal::PosInf {
                break;
            }
            if !improved {
                step *= 0.5;
            }
        }
        candidates.push(z);
    }
    let (value, z) = best_of(rho, candidates.into_iter().map(Ok))?.expect("nonempty candidates");
    Ok(RobustValue {
        value,
        witness: Some(z),
        solver: SolverTag::ProjectedAscent { restarts },
        guarantee: Guarantee::LowerBound,
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    heap_permute(n, &mut cur, &mut out);
    out
}

fn heap_permute(k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(cur.clone());
        return;
    }
    for i in 0..k {
        heap_permute(k - 1, cur, out);
        if k.is_multiple_of(2) {
            cur.swap(i, k - 1);
        } else {
            cur.swap(0, k - 1);
        }
    }
}

/// Z ∈ Ũ_X, the largest family inducing ρ̃: ρ(Z) ≤ ρ̃(X).
pub fn largest_family_member(
    rho: &dyn RiskFunctional,
    robust: ExtReal,
    z: &Position,
) -> Result<bool> {
    let rz = rho.evaluate(z)?;
    Ok(rz.le_tol(robust, 1e-12 * (1.0 + robust.to_f64().abs().min(1e300))))
}

/// ρ̃ as a risk functional.
#[derive(Clone, Debug)]
pub struct Robustified {
    pub rho: Arc<dyn RiskFunctional>,
    pub family: Family,
    pub solver: Solver,
}

impl Robustified {
    pub fn new(rho: Arc<dyn RiskFunctional>, family: Family, solver: Solver) -> Self {
        Self {
            rho,
            family,
            solver,
        }
    }

    pub fn solve(&self, x: &Position) -> Result<RobustValue> {
        robust_value(self.rho.as_ref(), &self.family, x, &self.solver)
    }
}

impl RiskFunctional for Robustified {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        Ok(self.solve(x)?.value)
    }

    fn flags(&self) -> AxiomFlags {
        AxiomFlags::default()
    }

    fn name(&self) -> String {
        format!("robust[{} over {}]", self.rho.name(), self.family.name())
    }
}

/// Conclusions about ρ̃ that follow from properties of ρ and the family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preserved {
    Monotone,
    Convex,
    QuasiConvex,
    ContinuousFromAbove,
    LawInvariant,
}

impl Preserved {
    pub const ALL: [Preserved; 5] = [
        Preserved::Monotone,
        Preserved::Convex,
        Preserved::QuasiConvex,
        Preserved::ContinuousFromAbove,
        Preserved::LawInvariant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preserved::Monotone => "monotone",
            Preserved::Convex => "convex",
            Preserved::QuasiConvex => "quasi_convex",
            Preserved::ContinuousFromAbove => "continuous_from_above",
            Preserved::LawInvariant => "law_invariant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Preserved::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param("property", format!("unknown preserved property {s:?}")))
    }
}

/// Trials used to validate family hypotheses before a preservation test.
const HYPOTHESIS_TRIALS: usize = 40;

fn family_has(family: &Family, prop: FamilyProperty, space: &ProbSpace, seed: u64) -> Result<bool> {
    Ok(check_property(family, prop, space, HYPOTHESIS_TRIALS, seed)?.is_positive())
}

/// Which preservation item applies, as a short label, or the reason none does.
pub fn preservation_item(
    rho: &dyn RiskFunctional,
    family: &Family,
    property: Preserved,
    space: &ProbSpace,
    seed: u64,
) -> Result<std::result::Result<&'static str, String>> {
    let f = rho.flags();
    Ok(match property {
        Preserved::Monotone => {
            if family_has(family, FamilyProperty::Monotone, space, seed)? {
                Ok("a: monotone family")
            } else if f.monotone
                && family_has(family, FamilyProperty::OrderPreserving, space, seed)?
            {
                Ok("a: order-preserving family, monotone functional")
            } else {
                Err("family neither monotone nor order preserving".into())
            }
        }
        Preserved::Convex => {
            if f.convex && family_has(family, FamilyProperty::Convex, space, seed)? {
                Ok("b: convex functional, convex family")
            } else {
                Err("needs a convex functional and a convex family".into())
            }
        }
        Preserved::QuasiConvex => {
            if f.monotone && family_has(family, FamilyProperty::CQuasiConvex, space, seed)? {
                Ok("c: c-quasi-convex family, monotone functional")
            } else if f.quasi_convex && family_has(family, FamilyProperty::Convex, space, seed)? {
                Ok("d: quasi-convex functional, convex family")
            } else {
                Err("needs a c-quasi-convex family or a quasi-convex functional with a convex family".into())
            }
        }
        Preserved::ContinuousFromAbove => {
            if f.continuous_from_above
                && family_has(family, FamilyProperty::Monotone, space, seed)?
                && family_has(family, FamilyProperty::ContinuousFromAbove, space, seed)?
            {
                Ok("e: monotone family continuous from above")
            } else {
                Err("needs a monotone family continuous from above".into())
            }
        }
        Preserved::LawInvariant => {
            if family_has(family, FamilyProperty::LawInvariant, space, seed)? {
                Ok("f: law-invariant family")
            } else {
                Err("family not law invariant".into())
            }
        }
    })
}

/// Tolerance for comparisons between two robust values.
pub fn pair_tolerance(a: &RobustValue, b: &RobustValue, grid_tol: f64) -> f64 {
    let scale = 1.0 + a.value.to_f64().abs().min(1e12) + b.value.to_f64().abs().min(1e12);
    if a.is_exact() && b.is_exact() {
        1e-9 * scale
    } else {
        grid_tol * scale
    }
}

/// Sampled test of a conclusion about ρ̃, after validating the hypotheses of
/// the item that delivers it. Fails with `Error::Hypothesis` when no item applies.
pub fn verify_preservation(
    rho: Arc<dyn RiskFunctional>,
    family: &Family,
    property: Preserved,
    space: &ProbSpace,
    trials: usize,
    seed: u64,
    solver: &Solver,
) -> Result<PropertyVerdict> {
    if trials == 0 {
        return Err(param("trials", "must be at least 1"));
    }
    if let Err(why) = preservation_item(rho.as_ref(), family, property, space, seed)? {
        return Err(Error::Hypothesis(why));
    }
    let robust = Robustified::new(rho, family.clone(), solver.clone());
    let law_space;
    let space = if property == Preserved::LawInvariant && !space.is_uniform() {
        law_space = ProbSpace::uniform(space.n())?;
        &law_space
    } else {
        space
    };
    let mut rng = sampling::rng(seed);
    for _ in 0..trials {
        let x = sampling::random_position(&mut rng, space, 3.0);
        let w = Witness::new(space).with_position("x", &x);
        let w = match property {
            Preserved::Monotone => {
                let d = sampling::random_nonnegative(&mut rng, space, 2.0);
                w.with_position("y", &x.add(&d)?)
            }
            Preserved::Convex | Preserved::QuasiConvex => {
                let y = sampling::random_position(&mut rng, space, 3.0);
                w.with_position("y", &y)
                    .with_scalar("lambda", rng.random_range(0.0..=1.0))
            }
            Preserved::ContinuousFromAbove => {
                let d = sampling::random_nonnegative(&mut rng, space, 1.0);
                w.with_position("delta", &d)
            }
            Preserved::LawInvariant => w.with_position("y", &sampling::shuffled(&mut rng, &x)),
        };
        if replay_preservation(&robust, property, &w)? {
            return Ok(PropertyVerdict::Counterexample { witness: w });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials })
}

/// Grid tolerance applied when either side is only a lower bound.
pub const GRID_TOL: f64 = 1e-5;

/// `Ok(true)` when the witness violates the conclusion for ρ̃.
pub fn replay_preservation(robust: &Robustified, property: Preserved, w: &Witness) -> Result<bool> {
    let get = |name: &str| {
        w.position(name)
            .unwrap_or_else(|| Err(Error::Hypothesis(format!("witness lacks position {name}"))))
    };
    let x = get("x")?;
    let rx = robust.solve(&x)?;
    Ok(match property {
        Preserved::Monotone => {
            let ry = robust.solve(&get("y")?)?;
            !ry.value
                .le_tol(rx.value, pair_tolerance(&rx, &ry, GRID_TOL))
        }
        Preserved::Convex | Preserved::QuasiConvex => {
            let y = get("y")?;
            let lambda = w
                .scalar("lambda")
                .ok_or_else(|| Error::Hypothesis("witness lacks lambda".into()))?;
            let ry = robust.solve(&y)?;
            let rm = robust.solve(&x.mix(&y, lambda)?)?;
            let bound = if property == Preserved::Convex {
                ExtReal::from(lambda * rx.value.to_f64() + (1.0 - lambda) * ry.value.to_f64())
            } else {
                rx.value.max(ry.value)
            };
            let tol = pair_tolerance(&rm, &rx, GRID_TOL).max(pair_tolerance(&rm, &ry, GRID_TOL));
            !rm.value.le_tol(bound, tol)
        }
        Preserved::ContinuousFromAbove => {
            let d = get("delta")?;
            let xn = x.add(&d.scale(0.5f64.powi(30))?)?;
            let rn = robust.solve(&xn)?;
            let tol = 1e-6 * (1.0 + rx.value.to_f64().abs());
            match (rx.value, rn.value) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => {
                    (a - b).abs() > tol.max(pair_tolerance(&rx, &rn, GRID_TOL))
                }
                (a, b) => a != b,
            }
        }
        Preserved::LawInvariant => {
            let y = get("y")?;
            let ry = robust.solve(&y)?;
            let tol = pair_tolerance(&rx, &ry, GRID_TOL);
            match (rx.value, ry.value) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => (a - b).abs() > tol,
                (a, b) => a != b,
            }
        }
    })
}

/// Properties of the largest family Ũ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LargestProperty {
    Solid,
    Monotone,
    QuasiConvex,
}

impl LargestProperty {
    pub const ALL: [LargestProperty; 3] = [
        LargestProperty::Solid,
        LargestProperty::Monotone,
        LargestProperty::QuasiConvex,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LargestProperty::Solid => "solid",
            LargestProperty::Monotone => "monotone",
            LargestProperty::QuasiConvex => "quasi_convex",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LargestProperty::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param("property", format!("unknown largest-family property {s:?}")))
    }
}

/// Sampled membership tests of Ũ_X = {Z : ρ(Z) ≤ ρ̃(X)}. Candidate members are
/// placed on the level boundary so the inclusions are tested where they are tight.
pub fn largest_family_properties(
    rho: Arc<dyn RiskFunctional>,
    family: &Family,
    space: &ProbSpace,
    memberships: usize,
    seed: u64,
    solver: &Solver,
) -> Result<Vec<(LargestProperty, PropertyVerdict)>> {
    let robust = Robustified::new(rho.clone(), family.clone(), solver.clone());
    let mut out = Vec::new();
    for prop in LargestProperty::ALL {
        let mut rng = sampling::substream(seed, prop as u64);
        let mut verdict = PropertyVerdict::SampledNoCounterexample {
            trials: memberships,
        };
        for _ in 0..memberships {
            let x = sampling::random_position(&mut rng, space, 3.0);
            let w = Witness::new(space).with_position("x", &x);
            let w = match prop {
                LargestProperty::Solid => {
                    let z = boundary_member(&robust, &x, &mut rng)?;
                    let k = sampling::random_nonnegative(&mut rng, space, 2.0);
                    w.with_position("z", &z).with_position("k", &k)
                }
                LargestProperty::Monotone => {
                    let d = sampling::random_nonnegative(&mut rng, space, 2.0);
                    let y = x.add(&d)?;
                    let z = boundary_member(&robust, &y, &mut rng)?;
                    w.with_position("y", &y).with_position("z", &z)
                }
                LargestProperty::QuasiConvex => {
                    let y = sampling::random_position(&mut rng, space, 3.0);
                    let lambda: f64 = rng.random_range(0.0..=1.0);
                    let z = boundary_member(&robust, &x.mix(&y, lambda)?, &mut rng)?;
                    w.with_position("y", &y)
                        .with_position("z", &z)
                        .with_scalar("lambda", lambda)
                }
            };
            if replay_largest(&robust, prop, &w)? {
                verdict = PropertyVerdict::Counterexample { witness: w };
                break;
            }
        }
        out.push((prop, verdict));
    }
    Ok(out)
}

/// A point Z with ρ(Z) at (or just under) ρ̃(X): a random position moved along 1.
fn boundary_member(
    robust: &Robustified,
    x: &Position,
    rng: &mut sampling::Rng64,
) -> Result<Position> {
    let level = robust.solve(x)?.value;
    let z0 = x.add(&sampling::random_position(rng, x.space(), 1.0))?;
    let Some(level) = level.finite() else {
        return Ok(z0);
    };
    let rho = robust.rho.as_ref();
    // Raise Z until it is a member, then lower it onto the level.
    let mut z = z0;
    let mut up = 1.0;
    while !largest_family_member(rho, ExtReal::from(level), &z)? {
        z = z.shift(up)?;
        up *= 2.0;
        if up > 1e6 {
            return Ok(z);
        }
    }
    match raise_to_level(rho, &z, level)? {
        Some(k) => {
            let cand = z.shift(-k)?;
            if largest_family_member(rho, ExtReal::from(level), &cand)? {
                Ok(cand)
            } else {
                Ok(z)
            }
        }
        None => Ok(z),
    }
}

/// `Ok(true)` when the witness violates the inclusion for Ũ.
pub fn replay_largest(robust: &Robustified, prop: LargestProperty, w: &Witness) -> Result<bool> {
    let get = |name: &str| {
        w.position(name)
            .unwrap_or_else(|| Err(Error::Hypothesis(format!("witness lacks position {name}"))))
    };
    let rho = robust.rho.as_ref();
    let x = get("x")?;
    let z = get("z")?;
    let rx = robust.solve(&x)?;
    // Lower-bound solvers may understate ρ̃; relax membership by the grid tolerance.
    let slack = |v: &RobustValue| {
        if v.is_exact() {
            0.0
        } else {
            GRID_TOL * (1.0 + v.value.to_f64().abs())
        }
    };
    let member = |v: &RobustValue, z: &Position, extra: f64| -> Result<bool> {
        largest_family_member(rho, v.value.add_f64(extra), z)
    };
    Ok(match prop {
        LargestProperty::Solid => {
            let k = get("k")?;
            member(&rx, &z, 0.0)? && !member(&rx, &z.add(&k)?, 1e-12)?
        }
        LargestProperty::Monotone => {
            let y = get("y")?;
            if !x.le(&y) {
                return Ok(false);
            }
            let ry = robust.solve(&y)?;
            let tol = pair_tolerance(&rx, &ry, GRID_TOL);
            member(&ry, &z, 0.0)? && !member(&rx, &z, tol + slack(&rx))?
        }
        LargestProperty::QuasiConvex => {
            let y = get("y")?;
            let lambda = w
                .scalar("lambda")
                .ok_or_else(|| Error::Hypothesis("witness lacks lambda".into()))?;
            let ry = robust.solve(&y)?;
            let rm = robust.solve(&x.mix(&y, lambda)?)?;
            let tol = pair_tolerance(&rm, &rx, GRID_TOL).max(pair_tolerance(&rm, &ry, GRID_TOL));
            member(&rm, &z, 0.0)?
                && !member(&rx, &z, tol + slack(&rx))?
                && !member(&ry, &z, tol + slack(&ry))?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{LossFunction, RiskMeasure};
    use approx::assert_abs_diff_eq;

    fn half() -> ProbSpace {
        ProbSpace::uniform(2).unwrap()
    }

    fn arc(r: RiskMeasure) -> Arc<dyn RiskFunctional> {
        Arc::new(r)
    }

    #[test]
    fn floor_over_band_closed_form() {
        let s = half();
        let rho = RiskMeasure::expectation_floor(1.0).unwrap();
        let f = Family::sup_norm_ball(0.1).unwrap();
        let x = s.position(vec![-0.2, -0.8]).unwrap();
        let v = robust_value(&rho, &f, &x, &Solver::auto()).unwrap();
        assert_eq!(v.value, ExtReal::Finite(1.0));
        assert!(v.is_exact());
        // Brute-force lattice over the band agrees.
        let g = robust_value(
            &rho,
            &f,
            &x,
            &Solver::new(
                SolverChoice::Grid {
                    resolution: 0.01,
                    budget: 100_000,
                },
                1,
            ),
        )
        .unwrap();
        assert_abs_diff_eq!(g.value.to_f64(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn neg_expectation_over_band() {
        let s = half();
        let x = s.position(vec![1.0, 2.0]).unwrap();
        let f = Family::sup_norm_ball(0.5).unwrap();
        let v = robust_value(&RiskMeasure::NegExpectation, &f, &x, &Solver::auto()).unwrap();
        assert_eq!(v.value, ExtReal::Finite(-1.0));
        assert_eq!(v.witness.unwrap().values(), &[0.5, 1.5]);
        let g = robust_value(
            &RiskMeasure::NegExpectation,
            &f,
            &x,
            &Solver::new(
                SolverChoice::Grid {
                    resolution: 0.05,
                    budget: 100_000,
                },
                1,
            ),
        )
        .unwrap();
        assert_eq!(g.value, ExtReal::Finite(-1.0));
        assert_eq!(g.witness.unwrap().values(), &[0.5, 1.5]);
    }

    #[test]
    fn degenerate_radius() {
        let mut rng = sampling::rng(2);
        let s = ProbSpace::uniform(3).unwrap();
        let rho = RiskMeasure::entropic(1.0).unwrap();
        for f in [
            Family::sup_norm_ball(0.0).unwrap(),
            Family::p_norm_ball(2.0, 0.0).unwrap(),
            Family::wasserstein_ball(1.0, 0.0).unwrap(),
            Family::level_upper_set(arc(rho.clone()), 0.0).unwrap(),
        ] {
            for _ in 0..20 {
                let x = sampling::random_position(&mut rng, &s, 2.0);
                let v = robust_value(&rho, &f, &x, &Solver::auto()).unwrap();
                assert_abs_diff_eq!(
                    v.value.to_f64(),
                    rho.evaluate(&x).unwrap().to_f64(),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn level_upper_set_adds_radius() {
        let s = half();
        let x = s.position(vec![0.3, -1.0]).unwrap();
        for rho in [
            RiskMeasure::entropic(1.0).unwrap(),
            RiskMeasure::expectation_floor(1.0).unwrap(),
            RiskMeasure::q_entropic(0.5, 1.0).unwrap(),
        ] {
            let f = Family::level_upper_set(arc(rho.clone()), 0.25).unwrap();
            let v = robust_value(&rho, &f, &x, &Solver::auto()).unwrap();
            assert!(v.is_exact());
            let r = rho.evaluate(&x).unwrap().to_f64();
            assert_abs_diff_eq!(v.value.to_f64(), r + 0.25, epsilon = 1e-12);
            let w = v.witness.unwrap();
            assert!(f.contains(&x, &w).unwrap());
            assert_abs_diff_eq!(rho.evaluate(&w).unwrap().to_f64(), r + 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn solvers_agree() {
        let mut rng = sampling::rng(4);
        let s = ProbSpace::uniform(2).unwrap();
        let rho = RiskMeasure::entropic(1.0).unwrap();
        for f in [
            Family::sup_norm_ball(0.3).unwrap(),
            Family::p_norm_ball(1.0, 0.3).unwrap(),
            Family::wasserstein_ball(1.0, 0.3).unwrap(),
        ] {
            for _ in 0..5 {
                let x = sampling::random_position(&mut rng, &s, 2.0);
                let exact = robust_value(&rho, &f, &x, &Solver::auto()).unwrap();
                assert!(exact.is_exact(), "{}", f.name());
                let asc = robust_value(
                    &rho,
                    &f,
                    &x,
                    &Solver::new(SolverChoice::ProjectedAscent { restarts: 8 }, 3),
                )
                .unwrap();
                assert!(
                    asc.value.to_f64() <= exact.value.to_f64() + 1e-9,
                    "{} {:?} {:?} {:?}",
                    f.name(),
                    x.values(),
                    asc,
                    exact
                );
                assert_abs_diff_eq!(asc.value.to_f64(), exact.value.to_f64(), epsilon = 1e-6);
                let g = robust_value(
                    &rho,
                    &f,
                    &x,
                    &Solver::new(
                        SolverChoice::Grid {
                            resolution: 0.01,
                            budget: 10_000,
                        },
                        3,
                    ),
                )
                .unwrap();
                assert!(g.value.to_f64() <= exact.value.to_f64() + 1e-9);
                assert_abs_diff_eq!(g.value.to_f64(), exact.value.to_f64(), epsilon = 0.02);
            }
        }
    }

    #[test]
    fn linear_forms_use_holder() {
        let s = ProbSpace::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = s.position(vec![1.0, -2.0, 0.5]).unwrap();
        let rho = RiskMeasure::NegExpectation;
        for (p, f) in [
            (2.0, Family::p_norm_ball(2.0, 0.4).unwrap()),
            (1.0, Family::p_norm_ball(1.0, 0.4).unwrap()),
            (1.0, Family::wasserstein_ball(1.0, 0.4).unwrap()),
        ] {
            let v = robust_value(&rho, &f, &x, &Solver::auto()).unwrap();
            assert!(v.is_exact(), "p={p}");
            assert_abs_diff_eq!(
                v.value.to_f64(),
                -crate::prob::expectation(&x) + 0.4,
                epsilon = 1e-12
            );
            let w = v.witness.unwrap();
            assert!(f.contains(&x, &w).unwrap());
            assert_abs_diff_eq!(
                rho.evaluate(&w).unwrap().to_f64(),
                v.value.to_f64(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn largest_family_examples() {
        let s = half();
        let x = s.position(vec![1.0, 2.0]).unwrap();
        let rho = RiskMeasure::NegExpectation;
        let v = robust_value(
            &rho,
            &Family::sup_norm_ball(0.5).unwrap(),
            &x,
            &Solver::auto(),
        )
        .unwrap();
        assert!(largest_family_member(&rho, v.value, &x).unwrap());
        assert!(largest_family_member(&rho, v.value, &x.shift(3.0).unwrap()).unwrap());
        let z = s.position(vec![0.9, 0.9]).unwrap();
        assert!(!largest_family_member(&rho, ExtReal::Finite(-1.0), &z).unwrap());
    }

    #[test]
    fn preservation_examples() {
        let s = half();
        let solver = Solver::auto();
        let floor = arc(RiskMeasure::expectation_floor(1.0).unwrap());
        let band = Family::sup_norm_ball(0.1).unwrap();
        let v = verify_preservation(
            floor.clone(),
            &band,
            Preserved::QuasiConvex,
            &s,
            300,
            1,
            &solver,
        )
        .unwrap();
        assert_eq!(v, PropertyVerdict::SampledNoCounterexample { trials: 300 });
        let v = verify_preservation(
            arc(RiskMeasure::NegExpectation),
            &band,
            Preserved::Convex,
            &s,
            300,
            1,
            &solver,
        )
        .unwrap();
        assert!(v.is_positive());
        let lus = Family::level_upper_set(floor.clone(), 0.1).unwrap();
        let v = verify_preservation(
            floor.clone(),
            &lus,
            Preserved::QuasiConvex,
            &s,
            300,
            1,
            &solver,
        )
        .unwrap();
        assert!(v.is_positive());
        // A sup-norm band is not law invariant, so item f) does not apply.
        let e = verify_preservation(floor, &band, Preserved::LawInvariant, &s, 10, 1, &solver);
        assert!(matches!(e, Err(Error::Hypothesis(_))));
    }

    #[test]
    fn largest_family_checks() {
        let s = half();
        let rho = arc(RiskMeasure::certainty_equivalent(LossFunction::Exponential));
        let f = Family::sup_norm_ball(0.2).unwrap();
        let out = largest_family_properties(rho, &f, &s, 300, 5, &Solver::auto()).unwrap();
        for (p, v) in out {
            assert!(!v.is_counterexample(), "{p:?}: {v:?}");
        }
    }

    #[test]
    fn infinite_objective_propagates() {
        #[derive(Debug)]
        struct Spike;
        impl RiskFunctional for Spike {
            fn evaluate(&self, x: &Position) -> Result<ExtReal> {
                Ok(if x.values()[0] < 0.0 {
                    ExtReal::PosInf
                } else {
                    ExtReal::Finite(0.0)
                })
            }
            fn flags(&self) -> AxiomFlags {
                AxiomFlags::default()
            }
            fn name(&self) -> String {
                "spike".into()
            }
        }
        let s = half();
        let x = s.position(vec![0.05, 0.0]).unwrap();
        let f = Family::sup_norm_ball(0.1).unwrap();
        let v = robust_value(
            &Spike,
            &f,
            &x,
            &Solver::new(
                SolverChoice::Grid {
                    resolution: 0.05,
                    budget: 100,
                },
                1,
            ),
        )
        .unwrap();
        assert_eq!(v.value, ExtReal::PosInf);
        assert!(v.witness.unwrap().values()[0] < 0.0);
    }
}
