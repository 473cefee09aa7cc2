//! Families of uncertainty sets X ↦ U_X, their discretizations, and property checkers.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::measures::{eval_finite, RiskFunctional};
use crate::prob::{lp_norm, quantile_function, wasserstein_distance, Position, ProbSpace};
use crate::sampling::{self, Rng64};
use crate::verdict::{PropertyVerdict, Witness};

/// Three-valued answer for questions that are not always decidable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Yes,
    No,
    Unknown,
}

impl Decision {
    fn from_bool(b: bool) -> Self {
        if b {
            Decision::Yes
        } else {
            Decision::No
        }
    }
}

/// A family of uncertainty sets.
#[derive(Clone)]
pub enum Family {
    SupNormBall {
        eps: f64,
    },
    PNormBall {
        p: f64,
        eps: f64,
    },
    WassersteinBall {
        p: f64,
        eps: f64,
    },
    LevelBand {
        rho: Arc<dyn RiskFunctional>,
        eps: f64,
    },
    LevelUpperSet {
        rho: Arc<dyn RiskFunctional>,
        eps: f64,
    },
    /// U_X + L₊ for the inner family.
    Solidified(Box<Family>),
}

impl fmt::Debug for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(param(
            "eps",
            format!("radius must be finite and nonnegative, got {eps}"),
        ));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if p.is_nan() || p < 1.0 {
        return Err(param("p", format!("order must lie in [1, inf], got {p}")));
    }
    Ok(())
}

fn check_level_rho(rho: &dyn RiskFunctional) -> Result<()> {
    let f = rho.flags();
    if !f.quasi_convex || !f.cash_subadditive {
        return Err(Error::Hypothesis(format!(
            "level families need a quasi-convex, cash-subadditive functional; {} is not",
            rho.name()
        )));
    }
    Ok(())
}

/// Family properties that can be checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyProperty {
    Monotone,
    OrderPreserving,
    Convex,
    QuasiConvex,
    CQuasiConvex,
    Solid,
    LawInvariant,
    CashInvariant,
    ContinuousFromAbove,
}

impl FamilyProperty {
    pub const ALL: [FamilyProperty; 9] = [
        FamilyProperty::Monotone,
        FamilyProperty::OrderPreserving,
        FamilyProperty::Convex,
        FamilyProperty::QuasiConvex,
        FamilyProperty::CQuasiConvex,
        FamilyProperty::Solid,
        FamilyProperty::LawInvariant,
        FamilyProperty::CashInvariant,
        FamilyProperty::ContinuousFromAbove,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FamilyProperty::Monotone => "monotone",
            FamilyProperty::OrderPreserving => "order_preserving",
            FamilyProperty::Convex => "convex",
            FamilyProperty::QuasiConvex => "quasi_convex",
            FamilyProperty::CQuasiConvex => "c_quasi_convex",
            FamilyProperty::Solid => "solid",
            FamilyProperty::LawInvariant => "law_invariant",
            FamilyProperty::CashInvariant => "cash_invariant",
            FamilyProperty::ContinuousFromAbove => "continuous_from_above",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FamilyProperty::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| param("property", format!("unknown family property {s:?}")))
    }
}

fn member_tol(x: &Position, eps: f64) -> f64 {
    1e-12 * (1.0 + x.sup_norm() + eps)
}

impl Family {
    pub fn sup_norm_ball(eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(Family::SupNormBall { eps })
    }

    pub fn p_norm_ball(p: f64, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        check_p(p)?;
        Ok(Family::PNormBall { p, eps })
    }

    pub fn wasserstein_ball(p: f64, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        check_p(p)?;
        Ok(Family::WassersteinBall { p, eps })
    }

    pub fn level_band(rho: Arc<dyn RiskFunctional>, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        check_level_rho(rho.as_ref())?;
        Ok(Family::LevelBand { rho, eps })
    }

    pub fn level_upper_set(rho: Arc<dyn RiskFunctional>, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        check_level_rho(rho.as_ref())?;
        Ok(Family::LevelUpperSet { rho, eps })
    }

    pub fn name(&self) -> String {
        match self {
            Family::SupNormBall { eps } => format!("sup_norm_ball(eps={eps})"),
            Family::PNormBall { p, eps } => format!("p_norm_ball(p={p}, eps={eps})"),
            Family::WassersteinBall { p, eps } => format!("wasserstein_ball(p={p}, eps={eps})"),
            Family::LevelBand { rho, eps } => format!("level_band({}, eps={eps})", rho.name()),
            Family::LevelUpperSet { rho, eps } => {
                format!("level_upper_set({}, eps={eps})", rho.name())
            }
            Family::Solidified(inner) => format!("solidified({})", inner.name()),
        }
    }

    pub fn eps(&self) -> f64 {
        match self {
            Family::SupNormBall { eps }
            | Family::PNormBall { eps, .. }
            | Family::WassersteinBall { eps, .. }
            | Family::LevelBand { eps, .. }
            | Family::LevelUpperSet { eps, .. } => *eps,
            Family::Solidified(inner) => inner.eps(),
        }
    }

    /// Same descriptor with a different radius.
    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        Ok(match self {
            Family::SupNormBall { .. } => Family::SupNormBall { eps },
            Family::PNormBall { p, .. } => Family::PNormBall { p: *p, eps },
            Family::WassersteinBall { p, .. } => Family::WassersteinBall { p: *p, eps },
            Family::LevelBand { rho, .. } => Family::LevelBand {
                rho: rho.clone(),
                eps,
            },
            Family::LevelUpperSet { rho, .. } => Family::LevelUpperSet {
                rho: rho.clone(),
                eps,
            },
            Family::Solidified(inner) => Family::Solidified(Box::new(inner.with_eps(eps)?)),
        })
    }

    /// True when U_X = {X} for every X.
    pub fn is_degenerate(&self) -> bool {
        match self {
            Family::SupNormBall { eps } | Family::PNormBall { eps, .. } => *eps == 0.0,
            _ => false,
        }
    }

    /// Membership Z ∈ U_X.
    pub fn contains(&self, x: &Position, z: &Position) -> Result<bool> {
        match self.decide(x, z)? {
            Decision::Yes => Ok(true),
            Decision::No => Ok(false),
            Decision::Unknown => Err(Error::NoSolver(format!(
                "membership in {} is undecided for this space",
                self.name()
            ))),
        }
    }

    fn decide(&self, x: &Position, z: &Position) -> Result<Decision> {
        x.check_same(z)?;
        let tol = member_tol(x, self.eps()) + member_tol(z, 0.0);
        let b = match self {
            Family::SupNormBall { eps } => sup_dist(x, z) <= eps + tol,
            Family::PNormBall { p, eps } => {
                let d: Vec<f64> = diff(z, x);
                lp_norm(x.space().probs(), &d, *p) <= eps + tol
            }
            Family::WassersteinBall { p, eps } => wasserstein_distance(x, z, *p)? <= eps + tol,
            Family::LevelBand { rho, eps } => {
                let rz = rho.evaluate(z)?;
                let rx = eval_finite(rho.as_ref(), x)?;
                match rz.finite() {
                    Some(v) => (v - rx).abs() <= eps + tol * (1.0 + rx.abs()),
                    None => false,
                }
            }
            Family::LevelUpperSet { rho, eps } => {
                let rz = rho.evaluate(z)?;
                let rx = eval_finite(rho.as_ref(), x)?;
                rz.le_tol((rx + eps).into(), tol * (1.0 + rx.abs()))
            }
            Family::Solidified(inner) => return inner.upper_closure_contains(x, z),
        };
        Ok(Decision::from_bool(b))
    }

    /// Decides Z ∈ U_X + L₊, i.e. whether some member of U_X lies below Z.
    pub fn upper_closure_contains(&self, x: &Position, z: &Position) -> Result<Decision> {
        x.check_same(z)?;
        let tol = member_tol(x, self.eps()) + member_tol(z, 0.0);
        Ok(match self {
            Family::SupNormBall { eps } => Decision::from_bool(
                x.values()
                    .iter()
                    .zip(z.values())
                    .all(|(a, b)| *b >= a - eps - tol),
            ),
            Family::PNormBall { p, eps } => {
                let neg: Vec<f64> = diff(z, x).iter().map(|d| (-d).max(0.0)).collect();
                Decision::from_bool(lp_norm(x.space().probs(), &neg, *p) <= eps + tol)
            }
            Family::WassersteinBall { p, eps } => wasserstein_upper_closure(x, z, *p, *eps, tol)?,
            Family::LevelUpperSet { rho, .. } if rho.flags().monotone => self.decide(x, z)?,
            Family::LevelUpperSet { .. } => Decision::Unknown,
            Family::LevelBand { rho, eps } => {
                if !rho.flags().monotone {
                    return Ok(Decision::Unknown);
                }
                let rx = eval_finite(rho.as_ref(), x)?;
                let tol = tol * (1.0 + rx.abs());
                let rz = rho.evaluate(z)?.to_f64();
                if rz > rx + eps + tol {
                    Decision::No
                } else if rz >= rx - eps - tol {
                    Decision::Yes
                } else {
                    // ρ(Z - k) rises with k; look for a k that lands in the band.
                    let target = rx - eps;
                    match raise_to_level(rho.as_ref(), z, target)? {
                        Some(k) => {
                            let v = eval_finite(rho.as_ref(), &z.shift(-k)?)?;
                            Decision::from_bool((v - rx).abs() <= eps + tol)
                        }
                        None => Decision::Unknown,
                    }
                }
            }
            Family::Solidified(inner) => inner.upper_closure_contains(x, z)?,
        })
    }

    /// Nonnegative violation of the membership Z ∈ U_X, zero for members.
    pub fn membership_gap(&self, x: &Position, z: &Position) -> Result<f64> {
        x.check_same(z)?;
        Ok(match self {
            Family::SupNormBall { eps } => (sup_dist(x, z) - eps).max(0.0),
            Family::PNormBall { p, eps } => {
                (lp_norm(x.space().probs(), &diff(z, x), *p) - eps).max(0.0)
            }
            Family::WassersteinBall { p, eps } => (wasserstein_distance(x, z, *p)? - eps).max(0.0),
            Family::LevelBand { rho, eps } => {
                let rz = eval_finite(rho.as_ref(), z)?;
                let rx = eval_finite(rho.as_ref(), x)?;
                ((rz - rx).abs() - eps).max(0.0)
            }
            Family::LevelUpperSet { rho, eps } => {
                let rz = eval_finite(rho.as_ref(), z)?;
                let rx = eval_finite(rho.as_ref(), x)?;
                (rz - rx - eps).max(0.0)
            }
            Family::Solidified(inner) => inner.upper_closure_gap(x, z)?,
        })
    }

    /// Violation of Z ∈ U_X + L₊; a lower bound where the closure is not exact.
    fn upper_closure_gap(&self, x: &Position, z: &Position) -> Result<f64> {
        Ok(match self {
            Family::SupNormBall { eps } => x
                .values()
                .iter()
                .zip(z.values())
                .map(|(a, b)| a - eps - b)
                .fold(0.0, f64::max),
            Family::PNormBall { p, eps } => {
                let neg: Vec<f64> = diff(z, x).iter().map(|d| (-d).max(0.0)).collect();
                (lp_norm(x.space().probs(), &neg, *p) - eps).max(0.0)
            }
            Family::WassersteinBall { p, eps } => (quantile_shortfall(x, z, *p) - eps).max(0.0),
            Family::LevelUpperSet { .. } => self.membership_gap(x, z)?,
            Family::LevelBand { rho, eps } => {
                let rz = eval_finite(rho.as_ref(), z)?;
                let rx = eval_finite(rho.as_ref(), x)?;
                (rz - rx - eps).max(0.0)
            }
            Family::Solidified(inner) => inner.upper_closure_gap(x, z)?,
        })
    }

    /// Finite subset of U_X for solvers. `resolution` is the lattice step of
    /// ball families; `budget` caps the number of lattice or random points.
    pub fn discretize(
        &self,
        x: &Position,
        resolution: f64,
        budget: usize,
        seed: u64,
    ) -> Result<Vec<Position>> {
        if resolution.is_nan() || resolution <= 0.0 {
            return Err(param("resolution", "must be positive"));
        }
        let mut rng = sampling::rng(seed);
        let mut out = match self {
            Family::SupNormBall { eps } => {
                let r = vec![*eps; x.n()];
                let mut pts = box_lattice(x, &r, resolution, budget, &mut rng)?;
                if x.n() <= 16 {
                    pts.extend(box_vertices(x, &r)?);
                }
                pts
            }
            Family::PNormBall { p, eps } => {
                let r = p_ball_box(x.space(), *p, *eps);
                let mut pts = box_lattice(x, &r, resolution, budget, &mut rng)?;
                if p.is_infinite() && x.n() <= 16 {
                    pts.extend(box_vertices(x, &r)?);
                }
                pts.extend(axis_points(x, &r)?);
                pts
            }
            Family::WassersteinBall { p, eps } => {
                wasserstein_points(x, *p, *eps, resolution, budget, &mut rng)?
            }
            Family::LevelBand { .. } | Family::LevelUpperSet { .. } => {
                self.level_points(x, budget, &mut rng)?
            }
            Family::Solidified(inner) => {
                let base = inner.discretize(x, resolution, budget, seed)?;
                let mut pts = base.clone();
                let eps = inner.eps().max(resolution);
                for z in base.iter().take(budget.max(1)) {
                    let k = sampling::random_nonnegative(&mut rng, x.space(), 2.0 * eps);
                    pts.push(z.add(&k)?);
                }
                // Raising keeps membership in the solidified family by construction.
                pts.push(x.clone());
                return Ok(dedup(pts));
            }
        };
        out.push(x.clone());
        out.push(x.shift(self.eps())?);
        out.push(x.shift(-self.eps())?);
        let mut kept = Vec::with_capacity(out.len());
        for z in out {
            if self.contains(x, &z)? {
                kept.push(z);
            }
        }
        Ok(dedup(kept))
    }

    fn level_points(&self, x: &Position, budget: usize, rng: &mut Rng64) -> Result<Vec<Position>> {
        let (rho, eps, band) = match self {
            Family::LevelBand { rho, eps } => (rho.as_ref(), *eps, true),
            Family::LevelUpperSet { rho, eps } => (rho.as_ref(), *eps, false),
            _ => unreachable!(),
        };
        let rx = eval_finite(rho, x)?;
        let mut pts = vec![x.clone()];
        // Downward line X - k·1 up to the upper level boundary.
        if let Some(k) = raise_to_level(rho, x, rx + eps)? {
            let lo = self.boundary_along(x, &vec![-1.0; x.n()], k)?;
            let steps = 8;
            for j in 0..=steps {
                pts.push(x.shift(-lo * j as f64 / steps as f64)?);
            }
        }
        // Upward line X + k·1.
        let up = if band {
            self.boundary_along(x, &vec![1.0; x.n()], 1.0)?
        } else {
            4.0 * (eps + 1.0)
        };
        for j in 1..=4 {
            pts.push(x.shift(up * j as f64 / 4.0)?);
        }
        let n_dirs = budget.clamp(1, 256);
        for _ in 0..n_dirs {
            let d = sampling::random_direction(rng, x.n());
            let t = self.boundary_along(x, &d, 1.0)?;
            let frac: f64 = rng.random_range(0.0..=1.0);
            pts.push(along(x, &d, t)?);
            pts.push(along(x, &d, t * frac)?);
        }
        Ok(pts)
    }

    /// Largest t (up to bisection accuracy) with X + t·d a member, starting
    /// from a trial length and doubling while still inside.
    fn boundary_along(&self, x: &Position, d: &[f64], start: f64) -> Result<f64> {
        let mut hi = start.max(1e-6);
        let mut lo = 0.0;
        let mut grown = 0;
        while self.contains(x, &along(x, d, hi)?)? {
            lo = hi;
            hi *= 2.0;
            grown += 1;
            if grown > 40 {
                return Ok(lo);
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.contains(x, &along(x, d, mid)?)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(lo)
    }
}

fn diff(a: &Position, b: &Position) -> Vec<f64> {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x - y)
        .collect()
}

fn sup_dist(a: &Position, b: &Position) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn along(x: &Position, d: &[f64], t: f64) -> Result<Position> {
    x.with_values(x.values().iter().zip(d).map(|(v, di)| v + t * di).collect())
}

/// Smallest k ≥ 0 (to bisection accuracy) with ρ(Z - k) ≥ target, assuming
/// ρ(Z - k) is nondecreasing in k. `None` when no such k is found below 1e6.
pub(crate) fn raise_to_level(
    rho: &dyn RiskFunctional,
    z: &Position,
    target: f64,
) -> Result<Option<f64>> {
    let f = |k: f64| -> Result<f64> { Ok(rho.evaluate(&z.shift(-k)?)?.to_f64()) };
    if f(0.0)? >= target {
        return Ok(Some(0.0));
    }
    let mut hi = 1.0;
    while f(hi)? < target {
        hi *= 2.0;
        if hi > 1e6 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + hi) {
            break;
        }
    }
    Ok(Some(hi))
}

/// ‖(F⁻¹_X - F⁻¹_Z)⁺‖_p: the least Wasserstein distance from X to a law
/// dominated by that of Z.
fn quantile_shortfall(x: &Position, z: &Position, p: f64) -> f64 {
    let qx = quantile_function(x);
    let qz = quantile_function(z);
    let mut cuts: Vec<f64> = qx
        .cumulative()
        .iter()
        .chain(qz.cumulative())
        .copied()
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut prev = 0.0;
    let mut acc: f64 = 0.0;
    for c in cuts {
        if c <= prev {
            continue;
        }
        let u = 0.5 * (prev + c);
        let g = (qx.eval(u) - qz.eval(u)).max(0.0);
        if p.is_infinite() {
            acc = acc.max(g);
        } else {
            acc += (c - prev) * g.powf(p);
        }
        prev = c;
    }
    if p.is_infinite() {
        acc
    } else {
        acc.powf(1.0 / p)
    }
}

fn wasserstein_upper_closure(
    x: &Position,
    z: &Position,
    p: f64,
    eps: f64,
    tol: f64,
) -> Result<Decision> {
    if quantile_shortfall(x, z, p) > eps + tol {
        return Ok(Decision::No);
    }
    // Constructive candidates W ≤ Z: pointwise min with X, and on uniform
    // spaces min with the rank-matched rearrangement of X.
    let w = x.zip(z, f64::min)?;
    if wasserstein_distance(x, &w, p)? <= eps + tol {
        return Ok(Decision::Yes);
    }
    if x.space().is_uniform() {
        let w = z.with_values(rank_matched_min(x, z))?;
        return Ok(Decision::from_bool(
            wasserstein_distance(x, &w, p)? <= eps + tol,
        ));
    }
    Ok(Decision::Unknown)
}

/// W_i = min(Z_i, X_(rank of Z_i)) with X sorted to follow the order of Z.
fn rank_matched_min(x: &Position, z: &Position) -> Vec<f64> {
    let mut xs = x.values().to_vec();
    xs.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..z.n()).collect();
    order.sort_by(|&a, &b| z.values()[a].total_cmp(&z.values()[b]).then(a.cmp(&b)));
    let mut w = vec![0.0; z.n()];
    for (rank, &i) in order.iter().enumerate() {
        w[i] = z.values()[i].min(xs[rank]);
    }
    w
}

/// Per-atom half-widths of the box [X - r, X + r] bounding the L^p(P) ball.
fn p_ball_box(space: &ProbSpace, p: f64, eps: f64) -> Vec<f64> {
    space
        .probs()
        .iter()
        .map(|&pi| {
            if p.is_infinite() {
                eps
            } else {
                eps / pi.powf(1.0 / p)
            }
        })
        .collect()
}

fn box_lattice(
    x: &Position,
    r: &[f64],
    h: f64,
    budget: usize,
    rng: &mut Rng64,
) -> Result<Vec<Position>> {
    let n = x.n();
    let counts: Vec<usize> = r
        .iter()
        .map(|ri| (2.0 * ri / h).floor() as usize + 1)
        .collect();
    let coord = |i: usize, k: usize| -> f64 {
        if counts[i] == 1 {
            x.values()[i]
        } else {
            x.values()[i] - r[i] + 2.0 * r[i] * k as f64 / (counts[i] - 1) as f64
        }
    };
    let total = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c));
    let mut pts = Vec::new();
    match total {
        Some(t) if t <= budget => {
            let mut idx = vec![0usize; n];
            loop {
                pts.push(x.with_values((0..n).map(|i| coord(i, idx[i])).collect())?);
                let mut i = 0;
                loop {
                    if i == n {
                        return Ok(pts);
                    }
                    idx[i] += 1;
                    if idx[i] < counts[i] {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
            }
        }
        _ => {
            for _ in 0..budget {
                let v = (0..n)
                    .map(|i| coord(i, rng.random_range(0..counts[i])))
                    .collect();
                pts.push(x.with_values(v)?);
            }
            Ok(pts)
        }
    }
}

fn box_vertices(x: &Position, r: &[f64]) -> Result<Vec<Position>> {
    let n = x.n();
    let mut out = Vec::with_capacity(1 << n);
    for mask in 0u32..(1u32 << n) {
        let v = (0..n)
            .map(|i| {
                let s = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                x.values()[i] + s * r[i]
            })
            .collect();
        out.push(x.with_values(v)?);
    }
    Ok(out)
}

fn axis_points(x: &Position, r: &[f64]) -> Result<Vec<Position>> {
    let mut out = Vec::with_capacity(2 * x.n());
    for i in 0..x.n() {
        for s in [-1.0, 1.0] {
            let mut v = x.values().to_vec();
            v[i] += s * r[i];
            out.push(x.with_values(v)?);
        }
    }
    Ok(out)
}

fn wasserstein_points(
    x: &Position,
    p: f64,
    eps: f64,
    h: f64,
    budget: usize,
    rng: &mut Rng64,
) -> Result<Vec<Position>> {
    // X + δ with ‖δ‖_p ≤ ε stays within W_p distance ε; rearrangements of
    // these keep their law when atoms share a probability.
    let r = p_ball_box(x.space(), p, eps);
    let mut pts = box_lattice(x, &r, h, budget, rng)?;
    pts.extend(axis_points(x, &r)?);
    if p.is_infinite() && x.n() <= 16 {
        pts.extend(box_vertices(x, &r)?);
    }
    // Mass moved onto the worst atom.
    let worst = (0..x.n())
        .min_by(|&a, &b| x.values()[a].total_cmp(&x.values()[b]))
        .unwrap_or(0);
    let mut v = x.values().to_vec();
    v[worst] -= r[worst];
    pts.push(x.with_values(v)?);
    let base = pts.len();
    for k in 0..base.min(budget) {
        let z = pts[k].clone();
        pts.push(sampling::shuffled(rng, &z));
    }
    pts.push(sampling::shuffled(rng, x));
    Ok(pts)
}

fn dedup(mut pts: Vec<Position>) -> Vec<Position> {
    pts.sort_by(|a, b| lex_cmp(a.values(), b.values()));
    pts.dedup_by(|a, b| a.values() == b.values());
    pts
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Solidification U_X ↦ U_X + L₊. Already-solid level upper sets are returned unchanged.
pub fn solidify(family: &Family) -> Family {
    match family {
        Family::LevelUpperSet { rho, .. } if rho.flags().monotone => family.clone(),
        Family::Solidified(_) => family.clone(),
        other => Family::Solidified(Box::new(other.clone())),
    }
}

/// Outcome of one sampled trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Trial {
    Holds,
    Violated,
    Inconclusive,
}

fn decision_member(family: &Family, x: &Position, z: &Position) -> Result<Decision> {
    family.decide(x, z)
}

/// Checks a family property: certified where an argument is coded for the
/// descriptor, otherwise by sampled falsification with replayable witnesses.
pub fn check_property(
    family: &Family,
    property: FamilyProperty,
    space: &ProbSpace,
    trials: usize,
    seed: u64,
) -> Result<PropertyVerdict> {
    if trials == 0 {
        return Err(param("trials", "must be at least 1"));
    }
    if let Some(reason) = certificate(family, property, space) {
        return Ok(PropertyVerdict::certified(reason));
    }
    let law_space;
    let space = if property == FamilyProperty::LawInvariant && !has_tied_atoms(space) {
        law_space = ProbSpace::uniform(space.n())?;
        &law_space
    } else {
        space
    };
    let mut rng = sampling::rng(seed);
    let mut inconclusive = 0usize;
    let mut conclusive = 0usize;
    if let Some(w) = canonical_witness(family, property, space)? {
        match judge(family, property, &w)? {
            Trial::Violated => return Ok(PropertyVerdict::Counterexample { witness: w }),
            Trial::Inconclusive => inconclusive += 1,
            Trial::Holds => conclusive += 1,
        }
    }
    let eps = family.eps();
    let scale = 3.0f64.max(10.0 * eps);
    for t in 0..trials {
        let x = sampling::random_position(&mut rng, space, scale);
        let trial_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(t as u64);
        let candidates = |centre: &Position, rng: &mut Rng64| -> Result<Vec<Position>> {
            let mut pts = family.discretize(centre, (eps / 2.0).max(1e-3), 16, trial_seed)?;
            // Random members along random rays keep the sample from collapsing onto the lattice.
            let d = sampling::random_direction(rng, centre.n());
            if let Ok(z) = along(centre, &d, eps * rng.random_range(0.0..=1.0)) {
                if family.contains(centre, &z).unwrap_or(false) {
                    pts.push(z);
                }
            }
            Ok(pts)
        };
        let mut witnesses = Vec::new();
        let base = Witness::new(space).with_position("x", &x);
        match property {
            FamilyProperty::Monotone | FamilyProperty::OrderPreserving => {
                let d = sampling::random_nonnegative(&mut rng, space, scale / 2.0);
                let y = x.add(&d)?;
                for z in candidates(&y, &mut rng)? {
                    witnesses.push(base.clone().with_position("y", &y).with_position("z", &z));
                }
            }
            FamilyProperty::Convex | FamilyProperty::QuasiConvex | FamilyProperty::CQuasiConvex => {
                let y = sampling::random_position(&mut rng, space, scale);
                let lambda: f64 = rng.random_range(0.0..=1.0);
                let m = x.mix(&y, lambda)?;
                for z in candidates(&m, &mut rng)? {
                    witnesses.push(
                        base.clone()
                            .with_position("y", &y)
                            .with_position("z", &z)
                            .with_scalar("lambda", lambda),
                    );
                }
            }
            FamilyProperty::Solid => {
                for z in candidates(&x, &mut rng)? {
                    let k = sampling::random_nonnegative(&mut rng, space, scale);
                    witnesses.push(base.clone().with_position("z", &z).with_position("k", &k));
                }
            }
            FamilyProperty::LawInvariant => {
                let x2 = law_preserving_shuffle(&mut rng, &x);
                let mut zs = candidates(&x, &mut rng)?;
                zs.extend(candidates(&x2, &mut rng)?);
                for z in zs {
                    witnesses.push(base.clone().with_position("x2", &x2).with_position("z", &z));
                }
            }
            FamilyProperty::CashInvariant => {
                let c: f64 = rng.random_range(-scale..=scale);
                for z in candidates(&x, &mut rng)? {
                    witnesses.push(base.clone().with_position("z", &z).with_scalar("c", c));
                }
                let xc = x.shift(c)?;
                for zc in candidates(&xc, &mut rng)? {
                    witnesses.push(
                        base.clone()
                            .with_position("z", &zc.shift(-c)?)
                            .with_scalar("c", c),
                    );
                }
            }
            FamilyProperty::ContinuousFromAbove => {
                let d = sampling::random_nonnegative(&mut rng, space, 1.0);
                for z in candidates(&x, &mut rng)? {
                    witnesses.push(
                        base.clone()
                            .with_position("delta", &d)
                            .with_position("z", &z),
                    );
                }
            }
        }
        for w in witnesses {
            match judge(family, property, &w)? {
                Trial::Violated => return Ok(PropertyVerdict::Counterexample { witness: w }),
                Trial::Inconclusive => inconclusive += 1,
                Trial::Holds => conclusive += 1,
            }
        }
    }
    if inconclusive > 0 {
        return Ok(PropertyVerdict::unknown(format!(
            "{inconclusive} of {} sampled cases undecided; no counterexample found",
            inconclusive + conclusive
        )));
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials })
}

fn has_tied_atoms(space: &ProbSpace) -> bool {
    let p = space.probs();
    (0..p.len()).any(|i| (i + 1..p.len()).any(|j| (p[i] - p[j]).abs() <= 1e-15))
}

/// Permutes values only among atoms of equal probability, which keeps the law.
fn law_preserving_shuffle(rng: &mut Rng64, x: &Position) -> Position {
    use rand::seq::SliceRandom;
    let p = x.space().probs();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..p.len() {
        match groups.iter_mut().find(|g| (p[g[0]] - p[i]).abs() <= 1e-15) {
            Some(g) => g.push(i),
            None => groups.push(vec![i]),
        }
    }
    let mut v = x.values().to_vec();
    for g in groups {
        let mut vals: Vec<f64> = g.iter().map(|&i| x.values()[i]).collect();
        vals.shuffle(rng);
        for (k, &i) in g.iter().enumerate() {
            v[i] = vals[k];
        }
    }
    x.with_values(v).expect("permutation of finite values")
}

/// Replays a stored witness; `Ok(true)` when it violates the property.
pub fn replay_property(family: &Family, property: FamilyProperty, w: &Witness) -> Result<bool> {
    Ok(judge(family, property, w)? == Trial::Violated)
}

fn witness_position(w: &Witness, name: &str) -> Result<Position> {
    w.position(name)
        .unwrap_or_else(|| Err(Error::Hypothesis(format!("witness lacks position {name}"))))
}

fn witness_scalar(w: &Witness, name: &str) -> Result<f64> {
    w.scalar(name)
        .ok_or_else(|| Error::Hypothesis(format!("witness lacks scalar {name}")))
}

fn judge(family: &Family, property: FamilyProperty, w: &Witness) -> Result<Trial> {
    let x = witness_position(w, "x")?;
    let member = |a: &Position, b: &Position| decision_member(family, a, b);
    Ok(match property {
        FamilyProperty::Monotone => {
            let y = witness_position(w, "y")?;
            let z = witness_position(w, "z")?;
            if !x.le(&y) {
                return Ok(Trial::Holds);
            }
            match (member(&y, &z)?, member(&x, &z)?) {
                (Decision::Yes, Decision::No) => Trial::Violated,
                (Decision::Unknown, _) | (Decision::Yes, Decision::Unknown) => Trial::Inconclusive,
                _ => Trial::Holds,
            }
        }
        FamilyProperty::OrderPreserving => {
            let y = witness_position(w, "y")?;
            let z = witness_position(w, "z")?;
            if !x.le(&y) {
                return Ok(Trial::Holds);
            }
            match member(&y, &z)? {
                Decision::Yes => match family.upper_closure_contains(&x, &z)? {
                    Decision::Yes => Trial::Holds,
                    Decision::No => Trial::Violated,
                    Decision::Unknown => Trial::Inconclusive,
                },
                Decision::No => Trial::Holds,
                Decision::Unknown => Trial::Inconclusive,
            }
        }
        FamilyProperty::QuasiConvex | FamilyProperty::CQuasiConvex | FamilyProperty::Convex => {
            let y = witness_position(w, "y")?;
            let z = witness_position(w, "z")?;
            let lambda = witness_scalar(w, "lambda")?;
            let m = x.mix(&y, lambda)?;
            match member(&m, &z)? {
                Decision::No => return Ok(Trial::Holds),
                Decision::Unknown => return Ok(Trial::Inconclusive),
                Decision::Yes => {}
            }
            match property {
                FamilyProperty::QuasiConvex => match (member(&x, &z)?, member(&y, &z)?) {
                    (Decision::Yes, _) | (_, Decision::Yes) => Trial::Holds,
                    (Decision::No, Decision::No) => Trial::Violated,
                    _ => Trial::Inconclusive,
                },
                FamilyProperty::CQuasiConvex => {
                    match (
                        family.upper_closure_contains(&x, &z)?,
                        family.upper_closure_contains(&y, &z)?,
                    ) {
                        (Decision::Yes, _) | (_, Decision::Yes) => Trial::Holds,
                        (Decision::No, Decision::No) => Trial::Violated,
                        _ => Trial::Inconclusive,
                    }
                }
                _ => {
                    if decompose(family, &x, &y, lambda, &z)? {
                        Trial::Holds
                    } else {
                        Trial::Inconclusive
                    }
                }
            }
        }
        FamilyProperty::Solid => {
            let z = witness_position(w, "z")?;
            let k = witness_position(w, "k")?;
            if k.values().iter().any(|v| *v < 0.0) {
                return Ok(Trial::Holds);
            }
            let zb = z.add(&k)?;
            match (member(&x, &z)?, member(&x, &zb)?) {
                (Decision::Yes, Decision::No) => Trial::Violated,
                (Decision::Yes, Decision::Yes) | (Decision::No, _) => Trial::Holds,
                _ => Trial::Inconclusive,
            }
        }
        FamilyProperty::LawInvariant => {
            let x2 = witness_position(w, "x2")?;
            let z = witness_position(w, "z")?;
            if !crate::prob::same_distribution(&x, &x2) {
                return Ok(Trial::Holds);
            }
            match (member(&x, &z)?, member(&x2, &z)?) {
                (Decision::Unknown, _) | (_, Decision::Unknown) => Trial::Inconclusive,
                (a, b) if a == b => Trial::Holds,
                _ => Trial::Violated,
            }
        }
        FamilyProperty::CashInvariant => {
            let z = witness_position(w, "z")?;
            let c = witness_scalar(w, "c")?;
            match (member(&x, &z)?, member(&x.shift(c)?, &z.shift(c)?)?) {
                (Decision::Unknown, _) | (_, Decision::Unknown) => Trial::Inconclusive,
                (a, b) if a == b => Trial::Holds,
                // Both sides are evaluated in floating point; ignore disagreements
                // that vanish under a tiny relaxation.
                _ => {
                    let g1 = family.membership_gap(&x, &z)?;
                    let g2 = family.membership_gap(&x.shift(c)?, &z.shift(c)?)?;
                    if g1.max(g2) <= 1e-9 * (1.0 + c.abs() + x.sup_norm()) {
                        Trial::Holds
                    } else {
                        Trial::Violated
                    }
                }
            }
        }
        FamilyProperty::ContinuousFromAbove => {
            let d = witness_position(w, "delta")?;
            let z = witness_position(w, "z")?;
            if d.values().iter().any(|v| *v < 0.0) {
                return Ok(Trial::Holds);
            }
            match member(&x, &z)? {
                Decision::No => return Ok(Trial::Holds),
                Decision::Unknown => return Ok(Trial::Inconclusive),
                Decision::Yes => {}
            }
            // Z must lie in the closure of ∪ U_{X + 2^{-n} Δ}.
            let mut best = f64::INFINITY;
            for n in 0..=40 {
                let xn = along(&x, d.values(), 0.5f64.powi(n))?;
                best = best.min(family.membership_gap(&xn, &z)?);
            }
            let tol = 1e-9 * (1.0 + x.sup_norm() + z.sup_norm());
            if best <= tol {
                Trial::Holds
            } else {
                Trial::Violated
            }
        }
    })
}

/// Tries to write Z = λ Z₁ + (1 - λ) Z₂ with Z₁ ∈ U_X, Z₂ ∈ U_Y.
fn decompose(
    family: &Family,
    x: &Position,
    y: &Position,
    lambda: f64,
    z: &Position,
) -> Result<bool> {
    let m = x.mix(y, lambda)?;
    let z1 = z.add(&x.sub(&m)?)?;
    let z2 = z.add(&y.sub(&m)?)?;
    let ok = |a: &Position, b: &Position| -> Result<bool> {
        Ok(family.decide(x, a)? == Decision::Yes && family.decide(y, b)? == Decision::Yes)
    };
    if lambda <= 0.0 || lambda >= 1.0 {
        return Ok(true);
    }
    if ok(&z1, &z2)? {
        return Ok(true);
    }
    // Constant offsets: Z₁ = B₁ + a, Z₂ = B₂ - λa/(1-λ) keep the mixture fixed.
    let r = lambda / (1.0 - lambda);
    for (b1, b2) in [(z.clone(), z.clone()), (z1, z2)] {
        let span =
            4.0 * (1.0 + x.sup_norm() + y.sup_norm() + family.eps()) / lambda.min(1.0 - lambda);
        let steps = 400;
        for j in 0..=steps {
            let a = -span + 2.0 * span * j as f64 / steps as f64;
            if ok(&b1.shift(a)?, &b2.shift(-r * a)?)? {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// First trial for the inclusion properties: the translated-ball example
/// X = 0, Y = 10s, λ = 1/2, Z = 5s + ε/2 for quasi-convexity, and the
/// mirrored pair X = (0, 10s), Y = (10s, 0), Z = 5s - ε/2 for c-quasi-convexity.
fn canonical_witness(
    family: &Family,
    property: FamilyProperty,
    space: &ProbSpace,
) -> Result<Option<Witness>> {
    let eps = family.eps();
    let s = if eps > 0.0 { eps } else { 1.0 };
    let (x, y, z) = match property {
        FamilyProperty::QuasiConvex => (
            space.constant(0.0)?,
            space.constant(10.0 * s)?,
            space.constant(5.0 * s + eps / 2.0)?,
        ),
        FamilyProperty::CQuasiConvex if space.n() >= 2 => {
            let mut xv = vec![0.0; space.n()];
            let mut yv = vec![0.0; space.n()];
            xv[1] = 10.0 * s;
            yv[0] = 10.0 * s;
            let x = space.position(xv)?;
            let y = space.position(yv)?;
            let z = x.mix(&y, 0.5)?.shift(-eps / 2.0)?;
            (x, y, z)
        }
        _ => return Ok(None),
    };
    let m = x.mix(&y, 0.5)?;
    if family.decide(&m, &z)? != Decision::Yes {
        return Ok(None);
    }
    Ok(Some(
        Witness::new(space)
            .with_position("x", &x)
            .with_position("y", &y)
            .with_position("z", &z)
            .with_scalar("lambda", 0.5),
    ))
}

/// Closed-form arguments coded per descriptor.
fn certificate(family: &Family, property: FamilyProperty, space: &ProbSpace) -> Option<String> {
    use FamilyProperty::*;
    let reason = match (family, property) {
        (Family::SupNormBall { .. } | Family::PNormBall { .. }, Convex) => {
            "Z = λ(Z + X - M) + (1-λ)(Z + Y - M) with both parts translated from Z ∈ U_M"
        }
        (Family::SupNormBall { .. } | Family::PNormBall { .. }, OrderPreserving) => {
            "X' = Y' - (Y - X) lies in U_X and below Y'"
        }
        (Family::SupNormBall { .. } | Family::PNormBall { .. }, CashInvariant) => {
            "translated balls satisfy U_{X+c} = U_X + c"
        }
        (Family::WassersteinBall { .. }, LawInvariant) => "membership depends only on the law of X",
        (Family::WassersteinBall { .. }, CashInvariant) => {
            "Wasserstein distance is invariant under common translation"
        }
        (Family::WassersteinBall { .. }, Convex) if space.is_uniform() => {
            "on a uniform space every law is a rearrangement; the quantile-coupled split is a member of each ball"
        }
        (Family::WassersteinBall { .. }, OrderPreserving) if space.is_uniform() => {
            "X' built on the ranks of Y' from F_X^{-1} + F_{Y'}^{-1} - F_Y^{-1} lies below Y' within distance ε of X"
        }
        (Family::LevelUpperSet { rho, .. }, Solid | Monotone | OrderPreserving)
            if rho.flags().monotone =>
        {
            "monotone level functional"
        }
        (Family::LevelUpperSet { rho, .. }, QuasiConvex | CQuasiConvex)
            if rho.flags().quasi_convex =>
        {
            "U_M is the lower level set at ρ(M) + ε ≤ max(ρ(X), ρ(Y)) + ε"
        }
        (Family::LevelUpperSet { rho, .. }, LawInvariant) if rho.flags().law_invariant => {
            "law-invariant level functional"
        }
        (Family::LevelUpperSet { rho, .. } | Family::LevelBand { rho, .. }, CashInvariant)
            if rho.flags().cash_additive =>
        {
            "cash-additive level functional shifts the level by -c"
        }
        (Family::LevelBand { rho, .. }, LawInvariant) if rho.flags().law_invariant => {
            "law-invariant level functional"
        }
        (Family::LevelUpperSet { rho, .. }, Convex)
            if rho.flags().convex && rho.flags().cash_additive =>
        {
            "constant offsets split Z since ρ(Z) ≤ λρ(X) + (1-λ)ρ(Y) + ε"
        }
        (Family::LevelBand { rho, .. }, CQuasiConvex)
            if rho.flags().monotone && rho.flags().quasi_convex && rho.flags().cash_additive =>
        {
            "1-D scan: ρ(Z - k) = ρ(Z) + k reaches the band of the worse of X, Y for some k ≥ 0"
        }
        (Family::Solidified(_), Solid) => "U_X + L₊ is upward closed",
        _ => return None,
    };
    Some(reason.to_string())
}
