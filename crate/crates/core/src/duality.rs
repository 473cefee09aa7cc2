//! Support functions, penalties, penalty-type surfaces and numeric checks of
//! the dual representations of ρ and ρ̃.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::measures::{eval_finite, AxiomFlags, LossFunction, RiskFunctional};
use crate::prob::{
    comonotone_expectation, conjugate_exponent, density_norm, expectation_under, relative_entropy,
    ExtReal, Position, ProbSpace, ScenarioMeasure,
};
use crate::robust::{robust_value, Estimate, Guarantee, Solver};
use crate::sampling;
use crate::uncertainty::{check_property, lex_cmp, Family, FamilyProperty};
use crate::verdict::{PropertyVerdict, Witness};

/// Finite cover of the probability simplex.
#[derive(Clone, Debug)]
pub struct SimplexGrid {
    space: ProbSpace,
    step: f64,
    points: Vec<ScenarioMeasure>,
    masses: Vec<Vec<f64>>,
}

/// Lattice dimension limit; larger spaces use a random sample.
const LATTICE_MAX_N: usize = 3;

impl SimplexGrid {
    /// Lattice with mass step `step` for n ≤ 3, otherwise `sample` Dirichlet(1) draws.
    pub fn new(space: &ProbSpace, step: f64, sample: usize, seed: u64) -> Result<Self> {
        if !(step > 0.0 && step <= 1.0) {
            return Err(param("step", format!("must lie in (0, 1], got {step}")));
        }
        let m = (1.0 / step).round();
        if (m * step - 1.0).abs() > 1e-9 {
            return Err(param(
                "step",
                format!("1/step must be an integer, got step {step}"),
            ));
        }
        let n = space.n();
        let mut masses: Vec<Vec<f64>> = Vec::new();
        if n <= LATTICE_MAX_N {
            let m = m as usize;
            let mut k = vec![0usize; n];
            lattice_compositions(&mut k, 0, m, &mut |k| {
                masses.push(k.iter().map(|&ki| ki as f64 / m as f64).collect());
            });
        } else {
            let mut rng = sampling::rng(seed);
            for i in 0..n {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                masses.push(v);
            }
            for _ in 0..sample {
                masses.push(sampling::simplex_point(&mut rng, n));
            }
        }
        masses.push(space.probs().to_vec());
        masses.sort_by(|a, b| lex_cmp(a, b));
        masses.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= 1e-15));
        let points = masses
            .iter()
            .map(|m| ScenarioMeasure::from_masses(space.clone(), m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            space: space.clone(),
            step,
            points,
            masses,
        })
    }

    pub fn space(&self) -> &ProbSpace {
        &self.space
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn points(&self) -> &[ScenarioMeasure] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn lattice_compositions(k: &mut Vec<usize>, i: usize, left: usize, out: &mut dyn FnMut(&[usize])) {
    if i + 1 == k.len() {
        k[i] = left;
        out(k);
        return;
    }
    for v in 0..=left {
        k[i] = v;
        lattice_compositions(k, i + 1, left - v, out);
    }
}

/// E_Q[-Z] as a functional of Z.
#[derive(Clone, Debug)]
pub struct ScenarioLoss {
    pub q: ScenarioMeasure,
}

impl RiskFunctional for ScenarioLoss {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        Ok(ExtReal::from(-expectation_under(&self.q, x)?))
    }

    fn flags(&self) -> AxiomFlags {
        AxiomFlags {
            monotone: true,
            convex: true,
            quasi_convex: true,
            cash_additive: true,
            cash_subadditive: true,
            law_invariant: self.q.is_reference(),
            continuous_from_above: true,
        }
    }

    fn name(&self) -> String {
        "scenario_loss".into()
    }

    fn linear_form(&self, space: &ProbSpace) -> Option<(ScenarioMeasure, f64)> {
        (self.q.space() == space).then(|| (self.q.clone(), 0.0))
    }
}

fn ball_exponent(family: &Family) -> Option<f64> {
    match family {
        Family::SupNormBall { .. } => Some(f64::INFINITY),
        Family::PNormBall { p, .. } | Family::WassersteinBall { p, .. } => Some(*p),
        _ => None,
    }
}

/// φ_Q(X) = sup over U_X of E_Q[-Z].
pub fn support_function(family: &Family, q: &ScenarioMeasure, x: &Position) -> Result<Estimate> {
    q.check_space(x)?;
    let exact = |v: f64| Estimate {
        value: ExtReal::from(v),
        guarantee: Guarantee::Exact,
    };
    match family {
        Family::SupNormBall { eps } => Ok(exact(-expectation_under(q, x)? + eps)),
        Family::PNormBall { p, eps } => Ok(exact(
            -expectation_under(q, x)? + eps * density_norm(q, conjugate_exponent(*p)?)?,
        )),
        Family::WassersteinBall { p, eps } => {
            let v = comonotone_expectation(q, x)? + eps * density_norm(q, conjugate_exponent(*p)?)?;
            // Exact when every rearrangement of X is available on the space.
            let guarantee = if x.space().is_uniform() || q.is_reference() {
                Guarantee::Exact
            } else {
                Guarantee::UpperBound
            };
            Ok(Estimate {
                value: ExtReal::from(v),
                guarantee,
            })
        }
        Family::LevelUpperSet { rho, eps } | Family::LevelBand { rho, eps }
            if rho.flags().convex && rho.flags().cash_additive && rho.penalty(q).is_some() =>
        {
            let c = rho.penalty(q).expect("checked");
            let v = ExtReal::from(eval_finite(rho.as_ref(), x)? + eps).checked_add(c)?;
            Ok(Estimate {
                value: v,
                guarantee: Guarantee::Exact,
            })
        }
        // Adding a positive payoff only lowers E_Q[-Z].
        Family::Solidified(inner) => support_function(inner, q, x),
        _ => {
            let v = robust_value(&ScenarioLoss { q: q.clone() }, family, x, &Solver::auto())?;
            Ok(Estimate {
                value: v.value,
                guarantee: v.guarantee,
            })
        }
    }
}

/// X ↦ φ_Q(X) as a functional.
#[derive(Clone, Debug)]
pub struct SupportFunctional {
    pub family: Family,
    pub q: ScenarioMeasure,
}

impl RiskFunctional for SupportFunctional {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        Ok(support_function(&self.family, &self.q, x)?.value)
    }

    fn flags(&self) -> AxiomFlags {
        AxiomFlags {
            convex: true,
            quasi_convex: true,
            cash_additive: true,
            cash_subadditive: true,
            ..AxiomFlags::default()
        }
    }

    fn name(&self) -> String {
        format!("support[{}]", self.family.name())
    }

    fn penalty(&self, qt: &ScenarioMeasure) -> Option<ExtReal> {
        support_penalty(&self.family, &self.q, qt)
    }
}

/// Closed-form c_{φ_Q}(Q̃) where the support function is known exactly.
pub fn support_penalty(
    family: &Family,
    q: &ScenarioMeasure,
    qt: &ScenarioMeasure,
) -> Option<ExtReal> {
    let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);
    match family {
        Family::SupNormBall { eps } | Family::PNormBall { eps, .. } => {
            let p = ball_exponent(family)?;
            Some(if same(q.density(), qt.density()) {
                ExtReal::from(-eps * density_norm(q, conjugate_exponent(p).ok()?).ok()?)
            } else {
                ExtReal::PosInf
            })
        }
        Family::WassersteinBall { p, eps } if q.space().is_uniform() => {
            let mut a = q.density().to_vec();
            let mut b = qt.density().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            Some(if same(&a, &b) {
                ExtReal::from(-eps * density_norm(q, conjugate_exponent(*p).ok()?).ok()?)
            } else {
                ExtReal::PosInf
            })
        }
        Family::LevelUpperSet { rho, eps } | Family::LevelBand { rho, eps }
            if rho.flags().convex && rho.flags().cash_additive =>
        {
            let c = rho.penalty(q)?;
            let ct = rho.penalty(qt)?;
            let c = c.finite()?;
            Some(ct.add_f64(-eps - c))
        }
        Family::Solidified(inner) => support_penalty(inner, q, qt),
        _ => None,
    }
}

/// c_ρ(Q) with its guarantee.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyValue {
    pub value: ExtReal,
    pub guarantee: Guarantee,
}

/// Lattice points above which a numeric penalty search refuses to run.
const LATTICE_BUDGET: usize = 4_000_000;

/// c_ρ(Q) = sup_X E_Q[-X] - ρ(X): closed form when the functional has one,
/// otherwise the numeric search of [`minimal_penalty_numeric`].
pub fn minimal_penalty(
    rho: &dyn RiskFunctional,
    q: &ScenarioMeasure,
    bound: f64,
    step: f64,
) -> Result<PenaltyValue> {
    if let Some(c) = rho.penalty(q) {
        return Ok(PenaltyValue {
            value: c,
            guarantee: Guarantee::Exact,
        });
    }
    minimal_penalty_numeric(rho, q, bound, step)
}

/// Lattice sup over [-B, B]ⁿ with step h, polished by pattern search; reported
/// +∞ when the sup keeps growing across the boxes B, 2B, 4B.
pub fn minimal_penalty_numeric(
    rho: &dyn RiskFunctional,
    q: &ScenarioMeasure,
    bound: f64,
    step: f64,
) -> Result<PenaltyValue> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(param("bound", format!("must be positive, got {bound}")));
    }
    if !(step > 0.0 && step <= bound) {
        return Err(param("step", format!("must lie in (0, bound], got {step}")));
    }
    let space = q.space().clone();
    let objective = |v: &[f64]| -> Result<f64> {
        let z = space.position(v.to_vec())?;
        let r = rho.evaluate(&z)?;
        Ok(match r {
            ExtReal::Finite(r) => -expectation_under(q, &z)? - r,
            ExtReal::PosInf => f64::NEG_INFINITY,
            ExtReal::NegInf => f64::INFINITY,
        })
    };
    // Cash-additive functionals are invariant along 1; pin one coordinate.
    let pin = rho.flags().cash_additive;
    let box_sup = |b: f64, h: f64| -> Result<(f64, Vec<f64>)> {
        let mut best = (f64::NEG_INFINITY, vec![0.0; space.n()]);
        lattice_points(space.n(), b, h, pin, &mut |v| {
            let f = objective(v)?;
            if f > best.0 {
                best = (f, v.to_vec());
            }
            Ok(())
        })?;
        Ok(best)
    };
    let (s1, x1) = box_sup(bound, step)?;
    let (s2, _) = box_sup(2.0 * bound, 2.0 * step)?;
    let (s4, _) = box_sup(4.0 * bound, 4.0 * step)?;
    if s1 == f64::INFINITY {
        return Ok(PenaltyValue {
            value: ExtReal::PosInf,
            guarantee: Guarantee::Exact,
        });
    }
    let (d1, d2) = (s2 - s1, s4 - s2);
    if d2 > 1e-9 && d2 >= 1.5 * d1 {
        return Ok(PenaltyValue {
            value: ExtReal::PosInf,
            guarantee: Guarantee::LowerBound,
        });
    }
    let polished = pattern_search(&x1, step, |v| objective(v))?;
    Ok(PenaltyValue {
        value: ExtReal::from(polished.0.max(s1)),
        guarantee: Guarantee::LowerBound,
    })
}

fn lattice_points(
    n: usize,
    bound: f64,
    h: f64,
    pin_first: bool,
    f: &mut dyn FnMut(&[f64]) -> Result<()>,
) -> Result<()> {
    let per = (2.0 * bound / h).round() as usize + 1;
    let free = if pin_first { n.saturating_sub(1) } else { n };
    let total = (per as f64).powi(free as i32);
    if total > LATTICE_BUDGET as f64 {
        return Err(Error::TooLarge(format!("{total:.0} lattice points")));
    }
    let mut idx = vec![0usize; free];
    let mut v = vec![0.0; n];
    loop {
        let off = n - free;
        for (j, &k) in idx.iter().enumerate() {
            v[off + j] = -bound + k as f64 * h;
        }
        f(&v)?;
        let mut j = 0;
        loop {
            if j == free {
                return Ok(());
            }
            idx[j] += 1;
            if idx[j] < per {
                break;
            }
            idx[j] = 0;
            j += 1;
        }
    }
}

/// Coordinate pattern search maximizing `f` from `start`.
fn pattern_search(
    start: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut x = start.to_vec();
    let mut fx = f(&x)?;
    let mut h = step;
    let n = x.len();
    let mut evals = 0;
    while h > 1e-10 && evals < 200_000 {
        let mut improved = false;
        for i in 0..n {
            for s in [-1.0, 1.0] {
                let mut y = x.clone();
                y[i] += s * h;
                let fy = f(&y)?;
                evals += 1;
                if fy > fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok((fx, x))
}

/// How a penalty-type surface R(t, Q) is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Infimum over a lattice on the hyperplane E_Q[-Y] = t plus anchors.
    /// `None` picks the default box and step from the query.
    BruteForce {
        bound: Option<f64>,
        step: Option<f64>,
    },
    /// t - c_ρ(Q).
    CashAdditiveClosedForm,
    /// R_ℓ(t, Q).
    LossClosedForm { loss: LossFunction },
}

/// R(t, Q) = inf { ρ(Y) : E_Q[-Y] = t }.
#[derive(Clone, Debug)]
pub struct PenaltySurface {
    rho: Arc<dyn RiskFunctional>,
    kind: PenaltyKind,
    anchors: Vec<Position>,
}

/// Builds the surface, checking that the requested kind fits the functional.
pub fn penalty_type(rho: Arc<dyn RiskFunctional>, kind: PenaltyKind) -> Result<PenaltySurface> {
    match &kind {
        PenaltyKind::CashAdditiveClosedForm => {
            if !rho.flags().cash_additive {
                return Err(Error::Hypothesis(format!(
                    "{} is not cash additive",
                    rho.name()
                )));
            }
        }
        PenaltyKind::BruteForce { bound, step } => {
            if let Some(b) = bound {
                if !(*b > 0.0 && b.is_finite()) {
                    return Err(param("bound", format!("must be positive, got {b}")));
                }
            }
            if let Some(h) = step {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(param("step", format!("must be positive, got {h}")));
                }
            }
        }
        PenaltyKind::LossClosedForm { .. } => {}
    }
    Ok(PenaltySurface {
        rho,
        kind,
        anchors: Vec::new(),
    })
}

impl PenaltySurface {
    pub fn with_anchors(mut self, anchors: Vec<Position>) -> Self {
        self.anchors = anchors;
        self
    }

    pub fn kind(&self) -> &PenaltyKind {
        &self.kind
    }

    pub fn rho(&self) -> &Arc<dyn RiskFunctional> {
        &self.rho
    }

    pub fn anchors(&self) -> &[Position] {
        &self.anchors
    }

    pub fn is_closed_form(&self) -> bool {
        !matches!(self.kind, PenaltyKind::BruteForce { .. })
    }

    pub fn evaluate(&self, t: f64, q: &ScenarioMeasure) -> Result<ExtReal> {
        if !t.is_finite() {
            return Err(param("t", "must be finite"));
        }
        match &self.kind {
            PenaltyKind::CashAdditiveClosedForm => {
                let c = minimal_penalty(
                    self.rho.as_ref(),
                    q,
                    10.0 * (t.abs() + 1.0),
                    (t.abs() + 1.0) / 5.0,
                )?;
                Ok(match c.value {
                    ExtReal::Finite(c) => ExtReal::from(t - c),
                    ExtReal::PosInf => ExtReal::NegInf,
                    ExtReal::NegInf => ExtReal::PosInf,
                })
            }
            PenaltyKind::LossClosedForm { loss } => loss_penalty(*loss, t, q),
            PenaltyKind::BruteForce { bound, step } => self.brute_force(t, q, *bound, *step),
        }
    }

    fn brute_force(
        &self,
        t: f64,
        q: &ScenarioMeasure,
        bound: Option<f64>,
        step: Option<f64>,
    ) -> Result<ExtReal> {
        let space = q.space();
        let n = space.n();
        let scale = self.anchors.iter().fold(0.0f64, |m, a| m.max(a.sup_norm()));
        let b = bound.unwrap_or(10.0 * (scale + t.abs() + 1.0));
        let h = step.unwrap_or(b / 50.0);
        let masses = q.masses();
        let seen: Vec<usize> = (0..n).filter(|&i| masses[i] > 0.0).collect();
        let mut best = ExtReal::PosInf;
        for a in &self.anchors {
            if a.space() != space {
                return Err(Error::SpaceMismatch);
            }
            let ta = -expectation_under(q, a)?;
            if (ta - t).abs() <= 1e-9 * (1.0 + t.abs()) {
                best = best.min(self.rho.evaluate(a)?);
            }
        }
        let free = seen.len().saturating_sub(1);
        let per = (2.0 * b / h).round() as usize + 1;
        if (per as f64).powi(free as i32) > LATTICE_BUDGET as f64 {
            return Err(Error::TooLarge(format!("{per}^{free} lattice points")));
        }
        let mut idx = vec![0usize; free];
        let mut y = vec![b; n];
        loop {
            // First seen atom pinned at 0, others on the lattice, then shifted onto the hyperplane.
            y[seen[0]] = 0.0;
            for (j, &k) in idx.iter().enumerate() {
                y[seen[j + 1]] = -b + k as f64 * h;
            }
            let mean: f64 = seen.iter().map(|&i| masses[i] * y[i]).sum();
            let c = -t - mean;
            let mut v = y.clone();
            for &i in &seen {
                v[i] += c;
            }
            let z = space.position(v)?;
            best = best.min(self.rho.evaluate(&z)?);
            let mut j = 0;
            loop {
                if j == free {
                    return Ok(best);
                }
                idx[j] += 1;
                if idx[j] < per {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
        }
    }
}

/// R_ℓ(t, Q) = ℓ⁻¹( max_{x ≥ 0} { x t - E_P[ℓ*(x dQ/dP)] } ); closed form
/// for the exponential and linear losses.
pub fn loss_penalty(loss: LossFunction, t: f64, q: &ScenarioMeasure) -> Result<ExtReal> {
    match loss {
        LossFunction::Exponential => Ok(ExtReal::from(t - relative_entropy(q).to_f64())),
        LossFunction::Linear => Ok(if q.is_reference() {
            ExtReal::from(t)
        } else {
            ExtReal::NegInf
        }),
        LossFunction::Softplus => loss_penalty_numeric(loss, t, q),
    }
}

/// Golden-section maximization of the inner concave problem.
pub fn loss_penalty_numeric(loss: LossFunction, t: f64, q: &ScenarioMeasure) -> Result<ExtReal> {
    let d = q.density();
    let probs = q.space().probs();
    let (lo, hi) = loss.conj_domain();
    // x-range on which every x·d_i stays in the conjugate's domain.
    let (mut xlo, mut xhi) = (0.0f64, f64::INFINITY);
    for &di in d {
        if di == 0.0 {
            if lo > 0.0 || hi < 0.0 {
                return Ok(ExtReal::NegInf);
            }
        } else {
            xlo = xlo.max(lo / di);
            xhi = xhi.min(hi / di);
        }
    }
    if xlo > xhi * (1.0 + 1e-12) {
        return Ok(ExtReal::NegInf);
    }
    let g = |x: f64| -> f64 {
        let mut s = 0.0;
        for (p, &di) in probs.iter().zip(d) {
            match loss.ell_conj((x * di).clamp(lo, hi)) {
                ExtReal::Finite(v) => s += p * v,
                _ => return f64::NEG_INFINITY,
            }
        }
        x * t - s
    };
    if (xhi - xlo).abs() <= 1e-12 * (1.0 + xlo) {
        return Ok(loss.ell_inv(g(xlo)));
    }
    let mut b = if xhi.is_finite() { xhi } else { xlo.max(1.0) };
    if !xhi.is_finite() {
        while g(2.0 * b) > g(b) {
            b *= 2.0;
            if b > 1e12 {
                return Ok(ExtReal::PosInf);
            }
        }
        b *= 2.0;
    }
    let (mut a, mut c) = (xlo, b);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = c - r * (c - a);
    let mut x2 = a + r * (c - a);
    let (mut f1, mut f2) = (g(x1), g(x2));
    for _ in 0..200 {
        if (c - a) <= 1e-14 * (1.0 + c.abs()) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (c - a);
            f2 = g(x2);
        } else {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - r * (c - a);
            f1 = g(x1);
        }
    }
    let best = [g(xlo), f1, f2, g(b)]
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(loss.ell_inv(best))
}

/// Outcome of a dual-representation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub verifier: String,
    /// ρ(X) or ρ̃(X).
    pub primal: ExtReal,
    pub primal_guarantee: Guarantee,
    /// Max of the dual objective over the grid.
    pub grid_dual: ExtReal,
    /// The grid max polished by pattern search on the simplex.
    pub dual: ExtReal,
    pub grid_gap: ExtReal,
    pub gap: ExtReal,
    pub step: f64,
    /// Masses of the maximizing scenario measure.
    pub argmax: Vec<f64>,
    pub surface: String,
}

impl GapReport {
    pub fn abs_gap(&self) -> f64 {
        self.gap.to_f64().abs()
    }
}

fn gap(primal: ExtReal, dual: ExtReal) -> Result<ExtReal> {
    match (primal, dual) {
        (ExtReal::Finite(a), ExtReal::Finite(b)) => Ok(ExtReal::from(a - b)),
        (a, b) if a == b => Ok(ExtReal::Finite(0.0)),
        (a, _) if a.is_finite() => Ok(-dual),
        (a, _) => Ok(a),
    }
}

fn surface_label(s: &PenaltySurface) -> String {
    match s.kind() {
        PenaltyKind::BruteForce { .. } => "brute_force".into(),
        PenaltyKind::CashAdditiveClosedForm => "cash_additive_closed_form".into(),
        PenaltyKind::LossClosedForm { loss } => format!("loss_closed_form({})", loss.name()),
    }
}

/// Pattern search over the simplex by pairwise mass transfers.
pub(crate) fn refine_simplex(
    space: &ProbSpace,
    start: &[f64],
    step: f64,
    f: &mut dyn FnMut(&ScenarioMeasure) -> Result<ExtReal>,
) -> Result<(ExtReal, Vec<f64>)> {
    let n = start.len();
    let mut m = start.to_vec();
    let mut fm = f(&ScenarioMeasure::from_masses(space.clone(), &m)?)?;
    let mut h = step;
    let mut evals = 0usize;
    while h > 1e-10 && evals < 50_000 {
        let mut improved = false;
        for i in 0..n {
            for j in 0..n {
                if i == j || m[i] <= 0.0 {
                    continue;
                }
                let mv = h.min(m[i]);
                let mut y = m.clone();
                y[i] -= mv;
                y[j] += mv;
                if y[i] < 1e-300 {
                    y[i] = 0.0;
                }
                let fy = f(&ScenarioMeasure::from_masses(space.clone(), &y)?)?;
                evals += 1;
                if fy > fm {
                    m = y;
                    fm = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    Ok((fm, m))
}

/// Starting points for refinement: the few best grid points.
const REFINE_STARTS: usize = 3;

fn max_with_refinement(
    grid: &SimplexGrid,
    f: &mut dyn FnMut(&ScenarioMeasure) -> Result<ExtReal>,
) -> Result<(ExtReal, ExtReal, Vec<f64>)> {
    let mut scored: Vec<(ExtReal, usize)> = Vec::with_capacity(grid.len());
    for (i, q) in grid.points().iter().enumerate() {
        scored.push((f(q)?, i));
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let grid_best = scored[0].0;
    let mut best = (grid_best, grid.masses[scored[0].1].clone());
    if !grid_best.is_finite() {
        return Ok((grid_best, grid_best, best.1));
    }
    for &(_, i) in scored.iter().take(REFINE_STARTS) {
        let (v, m) = refine_simplex(grid.space(), &grid.masses[i], grid.step(), f)?;
        if v > best.0 {
            best = (v, m);
        }
    }
    Ok((grid_best, best.0, best.1))
}

/// ρ(X) against max over the grid of R(E_Q[-X], Q). Brute-force surfaces get X as an anchor.
pub fn verify_primal_dual(
    rho: Arc<dyn RiskFunctional>,
    x: &Position,
    grid: &SimplexGrid,
    surface: &PenaltySurface,
) -> Result<GapReport> {
    let f = rho.flags();
    if !(f.monotone && f.quasi_convex && f.continuous_from_above) {
        return Err(Error::Hypothesis(format!(
            "{} must be monotone, quasi-convex and continuous from above",
            rho.name()
        )));
    }
    let mut anchors = surface.anchors().to_vec();
    anchors.push(x.clone());
    let surf = surface.clone().with_anchors(anchors);
    let primal = rho.evaluate(x)?;
    let mut obj = |q: &ScenarioMeasure| surf.evaluate(-expectation_under(q, x)?, q);
    let (grid_dual, dual, argmax) = max_with_refinement(grid, &mut obj)?;
    Ok(GapReport {
        verifier: "primal_dual".into(),
        primal,
        primal_guarantee: Guarantee::Exact,
        grid_dual,
        dual,
        grid_gap: gap(primal, grid_dual)?,
        gap: gap(primal, dual)?,
        step: grid.step(),
        argmax,
        surface: surface_label(surface),
    })
}

fn require_family(
    family: &Family,
    prop: FamilyProperty,
    space: &ProbSpace,
    strict: bool,
) -> Result<()> {
    let v = check_property(family, prop, space, 40, 7)?;
    let ok = if strict {
        v.is_positive()
    } else {
        !v.is_counterexample()
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Hypothesis(format!(
            "{} is not {} ({})",
            family.name(),
            prop.name(),
            v.label()
        )))
    }
}

/// ρ̃(X) against max over the grid of R(φ_Q(X), Q). The surface picks between the
/// general form (R_ρ) and the certainty-equivalent form (R_ℓ).
pub fn verify_robust_dual(
    rho: Arc<dyn RiskFunctional>,
    family: &Family,
    x: &Position,
    grid: &SimplexGrid,
    surface: &PenaltySurface,
) -> Result<GapReport> {
    let f = rho.flags();
    if !(f.quasi_convex && f.cash_subadditive && f.continuous_from_above) {
        return Err(Error::Hypothesis(format!(
            "{} must be quasi-convex, cash-subadditive and continuous from above",
            rho.name()
        )));
    }
    require_family(family, FamilyProperty::Convex, x.space(), true)?;
    let robust = robust_value(rho.as_ref(), family, x, &Solver::auto())?;
    let mut anchors = surface.anchors().to_vec();
    anchors.push(x.clone());
    anchors.push(x.shift(-family.eps())?);
    if let Some(w) = &robust.witness {
        anchors.push(w.clone());
    }
    let surf = surface.clone().with_anchors(anchors);
    let mut obj = |q: &ScenarioMeasure| match support_function(family, q, x)?.value {
        ExtReal::Finite(t) => surf.evaluate(t, q),
        ExtReal::PosInf => Ok(ExtReal::PosInf),
        ExtReal::NegInf => Ok(ExtReal::NegInf),
    };
    let (grid_dual, dual, argmax) = max_with_refinement(grid, &mut obj)?;
    Ok(GapReport {
        verifier: "robust_dual".into(),
        primal: robust.value,
        primal_guarantee: robust.guarantee,
        grid_dual,
        dual,
        grid_gap: gap(robust.value, grid_dual)?,
        gap: gap(robust.value, dual)?,
        step: grid.step(),
        argmax,
        surface: surface_label(surface),
    })
}

/// Numeric c_{φ_Q}(Q̃) when no closed form applies.
fn support_penalty_value(
    family: &Family,
    q: &ScenarioMeasure,
    qt: &ScenarioMeasure,
    x: &Position,
) -> Result<ExtReal> {
    if let Some(v) = support_penalty(family, q, qt) {
        return Ok(v);
    }
    let phi = SupportFunctional {
        family: family.clone(),
        q: q.clone(),
    };
    let b = 10.0 * (x.sup_norm() + family.eps() + 1.0);
    Ok(minimal_penalty_numeric(&phi, qt, b, b / 50.0)?.value)
}

/// ρ̃(X) against sup over Q̃ of E_Q̃[-X] - inf_Q { c_{φ_Q}(Q̃) + c_ρ(Q) }.
pub fn verify_convex_cash_additive_dual(
    rho: Arc<dyn RiskFunctional>,
    family: &Family,
    x: &Position,
    grid: &SimplexGrid,
) -> Result<GapReport> {
    let f = rho.flags();
    if !(f.convex && f.cash_additive && f.continuous_from_above) {
        return Err(Error::Hypothesis(format!(
            "{} must be convex, cash-additive and continuous from above",
            rho.name()
        )));
    }
    require_family(family, FamilyProperty::Convex, x.space(), true)?;
    require_family(family, FamilyProperty::CashInvariant, x.space(), true)?;
    let robust = robust_value(rho.as_ref(), family, x, &Solver::auto())?;
    let bound = 10.0 * (x.sup_norm() + 1.0);
    let c_rho = |q: &ScenarioMeasure| -> Result<ExtReal> {
        Ok(minimal_penalty(rho.as_ref(), q, bound, bound / 50.0)?.value)
    };
    let mut obj = |qt: &ScenarioMeasure| -> Result<ExtReal> {
        // Only Q with a finite c_{φ_Q}(Q̃) matter; for balls these are Q̃ and its rearrangements.
        let mut inner: Vec<ScenarioMeasure> = vec![qt.clone()];
        if support_penalty(family, qt, qt).is_none()
            || matches!(
                family,
                Family::WassersteinBall { .. }
                    | Family::LevelUpperSet { .. }
                    | Family::LevelBand { .. }
            )
        {
            inner.extend(grid.points().iter().cloned());
        }
        let mut inf = ExtReal::PosInf;
        for q in &inner {
            let cr = c_rho(q)?;
            if cr == ExtReal::PosInf {
                continue;
            }
            let cp = support_penalty_value(family, q, qt, x)?;
            if cp == ExtReal::PosInf {
                continue;
            }
            inf = inf.min(cp.checked_add(cr)?);
        }
        match inf {
            ExtReal::PosInf => Ok(ExtReal::NegInf),
            ExtReal::NegInf => Ok(ExtReal::PosInf),
            ExtReal::Finite(v) => Ok(ExtReal::from(-expectation_under(qt, x)? - v)),
        }
    };
    let (grid_dual, dual, argmax) = max_with_refinement(grid, &mut obj)?;
    Ok(GapReport {
        verifier: "convex_cash_additive_dual".into(),
        primal: robust.value,
        primal_guarantee: robust.guarantee,
        grid_dual,
        dual,
        grid_gap: gap(robust.value, grid_dual)?,
        gap: gap(robust.value, dual)?,
        step: grid.step(),
        argmax,
        surface: "closed_form_penalties".into(),
    })
}

/// ρ̃(X) against sup over (Q, Q̃) of R_{φ_Q}(E_Q̃[-X], Q̃) - c_ρ(Q), with the
/// inner surface brute-forced over φ_Q and anchored at X.
pub fn verify_second_approach_dual(
    rho: Arc<dyn RiskFunctional>,
    family: &Family,
    x: &Position,
    grid: &SimplexGrid,
) -> Result<GapReport> {
    let f = rho.flags();
    if !(f.convex && f.cash_additive && f.continuous_from_above) {
        return Err(Error::Hypothesis(format!(
            "{} must be convex, cash-additive and continuous from above",
            rho.name()
        )));
    }
    require_family(family, FamilyProperty::QuasiConvex, x.space(), false)?;
    require_family(
        family,
        FamilyProperty::ContinuousFromAbove,
        x.space(),
        false,
    )?;
    let robust = robust_value(rho.as_ref(), family, x, &Solver::auto())?;
    let bound = 10.0 * (x.sup_norm() + 1.0);
    let penalties: Vec<ExtReal> = grid
        .points()
        .iter()
        .map(|q| Ok(minimal_penalty(rho.as_ref(), q, bound, bound / 50.0)?.value))
        .collect::<Result<_>>()?;
    let lattice = 10.0 * (x.sup_norm() + 1.0);
    let value = |q: &ScenarioMeasure, cq: ExtReal, qt: &ScenarioMeasure| -> Result<ExtReal> {
        let Some(cq) = cq.finite() else {
            return Ok(ExtReal::NegInf);
        };
        let surf = PenaltySurface {
            rho: Arc::new(SupportFunctional {
                family: family.clone(),
                q: q.clone(),
            }),
            kind: PenaltyKind::BruteForce {
                bound: Some(lattice),
                step: Some(lattice / 50.0),
            },
            anchors: vec![x.clone()],
        };
        Ok(surf.evaluate(-expectation_under(qt, x)?, qt)?.add_f64(-cq))
    };
    // Grid sup over Q̃ for each Q.
    let mut grid_best = (ExtReal::NegInf, 0usize, 0usize);
    for (i, q) in grid.points().iter().enumerate() {
        if !penalties[i].is_finite() {
            continue;
        }
        for (j, qt) in grid.points().iter().enumerate() {
            let v = value(q, penalties[i], qt)?;
            if v > grid_best.0 {
                grid_best = (v, i, j);
            }
        }
    }
    let grid_dual = grid_best.0;
    let mut q_m = grid.masses[grid_best.1].clone();
    let mut qt_m = grid.masses[grid_best.2].clone();
    let mut dual = grid_dual;
    if grid_dual.is_finite() {
        let space = grid.space().clone();
        let bound_c = bound;
        for _ in 0..2 {
            let q = ScenarioMeasure::from_masses(space.clone(), &q_m)?;
            let cq = minimal_penalty(rho.as_ref(), &q, bound_c, bound_c / 50.0)?.value;
            let (v, m) = refine_simplex(&space, &qt_m, grid.step(), &mut |qt| value(&q, cq, qt))?;
            qt_m = m;
            dual = dual.max(v);
            let qt = ScenarioMeasure::from_masses(space.clone(), &qt_m)?;
            let (v, m) = refine_simplex(&space, &q_m, grid.step(), &mut |q| {
                let cq = minimal_penalty(rho.as_ref(), q, bound_c, bound_c / 50.0)?.value;
                value(q, cq, &qt)
            })?;
            q_m = m;
            dual = dual.max(v);
        }
    }
    Ok(GapReport {
        verifier: "second_approach_dual".into(),
        primal: robust.value,
        primal_guarantee: robust.guarantee,
        grid_dual,
        dual,
        grid_gap: gap(robust.value, grid_dual)?,
        gap: gap(robust.value, dual)?,
        step: grid.step(),
        argmax: qt_m,
        surface: "brute_force".into(),
    })
}

/// Sampled test of R(t', Q) ≤ R(t, Q) + |t - t'| and of monotonicity in t.
pub fn non_expansivity_check(
    surface: &PenaltySurface,
    space: &ProbSpace,
    samples: usize,
    seed: u64,
) -> Result<PropertyVerdict> {
    if !surface.rho().flags().cash_subadditive {
        return Err(Error::Hypothesis(format!(
            "{} is not cash-subadditive",
            surface.rho().name()
        )));
    }
    let mut rng = sampling::rng(seed);
    let tol = 1e-6;
    for _ in 0..samples {
        let q = sampling::random_measure(&mut rng, space);
        let t: f64 = rng.random_range(-5.0..5.0);
        let s: f64 = rng.random_range(-5.0..5.0);
        let (lo, hi) = if t <= s { (t, s) } else { (s, t) };
        let rl = surface.evaluate(lo, &q)?;
        let rh = surface.evaluate(hi, &q)?;
        let ok = match (rl, rh) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => b <= a + (hi - lo) + tol && a <= b + tol,
            (a, b) => a == b,
        };
        if !ok {
            let w = Witness::new(space)
                .with_scalar("t", lo)
                .with_scalar("t_prime", hi)
                .with_scalar("r_t", rl.to_f64())
                .with_scalar("r_t_prime", rh.to_f64())
                .with_position("q_density", &space.position(q.density().to_vec())?);
            return Ok(PropertyVerdict::Counterexample { witness: w });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials: samples })
}

/// Spread over sampled Q of the sampled inf over t of R(t, Q).
pub fn inf_spread(
    surface: &PenaltySurface,
    space: &ProbSpace,
    measures: usize,
    levels: &[f64],
    seed: u64,
) -> Result<f64> {
    let mut rng = sampling::rng(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..measures {
        let q = sampling::random_measure(&mut rng, space);
        let mut m = f64::INFINITY;
        for &t in levels {
            m = m.min(surface.evaluate(t, &q)?.to_f64());
        }
        lo = lo.min(m);
        hi = hi.max(m);
    }
    Ok(hi - lo)
}

/// Comparison of ρ̃ over a Wasserstein ball with ρ(X) + ε‖dQ*_X/dP‖_q.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: ExtReal,
    pub lhs_guarantee: Guarantee,
    pub rhs: ExtReal,
    pub holds: bool,
    /// Masses of the grid maximizer of the dual of ρ at X.
    pub argmax: Vec<f64>,
}

pub fn wasserstein_bound_check(
    rho: Arc<dyn RiskFunctional>,
    eps: f64,
    p: f64,
    x: &Position,
    grid: &SimplexGrid,
    surface: &PenaltySurface,
) -> Result<BoundReport> {
    let f = rho.flags();
    if !(f.law_invariant && f.quasi_convex && f.cash_subadditive) {
        return Err(Error::Hypothesis(format!(
            "{} must be law invariant, quasi-convex and cash-subadditive",
            rho.name()
        )));
    }
    let family = Family::wasserstein_ball(p, eps)?;
    let lhs = robust_value(rho.as_ref(), &family, x, &Solver::auto())?;
    let mut anchors = surface.anchors().to_vec();
    anchors.push(x.clone());
    let surf = surface.clone().with_anchors(anchors);
    let q_exp = conjugate_exponent(p)?;
    // Ties: smallest density norm, then lexicographic masses.
    let mut best: Option<(ExtReal, f64, usize)> = None;
    for (i, q) in grid.points().iter().enumerate() {
        let v = surf.evaluate(-expectation_under(q, x)?, q)?;
        let nrm = density_norm(q, q_exp)?;
        let better = match best {
            None => true,
            Some((bv, bn, _)) => {
                let tie = match (v, bv) {
                    (ExtReal::Finite(a), ExtReal::Finite(b)) => {
                        (a - b).abs() <= 1e-12 * (1.0 + b.abs())
                    }
                    (a, b) => a == b,
                };
                if tie {
                    nrm < bn
                } else {
                    v > bv
                }
            }
        };
        if better {
            best = Some((v, nrm, i));
        }
    }
    let (_, nrm, i) = best.ok_or_else(|| Error::NoSolver("empty simplex grid".into()))?;
    let rhs = rho.evaluate(x)?.add_f64(eps * nrm);
    let holds = lhs.value.le_tol(rhs, 1e-9);
    Ok(BoundReport {
        lhs: lhs.value,
        lhs_guarantee: lhs.guarantee,
        rhs,
        holds,
        argmax: grid.masses[i].clone(),
    })
}
