//! Base risk measures, loss functions for certainty equivalents, and sampled axiom checks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::prob::{
    expectation, quantile_function, relative_entropy, ExtReal, Position, ProbSpace, ScenarioMeasure,
};
use crate::sampling;
use crate::verdict::{PropertyVerdict, Witness};

/// Declared axioms of a risk functional.
///
/// `cash_subadditive` means cash helps at most one-to-one:
/// ρ(X + m) ≥ ρ(X) − m for m ≥ 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxiomFlags {
    pub monotone: bool,
    pub convex: bool,
    pub quasi_convex: bool,
    pub cash_additive: bool,
    pub cash_subadditive: bool,
    pub law_invariant: bool,
    pub continuous_from_above: bool,
}

impl AxiomFlags {
    const ALL: AxiomFlags = AxiomFlags {
        monotone: true,
        convex: true,
        quasi_convex: true,
        cash_additive: true,
        cash_subadditive: true,
        law_invariant: true,
        continuous_from_above: true,
    };

    pub fn has(&self, axiom: Axiom) -> bool {
        match axiom {
            Axiom::Monotone => self.monotone,
            Axiom::Convex => self.convex,
            Axiom::QuasiConvex => self.quasi_convex,
            Axiom::CashAdditive => self.cash_additive,
            Axiom::CashSubadditive => self.cash_subadditive,
            Axiom::LawInvariant => self.law_invariant,
        }
    }
}

/// A risk functional on positions of a finite space.
pub trait RiskFunctional: fmt::Debug + Send + Sync {
    fn evaluate(&self, x: &Position) -> Result<ExtReal>;

    fn flags(&self) -> AxiomFlags;

    fn name(&self) -> String;

    /// Closed-form minimal penalty c(Q), when one is coded.
    fn penalty(&self, _q: &ScenarioMeasure) -> Option<ExtReal> {
        None
    }

    /// `Some((Q, c))` when ρ(X) = E_Q[-X] + c on `space`.
    fn linear_form(&self, _space: &ProbSpace) -> Option<(ScenarioMeasure, f64)> {
        None
    }

    /// Maximizer of E_Q[-X] - c(Q) in closed form, when one is coded.
    fn dual_argmax(&self, _x: &Position) -> Option<ScenarioMeasure> {
        None
    }

    fn as_measure(&self) -> Option<&RiskMeasure> {
        None
    }
}

/// Strictly increasing convex loss used in certainty equivalents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFunction {
    /// e^x
    Exponential,
    /// x
    Linear,
    /// ln(1 + e^x)
    Softplus,
}

impl LossFunction {
    pub fn ell(&self, x: f64) -> f64 {
        match self {
            LossFunction::Exponential => x.exp(),
            LossFunction::Linear => x,
            LossFunction::Softplus => softplus(x),
        }
    }

    /// Inverse of `ell`; values below the range map to -inf.
    pub fn ell_inv(&self, y: f64) -> ExtReal {
        match self {
            LossFunction::Exponential => {
                if y <= 0.0 {
                    ExtReal::NegInf
                } else {
                    ExtReal::from(y.ln())
                }
            }
            LossFunction::Linear => ExtReal::from(y),
            LossFunction::Softplus => {
                if y <= 0.0 {
                    ExtReal::NegInf
                } else if y > 30.0 {
                    ExtReal::from(y + (-(-y).exp()).ln_1p())
                } else {
                    ExtReal::from(y.exp_m1().ln())
                }
            }
        }
    }

    /// Convex conjugate ℓ*(y) = sup_x { x y - ℓ(x) }.
    pub fn ell_conj(&self, y: f64) -> ExtReal {
        let (lo, hi) = self.conj_domain();
        if y < lo || y > hi {
            return ExtReal::PosInf;
        }
        match self {
            LossFunction::Exponential => ExtReal::from(xlogx(y) - y),
            LossFunction::Linear => ExtReal::Finite(0.0),
            LossFunction::Softplus => ExtReal::from(xlogx(y) + xlogx(1.0 - y)),
        }
    }

    /// Closed interval on which the conjugate is finite.
    pub fn conj_domain(&self) -> (f64, f64) {
        match self {
            LossFunction::Exponential => (0.0, f64::INFINITY),
            LossFunction::Linear => (1.0, 1.0),
            LossFunction::Softplus => (0.0, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossFunction::Exponential => "exponential",
            LossFunction::Linear => "linear",
            LossFunction::Softplus => "softplus",
        }
    }
}

fn xlogx(y: f64) -> f64 {
    if y > 0.0 {
        y * y.ln()
    } else {
        0.0
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// (1/γ) ln E[e^{-γX}] with a max shift.
fn log_mean_exp(probs: &[f64], values: &[f64], gamma: f64) -> f64 {
    let m = values
        .iter()
        .map(|v| -gamma * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = probs
        .iter()
        .zip(values)
        .map(|(p, v)| p * (-gamma * v - m).exp())
        .sum();
    (m + s.ln()) / gamma
}

/// The shipped risk measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum RiskMeasure {
    NegExpectation,
    ExpectationFloor { k: f64 },
    WorstCase,
    Entropic { gamma: f64 },
    ExpectedShortfall { alpha: f64 },
    CertaintyEquivalent { loss: LossFunction },
    QEntropic { q: f64, beta: f64 },
}

impl RiskMeasure {
    pub fn expectation_floor(k: f64) -> Result<Self> {
        let r = RiskMeasure::ExpectationFloor { k };
        r.validate()?;
        Ok(r)
    }

    pub fn entropic(gamma: f64) -> Result<Self> {
        let r = RiskMeasure::Entropic { gamma };
        r.validate()?;
        Ok(r)
    }

    pub fn expected_shortfall(alpha: f64) -> Result<Self> {
        let r = RiskMeasure::ExpectedShortfall { alpha };
        r.validate()?;
        Ok(r)
    }

    pub fn certainty_equivalent(loss: LossFunction) -> Self {
        RiskMeasure::CertaintyEquivalent { loss }
    }

    pub fn q_entropic(q: f64, beta: f64) -> Result<Self> {
        let r = RiskMeasure::QEntropic { q, beta };
        r.validate()?;
        Ok(r)
    }

    /// Checks parameter ranges; deserialized values must pass through here.
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskMeasure::ExpectationFloor { k } if !(k > 0.0 && k.is_finite()) => {
                Err(param("k", format!("floor must be positive, got {k}")))
            }
            RiskMeasure::Entropic { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(param("gamma", format!("must be positive, got {gamma}")))
            }
            RiskMeasure::ExpectedShortfall { alpha } if !(alpha > 0.0 && alpha <= 1.0) => {
                Err(param("alpha", format!("must lie in (0, 1], got {alpha}")))
            }
            RiskMeasure::QEntropic { q, .. } if !(q > 0.0 && q < 1.0) => {
                Err(param("q", format!("must lie in (0, 1), got {q}")))
            }
            RiskMeasure::QEntropic { beta, .. } if !(beta > 0.0 && beta.is_finite()) => {
                Err(param("beta", format!("must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    fn eval_f64(&self, x: &Position) -> Result<f64> {
        let p = x.space().probs();
        let v = x.values();
        Ok(match *self {
            RiskMeasure::NegExpectation => -expectation(x),
            RiskMeasure::ExpectationFloor { k } => (-expectation(x)).max(k),
            RiskMeasure::WorstCase => v.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max),
            RiskMeasure::Entropic { gamma } => log_mean_exp(p, v, gamma),
            RiskMeasure::ExpectedShortfall { alpha } => expected_shortfall(x, alpha),
            RiskMeasure::CertaintyEquivalent { loss } => match loss {
                LossFunction::Exponential => log_mean_exp(p, v, 1.0),
                LossFunction::Linear => -expectation(x),
                LossFunction::Softplus => {
                    let m: f64 = p.iter().zip(v).map(|(w, x)| w * softplus(-x)).sum();
                    loss.ell_inv(m).to_f64()
                }
            },
            RiskMeasure::QEntropic { q, beta } => q_entropic(p, v, q, beta)?,
        })
    }
}

/// -(1/α) ∫₀^α F⁻¹_X(u) du.
fn expected_shortfall(x: &Position, alpha: f64) -> f64 {
    let qf = quantile_function(x);
    let mut prev = 0.0;
    let mut acc = 0.0;
    for (&v, &c) in qf.values().iter().zip(qf.cumulative()) {
        let take = c.min(alpha) - prev;
        if take > 0.0 {
            acc += take * v;
        }
        prev = c;
        if c >= alpha {
            break;
        }
    }
    -acc / alpha
}

/// ln_q E[exp_q((X + β)⁻)], computed in log space.
fn q_entropic(probs: &[f64], values: &[f64], q: f64, beta: f64) -> Result<f64> {
    let r = 1.0 - q;
    let mut logs = Vec::with_capacity(values.len());
    for &x in values {
        let loss = (-(x + beta)).max(0.0);
        let base = 1.0 + r * loss;
        if base < 0.0 {
            return Err(Error::Domain("exp_q".into()));
        }
        // ln exp_q(loss)
        logs.push(base.ln() / r);
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = probs
        .iter()
        .zip(&logs)
        .map(|(p, l)| p * (l - m).exp())
        .sum();
    // E^{1-q} = e^{r m} s^r, and ln_q(E) = (E^{1-q} - 1) / r.
    let powered = (r * m + r * s.ln()).exp();
    let out = (powered - 1.0) / r;
    if !out.is_finite() {
        return Err(Error::Domain("ln_q (overflow)".into()));
    }
    Ok(out)
}

fn gibbs(x: &Position, gamma: f64) -> ScenarioMeasure {
    let m = x
        .values()
        .iter()
        .map(|v| -gamma * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = x.values().iter().map(|v| (-gamma * v - m).exp()).collect();
    let z: f64 = x.space().probs().iter().zip(&w).map(|(p, w)| p * w).sum();
    let masses: Vec<f64> = x
        .space()
        .probs()
        .iter()
        .zip(&w)
        .map(|(p, w)| p * w / z)
        .collect();
    ScenarioMeasure::from_masses(x.space().clone(), &masses).expect("gibbs weights")
}

/// Density 1/α on the worst α-mass of outcomes, split at the boundary atom.
fn tail_measure(x: &Position, alpha: f64) -> ScenarioMeasure {
    let p = x.space().probs();
    let mut order: Vec<usize> = (0..x.n()).collect();
    order.sort_by(|&a, &b| x.values()[a].total_cmp(&x.values()[b]).then(a.cmp(&b)));
    let mut masses = vec![0.0; x.n()];
    let mut left = alpha;
    for i in order {
        let take = p[i].min(left);
        masses[i] = take / alpha;
        left -= take;
        if left <= 0.0 {
            break;
        }
    }
    ScenarioMeasure::from_masses(x.space().clone(), &masses).expect("tail weights")
}

/// Zero at P, +inf elsewhere.
fn reference_indicator(q: &ScenarioMeasure) -> ExtReal {
    if q.is_reference() {
        ExtReal::Finite(0.0)
    } else {
        ExtReal::PosInf
    }
}

impl RiskFunctional for RiskMeasure {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        ExtReal::from_f64(self.eval_f64(x)?)
    }

    fn flags(&self) -> AxiomFlags {
        let all = AxiomFlags::ALL;
        match self {
            RiskMeasure::NegExpectation
            | RiskMeasure::WorstCase
            | RiskMeasure::Entropic { .. }
            | RiskMeasure::ExpectedShortfall { .. } => all,
            RiskMeasure::ExpectationFloor { .. } => AxiomFlags {
                cash_additive: false,
                ..all
            },
            RiskMeasure::CertaintyEquivalent { loss } => match loss {
                LossFunction::Exponential | LossFunction::Linear => all,
                LossFunction::Softplus => AxiomFlags {
                    convex: false,
                    cash_additive: false,
                    cash_subadditive: false,
                    ..all
                },
            },
            RiskMeasure::QEntropic { .. } => AxiomFlags {
                cash_additive: false,
                ..all
            },
        }
    }

    fn name(&self) -> String {
        match self {
            RiskMeasure::NegExpectation => "neg_expectation".into(),
            RiskMeasure::ExpectationFloor { k } => format!("expectation_floor(k={k})"),
            RiskMeasure::WorstCase => "worst_case".into(),
            RiskMeasure::Entropic { gamma } => format!("entropic(gamma={gamma})"),
            RiskMeasure::ExpectedShortfall { alpha } => {
                format!("expected_shortfall(alpha={alpha})")
            }
            RiskMeasure::CertaintyEquivalent { loss } => {
                format!("certainty_equivalent(loss={})", loss.name())
            }
            RiskMeasure::QEntropic { q, beta } => format!("q_entropic(q={q}, beta={beta})"),
        }
    }

    fn penalty(&self, q: &ScenarioMeasure) -> Option<ExtReal> {
        match *self {
            RiskMeasure::NegExpectation
            | RiskMeasure::ExpectationFloor { .. }
            | RiskMeasure::CertaintyEquivalent {
                loss: LossFunction::Linear,
            } => Some(reference_indicator(q)),
            RiskMeasure::WorstCase => Some(ExtReal::Finite(0.0)),
            RiskMeasure::Entropic { gamma } => {
                Some(ExtReal::from(relative_entropy(q).to_f64() / gamma))
            }
            RiskMeasure::CertaintyEquivalent {
                loss: LossFunction::Exponential,
            } => Some(relative_entropy(q)),
            RiskMeasure::ExpectedShortfall { alpha } => {
                let cap = 1.0 / alpha + 1e-12;
                Some(if q.density().iter().all(|&d| d <= cap) {
                    ExtReal::Finite(0.0)
                } else {
                    ExtReal::PosInf
                })
            }
            _ => None,
        }
    }

    fn linear_form(&self, space: &ProbSpace) -> Option<(ScenarioMeasure, f64)> {
        match self {
            RiskMeasure::NegExpectation
            | RiskMeasure::CertaintyEquivalent {
                loss: LossFunction::Linear,
            } => Some((space.reference(), 0.0)),
            RiskMeasure::ExpectedShortfall { alpha } if *alpha >= 1.0 => {
                Some((space.reference(), 0.0))
            }
            _ => None,
        }
    }

    fn dual_argmax(&self, x: &Position) -> Option<ScenarioMeasure> {
        match *self {
            RiskMeasure::NegExpectation
            | RiskMeasure::CertaintyEquivalent {
                loss: LossFunction::Linear,
            } => Some(x.space().reference()),
            RiskMeasure::Entropic { gamma } => Some(gibbs(x, gamma)),
            RiskMeasure::CertaintyEquivalent {
                loss: LossFunction::Exponential,
            } => Some(gibbs(x, 1.0)),
            RiskMeasure::ExpectedShortfall { alpha } => Some(tail_measure(x, alpha)),
            RiskMeasure::WorstCase => {
                let p = x
                    .space()
                    .probs()
                    .iter()
                    .fold(f64::INFINITY, |m: f64, &p| m.min(p));
                Some(tail_measure(x, p))
            }
            _ => None,
        }
    }

    fn as_measure(&self) -> Option<&RiskMeasure> {
        Some(self)
    }
}

/// Evaluates and requires a finite result.
pub fn eval_finite(rho: &dyn RiskFunctional, x: &Position) -> Result<f64> {
    rho.evaluate(x)?
        .finite()
        .ok_or_else(|| Error::Domain(format!("{} returned an infinite value", rho.name())))
}

/// Axioms that can be falsified by sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    Monotone,
    Convex,
    QuasiConvex,
    CashAdditive,
    CashSubadditive,
    LawInvariant,
}

impl Axiom {
    pub const ALL: [Axiom; 6] = [
        Axiom::Monotone,
        Axiom::Convex,
        Axiom::QuasiConvex,
        Axiom::CashAdditive,
        Axiom::CashSubadditive,
        Axiom::LawInvariant,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Axiom::Monotone => "monotone",
            Axiom::Convex => "convex",
            Axiom::QuasiConvex => "quasi_convex",
            Axiom::CashAdditive => "cash_additive",
            Axiom::CashSubadditive => "cash_subadditive",
            Axiom::LawInvariant => "law_invariant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Axiom::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| param("axiom", format!("unknown axiom {s:?}")))
    }
}

const AXIOM_TOL: f64 = 1e-9;

fn axiom_tol(v: f64) -> f64 {
    AXIOM_TOL * (1.0 + v.abs())
}

/// Re-evaluates an axiom on a witness; `Ok(true)` means the witness violates it.
pub fn replay_axiom(rho: &dyn RiskFunctional, axiom: Axiom, w: &Witness) -> Result<bool> {
    let get = |name: &str| {
        w.position(name)
            .unwrap_or_else(|| Err(Error::Hypothesis(format!("witness lacks position {name}"))))
    };
    let scalar = |name: &str| {
        w.scalar(name)
            .ok_or_else(|| Error::Hypothesis(format!("witness lacks scalar {name}")))
    };
    let x = get("x")?;
    let rx = rho.evaluate(&x)?;
    Ok(match axiom {
        Axiom::Monotone => {
            let y = get("y")?;
            if !x.le(&y) {
                return Ok(false);
            }
            let ry = rho.evaluate(&y)?;
            !ry.le_tol(rx, axiom_tol(rx.to_f64()))
        }
        Axiom::Convex | Axiom::QuasiConvex => {
            let y = get("y")?;
            let lambda = scalar("lambda")?;
            let ry = rho.evaluate(&y)?;
            let rm = rho.evaluate(&x.mix(&y, lambda)?)?;
            let bound = if axiom == Axiom::Convex {
                ExtReal::from(lambda * rx.to_f64() + (1.0 - lambda) * ry.to_f64())
            } else {
                rx.max(ry)
            };
            !rm.le_tol(bound, axiom_tol(bound.to_f64()))
        }
        Axiom::CashAdditive => {
            let m = scalar("m")?;
            let rs = rho.evaluate(&x.shift(m)?)?;
            let target = rx.add_f64(-m);
            match (rs, target) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => (a - b).abs() > axiom_tol(b),
                _ => rs != target,
            }
        }
        Axiom::CashSubadditive => {
            let m = scalar("m")?;
            let rs = rho.evaluate(&x.shift(m)?)?;
            let target = rx.add_f64(-m);
            !target.le_tol(rs, axiom_tol(target.to_f64()))
        }
        Axiom::LawInvariant => {
            let y = get("y")?;
            if !crate::prob::same_distribution(&x, &y) {
                return Ok(false);
            }
            let ry = rho.evaluate(&y)?;
            match (rx, ry) {
                (ExtReal::Finite(a), ExtReal::Finite(b)) => (a - b).abs() > axiom_tol(a),
                _ => rx != ry,
            }
        }
    })
}

/// Sampled falsification of one axiom on random positions over `space`.
/// Law invariance is tested with permutations, which preserve the law only on
/// uniform spaces, so a uniform space of the same size is used for it.
pub fn check_axiom(
    rho: &dyn RiskFunctional,
    axiom: Axiom,
    space: &ProbSpace,
    trials: usize,
    seed: u64,
) -> Result<PropertyVerdict> {
    let mut rng = sampling::rng(seed);
    let law_space;
    let space = if axiom == Axiom::LawInvariant {
        law_space = ProbSpace::uniform(space.n())?;
        &law_space
    } else {
        space
    };
    for _ in 0..trials {
        let x = sampling::random_position(&mut rng, space, 3.0);
        let w = Witness::new(space).with_position("x", &x);
        let w = match axiom {
            Axiom::Monotone => {
                let d = sampling::random_nonnegative(&mut rng, space, 2.0);
                w.with_position("y", &x.add(&d)?)
            }
            Axiom::Convex | Axiom::QuasiConvex => {
                use rand::Rng;
                let y = sampling::random_position(&mut rng, space, 3.0);
                let lambda: f64 = rng.random_range(0.0..=1.0);
                w.with_position("y", &y).with_scalar("lambda", lambda)
            }
            Axiom::CashAdditive => {
                use rand::Rng;
                w.with_scalar("m", rng.random_range(-5.0..=5.0))
            }
            Axiom::CashSubadditive => {
                use rand::Rng;
                w.with_scalar("m", rng.random_range(0.0..=5.0))
            }
            Axiom::LawInvariant => w.with_position("y", &sampling::shuffled(&mut rng, &x)),
        };
        if replay_axiom(rho, axiom, &w)? {
            return Ok(PropertyVerdict::Counterexample { witness: w });
        }
    }
    Ok(PropertyVerdict::SampledNoCounterexample { trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn half() -> ProbSpace {
        ProbSpace::uniform(2).unwrap()
    }

    fn ev(r: &RiskMeasure, x: &Position) -> f64 {
        r.evaluate(x).unwrap().finite().unwrap()
    }

    #[test]
    fn neg_expectation_examples() {
        let r = RiskMeasure::NegExpectation;
        assert_eq!(ev(&r, &half().position(vec![1.0, 2.0]).unwrap()), -1.5);
        assert_eq!(ev(&r, &half().constant(0.0).unwrap()), 0.0);
        assert_eq!(ev(&r, &half().position(vec![-3.0, 1.0]).unwrap()), 1.0);
    }

    #[test]
    fn floor_examples() {
        let r = RiskMeasure::expectation_floor(1.0).unwrap();
        assert_eq!(ev(&r, &half().position(vec![-0.5, -0.5]).unwrap()), 1.0);
        assert_eq!(ev(&r, &half().position(vec![-1.0, -3.0]).unwrap()), 2.0);
        assert_eq!(ev(&r, &half().position(vec![-1.0, -1.0]).unwrap()), 1.0);
        assert!(RiskMeasure::expectation_floor(0.0).is_err());
        assert!(RiskMeasure::expectation_floor(-1.0).is_err());
    }

    #[test]
    fn worst_case_examples() {
        let r = RiskMeasure::WorstCase;
        assert_eq!(ev(&r, &half().position(vec![1.0, -2.0]).unwrap()), 2.0);
        assert_eq!(ev(&r, &half().constant(3.0).unwrap()), -3.0);
        let s = ProbSpace::uniform(3).unwrap();
        assert_eq!(ev(&r, &s.position(vec![0.0, 5.0, -1.0]).unwrap()), 1.0);
    }

    #[test]
    fn entropic_examples() {
        let r = RiskMeasure::entropic(1.0).unwrap();
        assert_abs_diff_eq!(
            ev(&r, &half().constant(2.5).unwrap()),
            -2.5,
            epsilon = 1e-14
        );
        assert_eq!(ev(&r, &half().constant(0.0).unwrap()), 0.0);
        let x = half().position(vec![0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(ev(&r, &x), (2.0f64 / 3.0).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(ev(&r, &x), -0.405465, epsilon = 1e-6);
        // No overflow at extreme magnitudes.
        let big = half().position(vec![-1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(ev(&r, &big), 1000.0 - 2f64.ln(), epsilon = 1e-9);
        assert!(RiskMeasure::entropic(0.0).is_err());
    }

    #[test]
    fn expected_shortfall_values() {
        let s = ProbSpace::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = s.position(vec![1.0, -2.0, 4.0]).unwrap();
        // Worst 0.4 of mass: 0.3 at -2, 0.1 at 1.
        let r = RiskMeasure::expected_shortfall(0.4).unwrap();
        assert_abs_diff_eq!(ev(&r, &x), -(0.3 * -2.0 + 0.1 * 1.0) / 0.4, epsilon = 1e-14);
        let full = RiskMeasure::expected_shortfall(1.0).unwrap();
        assert_abs_diff_eq!(
            ev(&full, &x),
            ev(&RiskMeasure::NegExpectation, &x),
            epsilon = 1e-14
        );
    }

    #[test]
    fn certainty_equivalents() {
        let s = ProbSpace::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = s.position(vec![1.0, -2.0, 4.0]).unwrap();
        let ce = RiskMeasure::certainty_equivalent(LossFunction::Exponential);
        assert_abs_diff_eq!(
            ev(&ce, &x),
            ev(&RiskMeasure::entropic(1.0).unwrap(), &x),
            epsilon = 1e-12
        );
        let ce = RiskMeasure::certainty_equivalent(LossFunction::Linear);
        assert_abs_diff_eq!(
            ev(&ce, &x),
            ev(&RiskMeasure::NegExpectation, &x),
            epsilon = 1e-12
        );
        for loss in [
            LossFunction::Exponential,
            LossFunction::Linear,
            LossFunction::Softplus,
        ] {
            let ce = RiskMeasure::certainty_equivalent(loss);
            assert_abs_diff_eq!(ev(&ce, &s.constant(0.7).unwrap()), -0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn q_entropic_examples() {
        let r = RiskMeasure::q_entropic(0.5, 1.0).unwrap();
        assert_eq!(ev(&r, &half().position(vec![-1.0, 3.0]).unwrap()), 0.0);
        for q in [0.1, 0.5, 0.9] {
            let r = RiskMeasure::q_entropic(q, 1.0).unwrap();
            assert_abs_diff_eq!(
                ev(&r, &half().constant(-2.0).unwrap()),
                1.0,
                epsilon = 1e-12
            );
        }
        // q close to one approaches ln E[exp((X + β)⁻)].
        let x = half().position(vec![-2.5, -1.2]).unwrap();
        let classical = (0.5 * 1.5f64.exp() + 0.5 * 0.2f64.exp()).ln();
        let r = RiskMeasure::q_entropic(0.999, 1.0).unwrap();
        assert_abs_diff_eq!(ev(&r, &x), classical, epsilon = 1e-3);
        assert!(RiskMeasure::q_entropic(1.0, 1.0).is_err());
        assert!(RiskMeasure::q_entropic(0.5, 0.0).is_err());
    }

    #[test]
    fn loss_functions() {
        for loss in [
            LossFunction::Exponential,
            LossFunction::Linear,
            LossFunction::Softplus,
        ] {
            for i in -40..=40 {
                let x = i as f64 * 0.25;
                let back = loss.ell_inv(loss.ell(x)).finite().unwrap();
                assert_abs_diff_eq!(back, x, epsilon = 1e-10);
            }
        }
        // Fenchel inequality with near-equality at y = ℓ'(x).
        for loss in [LossFunction::Exponential, LossFunction::Softplus] {
            for i in -20..=20 {
                let x = i as f64 * 0.2;
                for j in 0..=20 {
                    let y = j as f64 * 0.05;
                    let c = loss.ell_conj(y).to_f64();
                    assert!(c >= x * y - loss.ell(x) - 1e-12);
                }
                let slope = match loss {
                    LossFunction::Exponential => x.exp(),
                    _ => 1.0 / (1.0 + (-x).exp()),
                };
                let c = loss.ell_conj(slope).finite().unwrap();
                assert_abs_diff_eq!(c, x * slope - loss.ell(x), epsilon = 1e-9);
            }
        }
        assert_eq!(LossFunction::Linear.ell_conj(1.0), ExtReal::Finite(0.0));
        assert_eq!(LossFunction::Linear.ell_conj(0.5), ExtReal::PosInf);
        assert_eq!(LossFunction::Softplus.ell_conj(1.5), ExtReal::PosInf);
    }

    #[test]
    fn closed_form_penalties() {
        let q = ScenarioMeasure::new(half(), vec![1.6, 0.4]).unwrap();
        let r = RiskMeasure::entropic(2.0).unwrap();
        let h = relative_entropy(&q).to_f64();
        assert_abs_diff_eq!(r.penalty(&q).unwrap().to_f64(), h / 2.0, epsilon = 1e-15);
        assert_eq!(
            RiskMeasure::NegExpectation.penalty(&q),
            Some(ExtReal::PosInf)
        );
        let es = RiskMeasure::expected_shortfall(0.5).unwrap();
        assert_eq!(es.penalty(&q), Some(ExtReal::Finite(0.0)));
        let q = ScenarioMeasure::new(half(), vec![2.0, 0.0]).unwrap();
        assert_eq!(es.penalty(&q), Some(ExtReal::Finite(0.0)));
        let es = RiskMeasure::expected_shortfall(0.6).unwrap();
        assert_eq!(es.penalty(&q), Some(ExtReal::PosInf));
    }

    #[test]
    fn dual_argmax_attains() {
        let s = ProbSpace::new(vec![0.2, 0.3, 0.5]).unwrap();
        let x = s.position(vec![1.0, -2.0, 4.0]).unwrap();
        for r in [
            RiskMeasure::NegExpectation,
            RiskMeasure::WorstCase,
            RiskMeasure::entropic(0.7).unwrap(),
            RiskMeasure::expected_shortfall(0.4).unwrap(),
            RiskMeasure::certainty_equivalent(LossFunction::Exponential),
        ] {
            let q = r.dual_argmax(&x).unwrap();
            let v = crate::prob::expectation_under(&q, &x).unwrap();
            let dual = -v - r.penalty(&q).unwrap().to_f64();
            assert_abs_diff_eq!(dual, ev(&r, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn serde_config_form() {
        let r: RiskMeasure =
            serde_json::from_str(r#"{"kind":"entropic","params":{"gamma":1.0}}"#).unwrap();
        assert_eq!(r, RiskMeasure::Entropic { gamma: 1.0 });
        let r: RiskMeasure = serde_json::from_str(r#"{"kind":"neg_expectation"}"#).unwrap();
        assert_eq!(r, RiskMeasure::NegExpectation);
        let r: RiskMeasure =
            serde_json::from_str(r#"{"kind":"certainty_equivalent","params":{"loss":"softplus"}}"#)
                .unwrap();
        assert_eq!(r, RiskMeasure::certainty_equivalent(LossFunction::Softplus));
    }

    #[test]
    fn declared_flags_survive_sampling() {
        let measures = [
            RiskMeasure::NegExpectation,
            RiskMeasure::expectation_floor(1.0).unwrap(),
            RiskMeasure::WorstCase,
            RiskMeasure::entropic(1.0).unwrap(),
            RiskMeasure::entropic(3.0).unwrap(),
            RiskMeasure::expected_shortfall(0.3).unwrap(),
            RiskMeasure::certainty_equivalent(LossFunction::Exponential),
            RiskMeasure::certainty_equivalent(LossFunction::Linear),
            RiskMeasure::certainty_equivalent(LossFunction::Softplus),
            RiskMeasure::q_entropic(0.5, 1.0).unwrap(),
            RiskMeasure::q_entropic(0.2, 0.5).unwrap(),
        ];
        let mut rng = sampling::rng(3);
        for (k, r) in measures.iter().enumerate() {
            for n in [2, 3, 5] {
                let s = sampling::random_space(&mut rng, n).unwrap();
                for axiom in Axiom::ALL {
                    if r.flags().has(axiom) {
                        let v = check_axiom(r, axiom, &s, 500, 100 + k as u64).unwrap();
                        assert!(
                            !v.is_counterexample(),
                            "{} fails {:?}: {:?}",
                            r.name(),
                            axiom,
                            v
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn undeclared_axioms_are_caught() {
        let s = ProbSpace::uniform(2).unwrap();
        let floor = RiskMeasure::expectation_floor(1.0).unwrap();
        let v = check_axiom(&floor, Axiom::CashAdditive, &s, 500, 1).unwrap();
        let w = v.witness().expect("floor is not cash-additive");
        assert!(replay_axiom(&floor, Axiom::CashAdditive, w).unwrap());
        let soft = RiskMeasure::certainty_equivalent(LossFunction::Softplus);
        let v = check_axiom(&soft, Axiom::CashAdditive, &s, 500, 1).unwrap();
        assert!(v.is_counterexample());
    }
}
