//! Acceptance sets 𝒜^m = {X : ρ(X) ≤ m}, the inversion back to ρ, and the
//! robust correspondence X ∈ 𝒜^m(ρ̃) ⟺ U_X ⊆ 𝒜^m(ρ).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{AxiomFlags, RiskFunctional};
use crate::prob::{ExtReal, Position, ProbSpace, ScenarioMeasure};
use crate::robust::{robust_value, Guarantee, RobustValue, Solver};
use crate::uncertainty::{check_property, Family, FamilyProperty};

/// ρ(X) ≤ m.
pub fn is_acceptable(rho: &dyn RiskFunctional, x: &Position, m: f64) -> Result<bool> {
    Ok(rho.evaluate(x)? <= ExtReal::from(m))
}

/// Doublings of the bracket width allowed before giving up.
const MAX_EXPANSIONS: usize = 60;

/// Default bisection bracket for a position.
pub fn default_bracket(x: &Position) -> (f64, f64) {
    let s = x.sup_norm();
    (-s - 10.0, s + 10.0)
}

/// inf { m : accept(m) } for a predicate that is monotone in m.
pub(crate) fn bisect_level(
    bracket: (f64, f64),
    mut accept: impl FnMut(f64) -> Result<bool>,
) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Bracket(format!("invalid bracket [{lo}, {hi}]")));
    }
    let mut k = 0;
    while accept(lo)? {
        let w = hi - lo;
        hi = lo;
        lo -= 2.0 * w;
        k += 1;
        if k > MAX_EXPANSIONS {
            return Err(Error::Bracket("every level accepts; value is -inf".into()));
        }
    }
    k = 0;
    while !accept(hi)? {
        let w = hi - lo;
        lo = hi;
        hi += 2.0 * w;
        k += 1;
        if k > MAX_EXPANSIONS {
            return Err(Error::Bracket("no level accepts; value is +inf".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if accept(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + hi.abs()) {
            break;
        }
    }
    Ok(hi)
}

/// ρ(X) = inf { m : X ∈ 𝒜^m } by bisection.
pub fn acceptance_level(
    rho: &dyn RiskFunctional,
    x: &Position,
    bracket: Option<(f64, f64)>,
) -> Result<f64> {
    bisect_level(bracket.unwrap_or_else(|| default_bracket(x)), |m| {
        is_acceptable(rho, x, m)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    /// X ∈ 𝒜^m for ρ̃.
    pub x_in_robust: bool,
    /// U_X ⊆ 𝒜^m for ρ.
    pub u_subset_a: bool,
    pub agree: bool,
    pub guarantee: Guarantee,
    pub robust: ExtReal,
}

fn require_hypotheses(rho: &dyn RiskFunctional, family: &Family, space: &ProbSpace) -> Result<()> {
    if !rho.flags().quasi_convex {
        return Err(Error::Hypothesis(format!(
            "{} is not quasi-convex",
            rho.name()
        )));
    }
    let v = check_property(family, FamilyProperty::Convex, space, 40, 3)?;
    if v.is_counterexample() {
        return Err(Error::Hypothesis(format!(
            "{} is not convex",
            family.name()
        )));
    }
    Ok(())
}

/// Both sides of the robust acceptance correspondence at level m. The subset
/// side uses the scalar sup of ρ over U_X and is corroborated pointwise on a
/// discretization of U_X; with a lower-bound solver only x_in_robust ⇒ subset
/// is asserted.
pub fn robust_acceptance_check(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
    m: f64,
    solver: &Solver,
) -> Result<AcceptanceRecord> {
    require_hypotheses(rho, family, x.space())?;
    let rv = robust_value(rho, family, x, solver)?;
    let x_in_robust = rv.value <= ExtReal::from(m);
    let mut u_subset_a = x_in_robust;
    if let Some(w) = &rv.witness {
        u_subset_a &= is_acceptable(rho, w, m)?;
    }
    let res = (family.eps() / 4.0).max(1e-3);
    for z in family.discretize(x, res, 256, solver.seed)? {
        if !is_acceptable(rho, &z, m)? {
            u_subset_a = false;
            break;
        }
    }
    let agree = match rv.guarantee {
        Guarantee::Exact => x_in_robust == u_subset_a,
        _ => !x_in_robust || u_subset_a,
    };
    Ok(AcceptanceRecord {
        x_in_robust,
        u_subset_a,
        agree,
        guarantee: rv.guarantee,
        robust: rv.value,
    })
}

/// How ρ̃ is recovered from acceptance sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelForm {
    /// inf { m : U_X ⊆ 𝒜^m }.
    Inclusion,
    /// inf { m : U_X + m ⊆ 𝒜^0 }, for cash-additive ρ.
    Shifted,
}

/// Z ↦ ρ(Z + m).
#[derive(Debug)]
struct Shifted<'a> {
    rho: &'a dyn RiskFunctional,
    m: f64,
}

impl RiskFunctional for Shifted<'_> {
    fn evaluate(&self, x: &Position) -> Result<ExtReal> {
        self.rho.evaluate(&x.shift(self.m)?)
    }

    fn flags(&self) -> AxiomFlags {
        self.rho.flags()
    }

    fn name(&self) -> String {
        format!("{} shifted by {}", self.rho.name(), self.m)
    }

    fn linear_form(&self, space: &ProbSpace) -> Option<(ScenarioMeasure, f64)> {
        self.rho.linear_form(space).map(|(q, c)| (q, c - self.m))
    }
}

/// ρ̃(X) recovered by bisection over m of the subset test.
pub fn robust_level_by_sets(
    rho: &dyn RiskFunctional,
    family: &Family,
    x: &Position,
    bracket: Option<(f64, f64)>,
    solver: &Solver,
    form: LevelForm,
) -> Result<f64> {
    require_hypotheses(rho, family, x.space())?;
    let bracket = bracket.unwrap_or_else(|| {
        let (lo, hi) = default_bracket(x);
        (lo - family.eps(), hi + family.eps())
    });
    match form {
        LevelForm::Inclusion => {
            // The sup does not depend on m; solve once.
            let rv: RobustValue = robust_value(rho, family, x, solver)?;
            bisect_level(bracket, |m| Ok(rv.value <= ExtReal::from(m)))
        }
        LevelForm::Shifted => {
            if !rho.flags().cash_additive {
                return Err(Error::Hypothesis(format!(
                    "{} is not cash additive",
                    rho.name()
                )));
            }
            bisect_level(bracket, |m| {
                let shifted = Shifted { rho, m };
                Ok(robust_value(&shifted, family, x, solver)?.value <= ExtReal::Finite(0.0))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::RiskMeasure;
    use crate::sampling;
    use approx::assert_abs_diff_eq;

    fn half() -> ProbSpace {
        ProbSpace::uniform(2).unwrap()
    }

    #[test]
    fn floor_acceptance() {
        let s = half();
        let rho = RiskMeasure::expectation_floor(1.0).unwrap();
        let x = s.position(vec![-0.4, -0.6]).unwrap();
        assert!(!is_acceptable(&rho, &x, 0.9).unwrap());
        let y = s.position(vec![-1.0, -1.2]).unwrap();
        assert!(is_acceptable(&rho, &y, 1.2).unwrap());
        assert!(is_acceptable(&rho, &y, 1e18).unwrap());
        assert_abs_diff_eq!(
            acceptance_level(&rho, &x, None).unwrap(),
            1.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn inversion_identity() {
        let mut rng = sampling::rng(8);
        let s = ProbSpace::uniform(3).unwrap();
        for rho in [
            RiskMeasure::entropic(1.0).unwrap(),
            RiskMeasure::expected_shortfall(0.5).unwrap(),
            RiskMeasure::WorstCase,
        ] {
            for _ in 0..20 {
                let x = sampling::random_position(&mut rng, &s, 5.0);
                let r = rho.evaluate(&x).unwrap().to_f64();
                assert_abs_diff_eq!(acceptance_level(&rho, &x, None).unwrap(), r, epsilon = 1e-9);
                // A bracket missing the value is expanded.
                assert_abs_diff_eq!(
                    acceptance_level(&rho, &x, Some((r + 1.0, r + 2.0))).unwrap(),
                    r,
                    epsilon = 1e-9
                );
            }
        }
        let c = s.constant(0.25).unwrap();
        let ent = RiskMeasure::entropic(1.0).unwrap();
        assert_abs_diff_eq!(
            acceptance_level(&ent, &c, None).unwrap(),
            -0.25,
            epsilon = 1e-9
        );
    }

    #[test]
    fn robust_correspondence() {
        let s = half();
        let rho = RiskMeasure::expectation_floor(1.0).unwrap();
        let band = Family::sup_norm_ball(0.2).unwrap();
        let x = s.position(vec![-1.0, -1.4]).unwrap();
        // E[-X] = 1.2 ≤ m - ε at m = 1.5.
        let r = robust_acceptance_check(&rho, &band, &x, 1.5, &Solver::auto()).unwrap();
        assert!(r.x_in_robust && r.u_subset_a && r.agree);
        let r = robust_acceptance_check(&rho, &band, &x, 0.8, &Solver::auto()).unwrap();
        assert!(!r.x_in_robust && !r.u_subset_a && r.agree);
        let r = robust_acceptance_check(&rho, &band, &x, 1.3, &Solver::auto()).unwrap();
        assert!(!r.x_in_robust && !r.u_subset_a && r.agree);
    }

    #[test]
    fn levels_from_sets() {
        let s = half();
        let x = s.position(vec![0.3, -0.9]).unwrap();
        let band = Family::sup_norm_ball(0.25).unwrap();
        let floor = RiskMeasure::expectation_floor(0.5).unwrap();
        let v = robust_level_by_sets(
            &floor,
            &band,
            &x,
            None,
            &Solver::auto(),
            LevelForm::Inclusion,
        )
        .unwrap();
        assert_abs_diff_eq!(v, (0.3f64 + 0.25).max(0.5), epsilon = 1e-8);
        let v = robust_level_by_sets(
            &RiskMeasure::NegExpectation,
            &band,
            &x,
            None,
            &Solver::auto(),
            LevelForm::Shifted,
        )
        .unwrap();
        assert_abs_diff_eq!(v, 0.3 + 0.25, epsilon = 1e-8);
        assert!(
            robust_level_by_sets(&floor, &band, &x, None, &Solver::auto(), LevelForm::Shifted)
                .is_err()
        );
        let zero = Family::sup_norm_ball(0.0).unwrap();
        let ent = RiskMeasure::entropic(1.0).unwrap();
        let v = robust_level_by_sets(&ent, &zero, &x, None, &Solver::auto(), LevelForm::Inclusion)
            .unwrap();
        assert_abs_diff_eq!(v, ent.evaluate(&x).unwrap().to_f64(), epsilon = 1e-8);
    }
}
