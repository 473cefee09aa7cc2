//! Finite probability spaces, positions, scenario measures and distributional helpers.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{param, Error, Result};

const SUM_TOL: f64 = 1e-12;

/// A finite outcome space with strictly positive reference probabilities.
#[derive(Clone, PartialEq)]
pub struct ProbSpace {
    probs: Arc<[f64]>,
}

impl fmt::Debug for ProbSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ProbSpace").field(&&*self.probs).finish()
    }
}

impl ProbSpace {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidSpace("no atoms".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 {
                return Err(Error::InvalidSpace(format!(
                    "atom {i} has probability {p}; atoms must be strictly positive"
                )));
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidSpace(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self {
            probs: probs.into(),
        })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSpace("no atoms".into()));
        }
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn n(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.n() as f64;
        self.probs.iter().all(|p| (p - u).abs() <= SUM_TOL)
    }

    pub fn position(&self, values: Vec<f64>) -> Result<Position> {
        Position::new(self.clone(), values)
    }

    pub fn constant(&self, c: f64) -> Result<Position> {
        Position::new(self.clone(), vec![c; self.n()])
    }

    /// The reference measure itself, density one everywhere.
    pub fn reference(&self) -> ScenarioMeasure {
        ScenarioMeasure {
            space: self.clone(),
            density: vec![1.0; self.n()],
        }
    }
}

/// A payoff vector over the atoms of a space; positive values are gains.
#[derive(Clone, Debug, PartialEq)]
pub struct Position {
    space: ProbSpace,
    values: Vec<f64>,
}

impl Position {
    pub fn new(space: ProbSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.n() {
            return Err(Error::InvalidPosition(format!(
                "{} values for a space with {} atoms",
                values.len(),
                space.n()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidPosition(format!(
                "value at atom {i} is not finite"
            )));
        }
        Ok(Self { space, values })
    }

    pub fn space(&self) -> &ProbSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    /// Builds a position on the same space, rejecting non-finite outputs.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Position::new(
            self.space.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip(&self, other: &Position, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        Position::new(
            self.space.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Position::new(self.space.clone(), values)
    }

    pub fn shift(&self, c: f64) -> Result<Self> {
        self.map(|v| v + c)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Position) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Position) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, other: &Position, lambda: f64) -> Result<Self> {
        self.zip(other, |a, b| lambda * a + (1.0 - lambda) * b)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L^p(P) norm, `p = f64::INFINITY` giving the max over atoms.
    pub fn lp_norm(&self, p: f64) -> f64 {
        lp_norm(self.space.probs(), &self.values, p)
    }

    pub fn le(&self, other: &Position) -> bool {
        self.values.iter().zip(&other.values).all(|(a, b)| a <= b)
    }

    pub(crate) fn check_same(&self, other: &Position) -> Result<()> {
        if self.space != other.space {
            return Err(Error::SpaceMismatch);
        }
        Ok(())
    }
}

pub(crate) fn lp_norm(probs: &[f64], v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return v.iter().fold(0.0, |m, x| m.max(x.abs()));
    }
    let s: f64 = probs.iter().zip(v).map(|(w, x)| w * x.abs().powf(p)).sum();
    s.powf(1.0 / p)
}

/// A probability measure given by its density with respect to the reference measure.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioMeasure {
    space: ProbSpace,
    density: Vec<f64>,
}

impl ScenarioMeasure {
    pub fn new(space: ProbSpace, density: Vec<f64>) -> Result<Self> {
        if density.len() != space.n() {
            return Err(Error::InvalidMeasure(format!(
                "{} density values for a space with {} atoms",
                density.len(),
                space.n()
            )));
        }
        if let Some(i) = density.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidMeasure(format!(
                "density at atom {i} is {}; must be finite and nonnegative",
                density[i]
            )));
        }
        let mass: f64 = space.probs().iter().zip(&density).map(|(p, d)| p * d).sum();
        if (mass - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidMeasure(format!(
                "density integrates to {mass}, expected 1"
            )));
        }
        Ok(Self { space, density })
    }

    /// From atom masses `q_i` (summing to one) rather than densities.
    pub fn from_masses(space: ProbSpace, masses: &[f64]) -> Result<Self> {
        if masses.len() != space.n() {
            return Err(Error::InvalidMeasure("mass vector has wrong length".into()));
        }
        let total: f64 = masses.iter().sum();
        let density = masses
            .iter()
            .zip(space.probs())
            .map(|(m, p)| m / total / p)
            .collect();
        Self::new(space, density)
    }

    pub fn space(&self) -> &ProbSpace {
        &self.space
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn masses(&self) -> Vec<f64> {
        self.density
            .iter()
            .zip(self.space.probs())
            .map(|(d, p)| d * p)
            .collect()
    }

    pub fn is_reference(&self) -> bool {
        self.density.iter().all(|d| (d - 1.0).abs() <= 1e-12)
    }

    pub(crate) fn check_space(&self, x: &Position) -> Result<()> {
        if &self.space != x.space() {
            return Err(Error::SpaceMismatch);
        }
        Ok(())
    }
}

pub fn expectation(x: &Position) -> f64 {
    x.space
        .probs()
        .iter()
        .zip(&x.values)
        .map(|(p, v)| p * v)
        .sum()
}

pub fn expectation_under(q: &ScenarioMeasure, x: &Position) -> Result<f64> {
    q.check_space(x)?;
    Ok(q.space
        .probs()
        .iter()
        .zip(&q.density)
        .zip(&x.values)
        .map(|((p, d), v)| p * d * v)
        .sum())
}

/// Value in the extended real line. Never holds NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtReal {
    NegInf,
    Finite(f64),
    PosInf,
}

impl ExtReal {
    /// Maps IEEE infinities to the matching variant. NaN is rejected.
    pub fn from_f64(v: f64) -> Result<Self> {
        if v.is_nan() {
            Err(Error::UndefinedArithmetic("NaN"))
        } else if v == f64::INFINITY {
            Ok(ExtReal::PosInf)
        } else if v == f64::NEG_INFINITY {
            Ok(ExtReal::NegInf)
        } else {
            Ok(ExtReal::Finite(v))
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtReal::Finite(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    /// IEEE view, infinities included.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtReal::NegInf => f64::NEG_INFINITY,
            ExtReal::Finite(v) => v,
            ExtReal::PosInf => f64::INFINITY,
        }
    }

    pub fn checked_add(self, other: ExtReal) -> Result<ExtReal> {
        use ExtReal::*;
        match (self, other) {
            (PosInf, NegInf) | (NegInf, PosInf) => {
                Err(Error::UndefinedArithmetic("(+inf) + (-inf)"))
            }
            (PosInf, _) | (_, PosInf) => Ok(PosInf),
            (NegInf, _) | (_, NegInf) => Ok(NegInf),
            (Finite(a), Finite(b)) => ExtReal::from_f64(a + b),
        }
    }

    pub fn checked_sub(self, other: ExtReal) -> Result<ExtReal> {
        self.checked_add(-other)
    }

    pub fn add_f64(self, v: f64) -> ExtReal {
        match self {
            ExtReal::Finite(a) => ExtReal::from_f64(a + v).unwrap_or(self),
            other => other,
        }
    }

    pub fn max(self, other: ExtReal) -> ExtReal {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: ExtReal) -> ExtReal {
        if other < self {
            other
        } else {
            self
        }
    }

    pub fn le_tol(self, other: ExtReal, tol: f64) -> bool {
        match (self, other) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a <= b + tol,
            _ => self <= other,
        }
    }
}

impl From<f64> for ExtReal {
    fn from(v: f64) -> Self {
        ExtReal::from_f64(v).expect("NaN converted to ExtReal")
    }
}

impl std::ops::Neg for ExtReal {
    type Output = ExtReal;
    fn neg(self) -> ExtReal {
        match self {
            ExtReal::NegInf => ExtReal::PosInf,
            ExtReal::PosInf => ExtReal::NegInf,
            ExtReal::Finite(v) => ExtReal::Finite(-v),
        }
    }
}

impl Eq for ExtReal {}

impl PartialOrd for ExtReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExtReal {
    fn cmp(&self, other: &Self) -> Ordering {
        use ExtReal::*;
        match (self, other) {
            (NegInf, NegInf) | (PosInf, PosInf) => Ordering::Equal,
            (NegInf, _) | (_, PosInf) => Ordering::Less,
            (_, NegInf) | (PosInf, _) => Ordering::Greater,
            (Finite(a), Finite(b)) => a.total_cmp(b),
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtReal::NegInf => f.write_str("-inf"),
            ExtReal::PosInf => f.write_str("+inf"),
            ExtReal::Finite(v) => write!(f, "{v}"),
        }
    }
}

impl Serialize for ExtReal {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtReal::Finite(v) => s.serialize_f64(*v),
            ExtReal::PosInf => s.serialize_str("+inf"),
            ExtReal::NegInf => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtReal {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => ExtReal::from_f64(v).map_err(serde::de::Error::custom),
            Raw::Text(t) => match t.as_str() {
                "+inf" | "inf" => Ok(ExtReal::PosInf),
                "-inf" => Ok(ExtReal::NegInf),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number, \"+inf\" or \"-inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// Left-continuous quantile function of a finite law, stored as sorted
/// distinct values with their cumulative probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileFunction {
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl QuantileFunction {
    pub fn from_atoms(values: &[f64], probs: &[f64]) -> Self {
        let mut atoms: Vec<(f64, f64)> =
            values.iter().copied().zip(probs.iter().copied()).collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out_v: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut out_c: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut acc = 0.0;
        for (v, p) in atoms {
            acc += p;
            match out_v.last() {
                Some(&last) if last == v => *out_c.last_mut().unwrap() = acc,
                _ => {
                    out_v.push(v);
                    out_c.push(acc);
                }
            }
        }
        // Pin the last breakpoint so the merge in `integrate_pair` ends exactly at 1.
        if let Some(c) = out_c.last_mut() {
            *c = 1.0;
        }
        Self {
            values: out_v,
            cumulative: out_c,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// F^{-1}(u) for u in (0, 1].
    pub fn eval(&self, u: f64) -> f64 {
        let i = self.cumulative.partition_point(|&c| c < u);
        self.values[i.min(self.values.len() - 1)]
    }

    /// Walks the merged breakpoints of two quantile functions, yielding
    /// (interval length, value of self, value of other) for each piece.
    fn pieces<'a>(&'a self, other: &'a QuantileFunction) -> Vec<(f64, f64, f64)> {
        let (mut i, mut j) = (0, 0);
        let mut prev = 0.0;
        let mut out = Vec::with_capacity(self.values.len() + other.values.len());
        while i < self.values.len() && j < other.values.len() {
            let (ci, cj) = (self.cumulative[i], other.cumulative[j]);
            let next = ci.min(cj);
            if next > prev {
                out.push((next - prev, self.values[i], other.values[j]));
            }
            prev = next;
            if ci <= next {
                i += 1;
            }
            if cj <= next {
                j += 1;
            }
        }
        out
    }
}

pub fn quantile_function(x: &Position) -> QuantileFunction {
    QuantileFunction::from_atoms(x.values(), x.space().probs())
}

/// Order-p Wasserstein distance between the laws of two positions, computed
/// on merged quantile breakpoints. The spaces may differ.
pub fn wasserstein_distance(x: &Position, y: &Position, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(param("p", format!("order must lie in [1, inf], got {p}")));
    }
    let pieces = quantile_function(x).pieces(&quantile_function(y));
    if p.is_infinite() {
        return Ok(pieces
            .iter()
            .fold(0.0, |m, &(_, a, b)| m.max((a - b).abs())));
    }
    let s: f64 = pieces
        .iter()
        .map(|&(w, a, b)| w * (a - b).abs().powf(p))
        .sum();
    Ok(s.powf(1.0 / p))
}

/// ∫₀¹ F⁻¹_A(u) F⁻¹_B(u) du for two random variables on the same space,
/// the largest value of E[A'B'] over rearrangements with the same laws.
pub fn comonotone_integral(probs: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let qa = QuantileFunction::from_atoms(a, probs);
    let qb = QuantileFunction::from_atoms(b, probs);
    qa.pieces(&qb).iter().map(|&(w, u, v)| w * u * v).sum()
}

/// Quantile-coupled value of E_Q[-X]: ∫ F⁻¹_{-X} F⁻¹_{dQ/dP} du.
pub fn comonotone_expectation(q: &ScenarioMeasure, x: &Position) -> Result<f64> {
    q.check_space(x)?;
    let neg: Vec<f64> = x.values().iter().map(|v| -v).collect();
    Ok(comonotone_integral(q.space().probs(), &neg, q.density()))
}

/// Relative entropy H(Q|P) = E_P[d ln d], with 0 ln 0 = 0.
pub fn relative_entropy(q: &ScenarioMeasure) -> ExtReal {
    let h: f64 = q
        .space()
        .probs()
        .iter()
        .zip(q.density())
        .map(|(p, &d)| if d > 0.0 { p * d * d.ln() } else { 0.0 })
        .sum();
    ExtReal::Finite(h.max(0.0))
}

/// L^q(P) norm of the density of Q.
pub fn density_norm(q: &ScenarioMeasure, exponent: f64) -> Result<f64> {
    if exponent.is_nan() || exponent < 1.0 {
        return Err(param(
            "q",
            format!("norm exponent must lie in [1, inf], got {exponent}"),
        ));
    }
    Ok(lp_norm(q.space().probs(), q.density(), exponent))
}

/// Hölder conjugate: 1/p + 1/q = 1.
pub fn conjugate_exponent(p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(param(
            "p",
            format!("exponent must lie in [1, inf], got {p}"),
        ));
    }
    Ok(if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    })
}

/// Equality of laws after merging equal values, tolerance 1e-12 on values and masses.
pub fn same_distribution(x: &Position, y: &Position) -> bool {
    let qx = merged_atoms(x);
    let qy = merged_atoms(y);
    qx.len() == qy.len()
        && qx
            .iter()
            .zip(&qy)
            .all(|(a, b)| (a.0 - b.0).abs() <= 1e-12 && (a.1 - b.1).abs() <= 1e-12)
}

fn merged_atoms(x: &Position) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = x
        .values()
        .iter()
        .copied()
        .zip(x.space().probs().iter().copied())
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (v, p) in atoms {
        match out.last_mut() {
            Some(last) if (v - last.0).abs() <= 1e-12 => last.1 += p,
            _ => out.push((v, p)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn half() -> ProbSpace {
        ProbSpace::new(vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn space_validation() {
        assert!(ProbSpace::new(vec![0.5, 0.4]).is_err());
        assert!(ProbSpace::new(vec![1.0, 0.0]).is_err());
        assert!(ProbSpace::new(vec![]).is_err());
        assert!(ProbSpace::new(vec![0.2, 0.8]).is_ok());
    }

    #[test]
    fn position_validation() {
        assert!(half().position(vec![1.0]).is_err());
        assert!(half().position(vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn expectations() {
        assert_eq!(expectation(&half().position(vec![1.0, 2.0]).unwrap()), 1.5);
        let one = ProbSpace::new(vec![1.0]).unwrap();
        assert_eq!(expectation(&one.constant(-4.25).unwrap()), -4.25);
        let s = ProbSpace::new(vec![0.2, 0.8]).unwrap();
        assert_abs_diff_eq!(
            expectation(&s.position(vec![10.0, 0.0]).unwrap()),
            2.0,
            epsilon = 1e-15
        );

        let x = half().position(vec![3.0, 7.0]).unwrap();
        let p = half().reference();
        assert_eq!(expectation_under(&p, &x).unwrap(), expectation(&x));
        let q = ScenarioMeasure::new(half(), vec![2.0, 0.0]).unwrap();
        assert_eq!(expectation_under(&q, &x).unwrap(), 3.0);
        let q = ScenarioMeasure::new(half(), vec![0.0, 2.0]).unwrap();
        assert_eq!(expectation_under(&q, &x).unwrap(), 7.0);
    }

    #[test]
    fn mismatched_spaces() {
        let other = ProbSpace::new(vec![0.2, 0.8]).unwrap();
        let x = other.position(vec![1.0, 2.0]).unwrap();
        assert_eq!(
            expectation_under(&half().reference(), &x),
            Err(Error::SpaceMismatch)
        );
    }

    #[test]
    fn measure_validation() {
        assert!(ScenarioMeasure::new(half(), vec![1.5, 0.4]).is_err());
        assert!(ScenarioMeasure::new(half(), vec![2.5, -0.5]).is_err());
    }

    #[test]
    fn quantiles() {
        let q = quantile_function(&half().position(vec![2.0, 1.0]).unwrap());
        assert_eq!(q.values(), &[1.0, 2.0]);
        assert_eq!(q.eval(0.25), 1.0);
        assert_eq!(q.eval(0.5), 1.0);
        assert_eq!(q.eval(0.5000001), 2.0);
        assert_eq!(q.eval(1.0), 2.0);
        let s3 = ProbSpace::uniform(3).unwrap();
        let q = quantile_function(&s3.position(vec![2.0, 1.0, 3.0]).unwrap());
        assert_eq!(q.values(), &[1.0, 2.0, 3.0]);
        let q = quantile_function(&s3.constant(7.0).unwrap());
        assert_eq!(q.values(), &[7.0]);
    }

    // Brute-force transport over all couplings of two uniform two-atom laws.
    fn coupling_cost(a: [f64; 2], b: [f64; 2], p: f64) -> f64 {
        let mut best = f64::INFINITY;
        for k in 0..=100 {
            let t = 0.5 * k as f64 / 100.0;
            let plan = [[t, 0.5 - t], [0.5 - t, t]];
            let mut c = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    c += plan[i][j] * (a[i] - b[j]).abs().powf(p);
                }
            }
            best = best.min(c);
        }
        best.powf(1.0 / p)
    }

    #[test]
    fn wasserstein_examples() {
        let x = half().position(vec![0.0, 1.0]).unwrap();
        let y = half().position(vec![1.0, 2.0]).unwrap();
        let d = wasserstein_distance(&x, &y, 1.0).unwrap();
        assert_abs_diff_eq!(
            d,
            coupling_cost([0.0, 1.0], [1.0, 2.0], 1.0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-15);
        assert_eq!(wasserstein_distance(&x, &x, 2.0).unwrap(), 0.0);
        let y = half().position(vec![0.0, 3.0]).unwrap();
        assert_eq!(wasserstein_distance(&x, &y, f64::INFINITY).unwrap(), 2.0);
        assert!(wasserstein_distance(&x, &y, 0.5).is_err());
    }

    #[test]
    fn wasserstein_matches_coupling_p2() {
        let x = half().position(vec![0.3, -1.0]).unwrap();
        let y = half().position(vec![2.0, 0.5]).unwrap();
        let d = wasserstein_distance(&x, &y, 2.0).unwrap();
        assert_abs_diff_eq!(
            d,
            coupling_cost([0.3, -1.0], [2.0, 0.5], 2.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn wasserstein_across_spaces() {
        let s = ProbSpace::new(vec![0.25, 0.25, 0.5]).unwrap();
        let x = s.position(vec![1.0, 1.0, 2.0]).unwrap();
        let y = half().position(vec![1.0, 2.0]).unwrap();
        assert_eq!(wasserstein_distance(&x, &y, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(relative_entropy(&half().reference()), ExtReal::Finite(0.0));
        let q = ScenarioMeasure::new(half(), vec![1.6, 0.4]).unwrap();
        let h = relative_entropy(&q).finite().unwrap();
        assert_abs_diff_eq!(h, 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.19274, epsilon = 1e-5);
        let q = ScenarioMeasure::new(half(), vec![2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(
            relative_entropy(&q).finite().unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn density_norms() {
        let q = ScenarioMeasure::new(half(), vec![2.0, 0.0]).unwrap();
        assert_abs_diff_eq!(density_norm(&q, 1.0).unwrap(), 1.0);
        assert_eq!(density_norm(&q, f64::INFINITY).unwrap(), 2.0);
        assert_abs_diff_eq!(
            density_norm(&half().reference(), 3.0).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert!(density_norm(&q, 0.9).is_err());
    }

    #[test]
    fn law_equality() {
        let x = half().position(vec![1.0, 2.0]).unwrap();
        assert!(same_distribution(
            &x,
            &half().position(vec![2.0, 1.0]).unwrap()
        ));
        assert!(!same_distribution(
            &x,
            &half().position(vec![1.0, 3.0]).unwrap()
        ));
        let s = ProbSpace::new(vec![0.25, 0.25, 0.5]).unwrap();
        assert!(same_distribution(
            &s.position(vec![1.0, 1.0, 2.0]).unwrap(),
            &x
        ));
    }

    #[test]
    fn ext_real_arithmetic() {
        use ExtReal::*;
        assert!(PosInf.checked_add(NegInf).is_err());
        assert_eq!(PosInf.checked_add(Finite(1.0)).unwrap(), PosInf);
        assert!(NegInf < Finite(-1e300));
        assert!(Finite(1e300) < PosInf);
        assert_eq!(-PosInf, NegInf);
        let s = serde_json::to_string(&vec![NegInf, Finite(0.5), PosInf]).unwrap();
        assert_eq!(s, r#"["-inf",0.5,"+inf"]"#);
        let back: Vec<ExtReal> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![NegInf, Finite(0.5), PosInf]);
    }

    #[test]
    fn comonotone_value() {
        // −X = (−1, −3); the coupling pairs the larger loss with the larger density.
        let x = half().position(vec![1.0, 3.0]).unwrap();
        let q = ScenarioMeasure::new(half(), vec![0.4, 1.6]).unwrap();
        let v = comonotone_expectation(&q, &x).unwrap();
        assert_abs_diff_eq!(v, -1.4, epsilon = 1e-15);
        assert_abs_diff_eq!(-expectation_under(&q, &x).unwrap(), -2.6, epsilon = 1e-15);
    }

    #[test]
    fn conjugates() {
        assert_eq!(conjugate_exponent(1.0).unwrap(), f64::INFINITY);
        assert_eq!(conjugate_exponent(f64::INFINITY).unwrap(), 1.0);
        assert_eq!(conjugate_exponent(2.0).unwrap(), 2.0);
    }
}
