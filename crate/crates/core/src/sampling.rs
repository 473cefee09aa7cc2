//! Seeded random generation of spaces, positions and measures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::Result;
use crate::prob::{Position, ProbSpace, ScenarioMeasure};

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for sub-task `k` of a run seeded with `seed`.
pub fn substream(seed: u64, k: u64) -> Rng64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k.wrapping_add(1));
    r
}

/// Dirichlet(1) weights.
pub fn simplex_point(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(Exp1) + 1e-300)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// A space with random probabilities bounded below by `0.2 / n`.
pub fn random_space(rng: &mut impl Rng, n: usize) -> Result<ProbSpace> {
    let w = simplex_point(rng, n);
    let floor = 0.2 / n as f64;
    let mut probs: Vec<f64> = w.iter().map(|x| floor + 0.8 * x).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let fix: f64 = 1.0 - probs[1..].iter().sum::<f64>();
    probs[0] = fix;
    ProbSpace::new(probs)
}

/// Values drawn uniformly from `[-scale, scale]`.
pub fn random_position(rng: &mut impl Rng, space: &ProbSpace, scale: f64) -> Position {
    let values = (0..space.n())
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    Position::new(space.clone(), values).expect("finite draws")
}

/// Nonnegative perturbation with values in `[0, scale]`.
pub fn random_nonnegative(rng: &mut impl Rng, space: &ProbSpace, scale: f64) -> Position {
    let values = (0..space.n())
        .map(|_| rng.random_range(0.0..=scale))
        .collect();
    Position::new(space.clone(), values).expect("finite draws")
}

/// Dirichlet(1) scenario measure.
pub fn random_measure(rng: &mut impl Rng, space: &ProbSpace) -> ScenarioMeasure {
    let masses = simplex_point(rng, space.n());
    ScenarioMeasure::from_masses(space.clone(), &masses).expect("valid masses")
}

/// Random permutation of the values of `x`.
pub fn shuffled(rng: &mut impl Rng, x: &Position) -> Position {
    use rand::seq::SliceRandom;
    let mut v = x.values().to_vec();
    v.shuffle(rng);
    x.with_values(v).expect("permutation of finite values")
}

/// Unit-sup-norm direction.
pub fn random_direction(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let m = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if m > 1e-6 {
            return v.into_iter().map(|x| x / m).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_streams() {
        let s = ProbSpace::uniform(3).unwrap();
        let a = random_position(&mut rng(7), &s, 1.0);
        let b = random_position(&mut rng(7), &s, 1.0);
        assert_eq!(a, b);
        let c = random_position(&mut substream(7, 0), &s, 1.0);
        let d = random_position(&mut substream(7, 1), &s, 1.0);
        assert_ne!(c, d);
    }

    #[test]
    fn random_objects_are_valid() {
        let mut r = rng(1);
        for n in 1..6 {
            let s = random_space(&mut r, n).unwrap();
            assert!(s.probs().iter().all(|&p| p > 0.0));
            let q = random_measure(&mut r, &s);
            assert_eq!(q.density().len(), n);
        }
    }
}
