//! Reference propensity estimators: uniform noise and item popularity.

use log::warn;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::estimate::PropensityEstimate;
use crate::rng;

/// Interior margin of the popularity mapping.
pub const POP_MARGIN: f64 = 0.01;
const RANDOM_MARGIN: f64 = 1e-6;

/// Independent `Uniform(1e-6, 1 − 1e-6)` propensities.
pub fn random_p_hat(num_users: usize, num_items: usize, seed: u64) -> Result<Vec<f64>> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::Input("random propensity needs U, I >= 1".into()));
    }
    let mut rng = rng::stream(seed, "baseline-random");
    Ok((0..num_users * num_items)
        .map(|_| rng.random_range(RANDOM_MARGIN..1.0 - RANDOM_MARGIN))
        .collect())
}

/// Min-max popularity mapped into `[0.01, 0.99]`, identical for every user.
/// Constant popularity maps to 0.5.
pub fn pop_p_hat_items(pop: &[f64]) -> Result<Vec<f64>> {
    if pop.is_empty() || pop.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input(
            "popularity must be a non-empty vector of non-negative values".into(),
        ));
    }
    let (lo, hi) = pop
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        warn!("all items equally popular; popularity propensity set to 0.5");
        return Ok(vec![0.5; pop.len()]);
    }
    Ok(pop
        .iter()
        .map(|&v| POP_MARGIN + (1.0 - 2.0 * POP_MARGIN) * (v - lo) / (hi - lo))
        .collect())
}

pub fn random_propensity(
    num_users: usize,
    num_items: usize,
    seed: u64,
    c: f64,
    epsilon: f64,
) -> Result<PropensityEstimate> {
    let p = random_p_hat(num_users, num_items, seed)?;
    PropensityEstimate::from_p_hat(num_users, num_items, p, c, epsilon)
}

pub fn pop_propensity(
    num_users: usize,
    pop: &[f64],
    c: f64,
    epsilon: f64,
) -> Result<PropensityEstimate> {
    let items = pop_p_hat_items(pop)?;
    let p: Vec<f64> = (0..num_users).flat_map(|_| items.iter().copied()).collect();
    PropensityEstimate::from_p_hat(num_users, pop.len(), p, c, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pop_mapping() {
        let p = pop_p_hat_items(&[0.5, 0.25, 0.25]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
        assert!((p[1] - 0.01).abs() < 1e-15);
        assert_eq!(p[1], p[2]);
        assert_eq!(pop_p_hat_items(&[0.2; 5]).unwrap(), vec![0.5; 5]);
        assert!(pop_p_hat_items(&[]).is_err());
    }

    #[test]
    fn pop_is_constant_across_users() {
        let e = pop_propensity(3, &[0.5, 0.3, 0.2], 1.0, 0.0).unwrap();
        assert_eq!(e.p_hat[..3], e.p_hat[3..6]);
        assert_eq!(e.p_hat[..3], e.p_hat[6..]);
    }

    #[test]
    fn random_is_seeded() {
        let a = random_p_hat(4, 5, 9).unwrap();
        assert_eq!(a, random_p_hat(4, 5, 9).unwrap());
        assert_ne!(a, random_p_hat(4, 5, 10).unwrap());
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
