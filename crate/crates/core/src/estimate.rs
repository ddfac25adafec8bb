//! Per-pair propensity estimates and the exposure labels derived from them.

use log::warn;

use crate::error::{Error, Result};

/// Lower bound applied to scaled propensities.
pub const SCALED_FLOOR: f64 = 1e-6;

/// Estimated propensity, its scaled version and the derived exposure for
/// every pair, row-major over `U × I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityEstimate {
    num_users: usize,
    num_items: usize,
    pub p_hat: Vec<f64>,
    pub p_scaled: Vec<f64>,
    pub z_hat: Vec<bool>,
}

impl PropensityEstimate {
    pub fn new(
        num_users: usize,
        num_items: usize,
        p_hat: Vec<f64>,
        p_scaled: Vec<f64>,
        z_hat: Vec<bool>,
    ) -> Result<Self> {
        let n = num_users
            .checked_mul(num_items)
            .ok_or_else(|| Error::Input("U·I overflows".into()))?;
        if n == 0 {
            return Err(Error::Input("estimate needs at least one pair".into()));
        }
        if p_hat.len() != n || p_scaled.len() != n || z_hat.len() != n {
            return Err(Error::Shape(format!(
                "estimate arrays must have {n} entries for {num_users}x{num_items}"
            )));
        }
        for (name, v) in [("p_hat", &p_hat), ("p_scaled", &p_scaled)] {
            if let Some(k) = v.iter().position(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(Error::Domain(format!(
                    "{name} {} at (user {}, item {}) outside (0, 1)",
                    v[k],
                    k / num_items,
                    k % num_items
                )));
            }
        }
        Ok(Self {
            num_users,
            num_items,
            p_hat,
            p_scaled,
            z_hat,
        })
    }

    /// Scale raw propensities by `c` and threshold their z-scores at `epsilon`.
    pub fn from_p_hat(
        num_users: usize,
        num_items: usize,
        p_hat: Vec<f64>,
        c: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let p_scaled = p_hat
            .iter()
            .map(|&p| scale_propensity(p, c))
            .collect::<Result<Vec<_>>>()?;
        let z_hat = derive_exposure(&p_hat, epsilon)?;
        Self::new(num_users, num_items, p_hat, p_scaled, z_hat)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_pairs(&self) -> usize {
        self.p_hat.len()
    }
}

/// Z-score normalize `p_hat` and mark pairs whose score reaches `epsilon` as
/// exposed. With zero spread every normalized value is 0.
pub fn derive_exposure(p_hat: &[f64], epsilon: f64) -> Result<Vec<bool>> {
    if p_hat.len() < 2 {
        return Err(Error::Input("exposure derivation needs at least two values".into()));
    }
    if !epsilon.is_finite() {
        return Err(Error::Config(format!("threshold must be finite, got {epsilon}")));
    }
    if p_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite propensity estimate".into()));
    }
    let n = p_hat.len() as f64;
    let mean = p_hat.iter().sum::<f64>() / n;
    let sd = (p_hat.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    if sd == 0.0 {
        warn!("all propensity estimates are equal; normalized scores set to 0");
        return Ok(vec![0.0 >= epsilon; p_hat.len()]);
    }
    Ok(p_hat.iter().map(|&p| (p - mean) / sd >= epsilon).collect())
}

/// `max(c·p_hat, 1e-6)` for `c ∈ (0, 1]`.
pub fn scale_propensity(p_hat: f64, c: f64) -> Result<f64> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Config(format!("scale c must lie in (0, 1], got {c}")));
    }
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(Error::Domain(format!("propensity {p_hat} outside (0, 1)")));
    }
    Ok((c * p_hat).max(SCALED_FLOOR))
}
