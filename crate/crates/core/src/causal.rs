//! IPS causal-effect estimation, its bias under misestimated propensity and
//! exposure, Monte-Carlo checks of both, and the perturbations used to study
//! how estimation noise reaches the ranker.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Bounds applied to noised propensities.
pub const NOISE_CLIP: (f64, f64) = (0.01, 0.99);

fn check_interior(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} {v} outside (0, 1)")))
    }
}

/// `Z·Y/p − (1 − Z)·Y/(1 − p)`.
pub fn ips_estimate(z: bool, y: bool, p: f64) -> Result<f64> {
    check_interior("propensity", p)?;
    Ok(match (z, y) {
        (_, false) => 0.0,
        (true, true) => 1.0 / p,
        (false, true) => -1.0 / (1.0 - p),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasInputs {
    pub p: f64,
    pub p_hat: f64,
    /// `E[Ẑ − Z]`.
    pub delta_z: f64,
    pub y1: bool,
    pub y0: bool,
}

impl BiasInputs {
    pub fn validate(&self) -> Result<()> {
        check_interior("p", self.p)?;
        check_interior("p_hat", self.p_hat)?;
        let shifted = self.p + self.delta_z;
        if !(0.0..=1.0).contains(&shifted) {
            return Err(Error::Domain(format!(
                "p + delta_z = {shifted} is not a probability"
            )));
        }
        Ok(())
    }
}

/// Expected error of the IPS estimate when `p̂` and `Ẑ` replace `p` and `Z`:
/// `((p + Δz)/p̂ − 1)·y1 − ((1 − p − Δz)/(1 − p̂) − 1)·y0`.
pub fn bias_formula(inputs: &BiasInputs) -> Result<f64> {
    inputs.validate()?;
    let BiasInputs { p, p_hat, delta_z, y1, y0 } = *inputs;
    let t1 = ((p + delta_z) / p_hat - 1.0) * f64::from(u8::from(y1));
    let t0 = ((1.0 - p - delta_z) / (1.0 - p_hat) - 1.0) * f64::from(u8::from(y0));
    Ok(t1 - t0)
}

/// How the estimated exposure is produced from the true one in a trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExposureRule {
    /// `Ẑ = Z`.
    Exact,
    /// `Ẑ ~ Bernoulli(p + Δz)`, coupled to `Z` through a shared uniform so
    /// that `E[Ẑ − Z] = Δz`.
    Shifted(f64),
}

impl ExposureRule {
    pub fn delta_z(&self) -> f64 {
        match self {
            Self::Exact => 0.0,
            Self::Shifted(d) => *d,
        }
    }
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    pub fn from_sums(n: usize, sum: f64, sum_sq: f64) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / nf).sqrt(),
        }
    }

    /// Whether `target` lies within `k` standard errors of the mean. A zero
    /// standard error demands agreement to rounding.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr + 1e-12 * (1.0 + target.abs())
    }
}

/// Resample `Z ~ Bernoulli(p)` `trials` times, apply the IPS estimator
/// `Ẑ·y1/p̂ − (1 − Ẑ)·y0/(1 − p̂)` with `Ẑ` from the exposure rule, and
/// summarize `τ̂ − τ`. Trials draw from a sub-stream of `seed` that does not
/// depend on the other arguments.
pub fn monte_carlo_bias(
    p: f64,
    p_hat: f64,
    y1: bool,
    y0: bool,
    rule: ExposureRule,
    trials: usize,
    seed: u64,
) -> Result<MeanEstimate> {
    if trials < 100 {
        return Err(Error::Config(format!("need at least 100 trials, got {trials}")));
    }
    BiasInputs { p, p_hat, delta_z: rule.delta_z(), y1, y0 }.validate()?;
    let tau = f64::from(u8::from(y1)) - f64::from(u8::from(y0));
    let mut rng = rng::stream(seed, "monte-carlo-bias");
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..trials {
        let u: f64 = rng.random();
        let z = u < p;
        let z_hat = match rule {
            ExposureRule::Exact => z,
            ExposureRule::Shifted(d) => u < p + d,
        };
        // The estimator reads the potential outcome selected by Ẑ. With
        // Ẑ = Z this is the observed outcome.
        let y = if z_hat { y1 } else { y0 };
        let err = ips_estimate(z_hat, y, p_hat)? - tau;
        sum += err;
        sum_sq += err * err;
    }
    Ok(MeanEstimate::from_sums(trials, sum, sum_sq))
}

/// Negate exactly `round(fraction·n)` entries chosen uniformly without
/// replacement.
pub fn flip_exposure(z: &[bool], fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("flip fraction must lie in [0, 1], got {fraction}")));
    }
    let count = (fraction * z.len() as f64).round() as usize;
    let mut out = z.to_vec();
    let mut rng = rng::stream(seed, "flip-exposure");
    for k in sample(&mut rng, z.len(), count.min(z.len())) {
        out[k] = !out[k];
    }
    Ok(out)
}

/// `p + N(0, σ²)` per entry, clipped to `[0.01, 0.99]`. `σ = 0` returns the
/// input unchanged.
pub fn add_propensity_noise(p: &[f64], sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(p.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = rng::stream(seed, "propensity-noise");
    Ok(p.iter()
        .map(|&v| (v + normal.sample(&mut rng)).clamp(NOISE_CLIP.0, NOISE_CLIP.1))
        .collect())
}

/// Per-pair Monte-Carlo check of IPS on a panel: for each pair, the mean and
/// standard error of `τ̂ − τ` over `trials` resampled exposures.
pub fn ips_panel_check(
    p: &[f64],
    y1: &[bool],
    y0: &[bool],
    trials: usize,
    seed: u64,
) -> Result<Vec<MeanEstimate>> {
    if p.len() != y1.len() || p.len() != y0.len() {
        return Err(Error::Shape("p, y1 and y0 must have equal lengths".into()));
    }
    if trials < 2 {
        return Err(Error::Config("need at least two trials".into()));
    }
    let n = p.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut w1 = Vec::with_capacity(n);
    let mut w0 = Vec::with_capacity(n);
    for k in 0..n {
        check_interior("propensity", p[k])?;
        let tau = f64::from(u8::from(y1[k])) - f64::from(u8::from(y0[k]));
        w1.push(ips_estimate(true, y1[k], p[k])? - tau);
        w0.push(ips_estimate(false, y0[k], p[k])? - tau);
    }
    let mut rng = rng::stream(seed, "ips-panel-check");
    for _ in 0..trials {
        for k in 0..n {
            let e = if rng.random::<f64>() < p[k] { w1[k] } else { w0[k] };
            sum[k] += e;
            sum_sq[k] += e * e;
        }
    }
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &q)| MeanEstimate::from_sums(trials, s, q))
        .collect())
}
