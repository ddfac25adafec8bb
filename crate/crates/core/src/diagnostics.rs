//! Finite-difference gradient checks of the training objectives at random
//! points.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gradcheck::{central_difference, max_relative_error};
use crate::propcare::{naive_loss, naive_loss_grad, pairwise_pop_loss, Ablation, PairOutputs, SoftBetaKl};
use crate::ranker::{dlce_loss_grad, DlceConfig};
use crate::rng;

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub objective: String,
    pub points: usize,
    pub failures: usize,
    pub max_relative_error: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn summarize(objective: &str, errors: Vec<f64>) -> GradientCheck {
    GradientCheck {
        objective: objective.to_string(),
        points: errors.len(),
        failures: errors.iter().filter(|&&e| !(e <= GRADIENT_TOLERANCE)).count(),
        max_relative_error: errors.iter().copied().fold(0.0, f64::max),
    }
}

/// Check the interaction loss, the pairwise popularity loss, the
/// differentiable Beta KL term and the ranker loss at `points` random
/// inputs each.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    if points == 0 {
        return Err(Error::Config("need at least one check point".into()));
    }
    let mut rng = rng::stream(seed, "gradient-suite");

    let naive = (0..points)
        .map(|_| {
            let y = f64::from(u8::from(rng.random_bool(0.5)));
            let x = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
            let (_, dp, dr) = naive_loss_grad(y, x[0], x[1]);
            let num = central_difference(|v| naive_loss(y, v[0], v[1]), &x, STEP);
            max_relative_error(&[dp, dr], &num, FLOOR)
        })
        .collect();

    let pairwise = (0..points)
        .map(|_| {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.02..0.98)).collect();
            let eta_raw = rng.random_range(-2.0..2.0);
            let sgn = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let eval = |v: &[f64]| {
                let out = PairOutputs { p_i: v[0], p_j: v[1], r_i: v[2], r_j: v[3] };
                pairwise_pop_loss(&out, sgn, v[4], Ablation::FULL)
            };
            let mut all = x.clone();
            all.push(eta_raw);
            let (_, g) = eval(&all);
            let num = central_difference(|v| eval(v).0, &all, STEP);
            max_relative_error(&[g.p_i, g.p_j, g.r_i, g.r_j, g.eta_raw], &num, FLOOR)
        })
        .collect();

    let kl = SoftBetaKl::new(0.2, 1.0, 0.5)?;
    let divergence = (0..points)
        .map(|_| {
            let n = rng.random_range(2..24);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let (_, g) = kl.value_and_grad(&x);
            let num = central_difference(|v| kl.value_and_grad(v).0, &x, STEP);
            max_relative_error(&g, &num, FLOOR)
        })
        .collect();

    let ranker = (0..points)
        .map(|_| {
            let cfg = DlceConfig {
                omega: rng.random_range(0.5..2.0),
                ..DlceConfig::default()
            };
            let z = rng.random_bool(0.5);
            let p = rng.random_range(0.01..0.99);
            let diff = rng.random_range(-3.0..3.0);
            let (_, g) = dlce_loss_grad(true, z, p, diff, &cfg);
            let num = central_difference(|v| dlce_loss_grad(true, z, p, v[0], &cfg).0, &[diff], STEP);
            max_relative_error(&[g], &num, FLOOR)
        })
        .collect();

    Ok(vec![
        summarize("naive", naive),
        summarize("pairwise_pop", pairwise),
        summarize("kl_beta", divergence),
        summarize("dlce", ranker),
    ])
}
