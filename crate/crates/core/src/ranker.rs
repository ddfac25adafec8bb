//! Causal-effect ranker trained with a clipped inverse-propensity pairwise
//! loss. Scores are `ŝ_ui = x_u·v_i + b_i`.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::eval::Rankings;
use crate::nn::{sigmoid, softplus};
use crate::rng::{self, Rng};

pub const RANKER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DlceConfig {
    pub chi1: f64,
    pub chi0: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for DlceConfig {
    fn default() -> Self {
        Self {
            chi1: 0.1,
            chi0: 0.1,
            omega: 1.0,
            learning_rate: 0.01,
            l2: 1e-4,
            max_epochs: 50,
            patience: 5,
            dim: 64,
            seed: 0,
        }
    }
}

impl DlceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("chi1", self.chi1), ("chi0", self.chi0)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be positive, got {}", self.omega)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.l2 >= 0.0) || self.dim == 0 || self.max_epochs == 0 {
            return Err(Error::Config("invalid ranker l2, dim or epoch count".into()));
        }
        Ok(())
    }
}

/// Inverse-propensity weights `(Ẑ·Y / max(p̃, χ¹), (1 − Ẑ)·Y / max(1 − p̃, χ⁰))`.
fn weights(y: bool, z: bool, p: f64, config: &DlceConfig) -> (f64, f64) {
    if !y {
        return (0.0, 0.0);
    }
    if z {
        (1.0 / p.max(config.chi1), 0.0)
    } else {
        (0.0, 1.0 / (1.0 - p).max(config.chi0))
    }
}

/// Clipped IPS pairwise loss for score difference `ŝ_ui − ŝ_uj`.
pub fn dlce_loss(y: bool, z: bool, p: f64, s_ui: f64, s_uj: f64, config: &DlceConfig) -> f64 {
    dlce_loss_grad(y, z, p, s_ui - s_uj, config).0
}

/// Loss and derivative in the score difference.
pub fn dlce_loss_grad(y: bool, z: bool, p: f64, diff: f64, config: &DlceConfig) -> (f64, f64) {
    let (w1, w0) = weights(y, z, p, config);
    let x = config.omega * diff;
    let loss = w1 * softplus(-x) + w0 * softplus(x);
    let grad = config.omega * (-w1 * sigmoid(-x) + w0 * sigmoid(x));
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankerModel {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl RankerModel {
    pub fn initialize(num_users: usize, num_items: usize, config: &DlceConfig) -> Result<Self> {
        if num_users == 0 || num_items < 2 {
            return Err(Error::Input("ranker needs at least one user and two items".into()));
        }
        let mut rng = rng::stream(config.seed, "ranker-init");
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let d = config.dim;
        Ok(Self {
            dim: d,
            num_users,
            num_items,
            user_factors: (0..num_users * d).map(|_| normal.sample(&mut rng)).collect(),
            item_factors: (0..num_items * d).map(|_| normal.sample(&mut rng)).collect(),
            item_bias: vec![0.0; num_items],
        })
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        let d = self.dim;
        let x = &self.user_factors[user * d..(user + 1) * d];
        let v = &self.item_factors[item * d..(item + 1) * d];
        x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() + self.item_bias[item]
    }

    pub fn scores(&self, user: usize) -> Vec<f64> {
        (0..self.num_items).map(|i| self.score(user, i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.item_bias)
            .all(|v| v.is_finite())
    }

    /// Loss of one triplet and its gradient step applied in place.
    fn sgd_triplet(
        &mut self,
        u: usize,
        i: usize,
        j: usize,
        z: bool,
        p: f64,
        config: &DlceConfig,
    ) -> f64 {
        let diff = self.score(u, i) - self.score(u, j);
        let (loss, g) = dlce_loss_grad(true, z, p, diff, config);
        let (lr, l2, d) = (config.learning_rate, config.l2, self.dim);
        let (xu, vi, vj) = (u * d, i * d, j * d);
        for f in 0..d {
            let x = self.user_factors[xu + f];
            let a = self.item_factors[vi + f];
            let b = self.item_factors[vj + f];
            self.user_factors[xu + f] -= lr * (g * (a - b) + l2 * x);
            self.item_factors[vi + f] -= lr * (g * x + l2 * a);
            self.item_factors[vj + f] -= lr * (-g * x + l2 * b);
        }
        self.item_bias[i] -= lr * g;
        self.item_bias[j] += lr * g;
        loss
    }

    pub fn to_document(&self, seed: u64) -> RankerDocument {
        RankerDocument {
            format_version: RANKER_FORMAT_VERSION,
            seed,
            dim: self.dim,
            num_users: self.num_users,
            num_items: self.num_items,
            user_factors: self.user_factors.clone(),
            item_factors: self.item_factors.clone(),
            item_bias: self.item_bias.clone(),
        }
    }

    pub fn from_document(doc: &RankerDocument) -> Result<Self> {
        if doc.format_version != RANKER_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported ranker format version {}",
                doc.format_version
            )));
        }
        let model = Self {
            dim: doc.dim,
            num_users: doc.num_users,
            num_items: doc.num_items,
            user_factors: doc.user_factors.clone(),
            item_factors: doc.item_factors.clone(),
            item_bias: doc.item_bias.clone(),
        };
        let ok = doc.user_factors.len() == doc.num_users.saturating_mul(doc.dim)
            && doc.item_factors.len() == doc.num_items.saturating_mul(doc.dim)
            && doc.item_bias.len() == doc.num_items;
        if !ok {
            return Err(Error::Shape("ranker arrays do not match their dimensions".into()));
        }
        if !model.is_finite() {
            return Err(Error::Input("ranker parameters are not finite".into()));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankerDocument {
    pub format_version: u32,
    pub seed: u64,
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub item_bias: Vec<f64>,
}

/// Interactions of one draw together with the exposure used to weight them.
#[derive(Debug, Clone, Copy)]
pub struct RankerDraw<'a> {
    pub data: &'a InteractionDataset,
    pub exposure: &'a [bool],
}

#[derive(Debug, Clone)]
pub struct RankerOutcome {
    pub model: RankerModel,
    /// `(epoch, mean training loss, validation loss)`.
    pub history: Vec<(usize, f64, f64)>,
    pub best_epoch: usize,
}

fn sample_other(rng: &mut Rng, item: usize, num_items: usize) -> usize {
    let j = rng.random_range(0..num_items - 1);
    if j >= item {
        j + 1
    } else {
        j
    }
}

fn check_draws(draws: &[RankerDraw<'_>], nu: usize, ni: usize, what: &str) -> Result<()> {
    if draws.is_empty() {
        return Err(Error::Input(format!("no {what} draws")));
    }
    for d in draws {
        if d.data.num_users() != nu || d.data.num_items() != ni || d.exposure.len() != nu * ni {
            return Err(Error::Shape(format!(
                "{what} draw does not cover the {nu}x{ni} grid"
            )));
        }
    }
    Ok(())
}

/// Positive `(draw, user, item)` triples with a fixed contrast item each.
fn fixed_triplets(draws: &[RankerDraw<'_>], seed: u64, name: &str) -> Vec<(usize, usize, usize, usize)> {
    let mut rng = rng::stream(seed, name);
    let mut out = Vec::new();
    for (k, d) in draws.iter().enumerate() {
        for &(u, i) in d.data.positives() {
            let j = sample_other(&mut rng, i as usize, d.data.num_items());
            out.push((k, u as usize, i as usize, j));
        }
    }
    out
}

fn mean_loss(
    model: &RankerModel,
    draws: &[RankerDraw<'_>],
    triplets: &[(usize, usize, usize, usize)],
    propensity: &[f64],
    config: &DlceConfig,
) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let ni = model.num_items;
    triplets
        .iter()
        .map(|&(k, u, i, j)| {
            let idx = u * ni + i;
            dlce_loss(
                true,
                draws[k].exposure[idx],
                propensity[idx],
                model.score(u, i),
                model.score(u, j),
                config,
            )
        })
        .sum::<f64>()
        / triplets.len() as f64
}

/// SGD over `(u, i, j)` triplets. Each epoch visits every observed positive
/// `(u, i)` once with a fresh uniformly drawn `j ≠ i`; pairs without an
/// interaction carry zero loss and are skipped. Early stopping tracks the
/// loss on validation positives with fixed contrast items.
pub fn train_ranker(
    train: &[RankerDraw<'_>],
    valid: &[RankerDraw<'_>],
    propensity: &[f64],
    config: &DlceConfig,
) -> Result<RankerOutcome> {
    config.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::Input("no training draws".into()))?;
    let (nu, ni) = (first.data.num_users(), first.data.num_items());
    check_draws(train, nu, ni, "training")?;
    check_draws(valid, nu, ni, "validation")?;
    if propensity.len() != nu * ni {
        return Err(Error::Shape(format!(
            "{} propensities for {nu}x{ni} pairs",
            propensity.len()
        )));
    }
    if let Some(p) = propensity.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("propensity {p} outside (0, 1)")));
    }
    let mut model = RankerModel::initialize(nu, ni, config)?;
    let valid_triplets = fixed_triplets(valid, config.seed, "ranker-validation");
    let mut positives: Vec<(usize, usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(k, d)| d.data.positives().iter().map(move |&(u, i)| (k, u as usize, i as usize)))
        .collect();
    if positives.is_empty() {
        return Err(Error::Input("no training interactions".into()));
    }
    let mut rng = rng::stream(config.seed, "ranker-sampling");
    let mut best = (
        mean_loss(&model, valid, &valid_triplets, propensity, config),
        model.clone(),
        0usize,
    );
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        positives.shuffle(&mut rng);
        let mut total = 0.0;
        for &(k, u, i) in &positives {
            let j = sample_other(&mut rng, i, ni);
            let idx = u * ni + i;
            total += model.sgd_triplet(u, i, j, train[k].exposure[idx], propensity[idx], config);
        }
        if !total.is_finite() || !model.is_finite() {
            return Err(Error::Numerical(format!(
                "ranker loss diverged in epoch {epoch} (lr {})",
                config.learning_rate
            )));
        }
        let train_loss = total / positives.len() as f64;
        let valid_loss = mean_loss(&model, valid, &valid_triplets, propensity, config);
        info!("ranker epoch {epoch}: train {train_loss:.6} valid {valid_loss:.6}");
        history.push((epoch, train_loss, valid_loss));
        if valid_loss < best.0 {
            best = (valid_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(RankerOutcome {
        model: best.1,
        history,
        best_epoch: best.2,
    })
}

/// Items sorted by descending score; ties keep ascending item order.
pub fn rank_by_scores(scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    order
}

pub fn rank_items(model: &RankerModel, user: usize) -> Result<Vec<u32>> {
    if user >= model.num_users {
        return Err(Error::Input(format!("user {user} outside 0..{}", model.num_users)));
    }
    Ok(rank_by_scores(&model.scores(user)))
}

pub fn rank_all(model: &RankerModel) -> Result<Rankings> {
    let orders = (0..model.num_users)
        .map(|u| rank_by_scores(&model.scores(u)))
        .collect();
    Rankings::new(model.num_items, orders)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let cfg = DlceConfig::default();
        assert_eq!(dlce_loss(false, true, 0.3, 2.0, -1.0, &cfg), 0.0);
        let v = dlce_loss(true, true, 0.5, 0.0, 0.0, &cfg);
        assert!((v - 2.0 * 2f64.ln()).abs() < 1e-12);
        let clipped = dlce_loss(true, true, 0.05, 0.0, 0.0, &cfg);
        assert!((clipped - 10.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by_scores(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_by_scores(&[0.3; 4]), vec![0, 1, 2, 3]);
    }
}
