//! Propensity and relevance estimation from interactions alone.
//!
//! A shared encoder `f_e` maps concatenated user and item embeddings to a
//! 64-dimensional pair representation, from which `f_p` predicts the
//! propensity and `f_r` the relevance. Training combines the interaction
//! likelihood of `p̂·r̂`, a pairwise popularity prior and a Beta prior on the
//! distribution of `p̂`.

use log::{debug, info};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::estimate::PropensityEstimate;
use crate::nn::{
    log_sigmoid, sigmoid, softplus, Activation, Adam, DenseNet, GradientTape, NetDocument,
    DEFAULT_LEAKY_SLOPE,
};
use crate::rng::{self, Rng};

/// Bounds applied to `p̂·r̂` inside the interaction likelihood.
pub const PRODUCT_CLAMP: f64 = 1e-12;
pub const KL_BINS: usize = 50;
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// `pop_i = count_i / Σ_j count_j`.
pub fn compute_popularity(data: &InteractionDataset) -> Result<Vec<f64>> {
    popularity_from_counts(&data.item_counts())
}

pub fn popularity_from_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input(
            "popularity undefined: the dataset has no interactions".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn clamped_product(p_hat: f64, r_hat: f64) -> (f64, bool) {
    let y = p_hat * r_hat;
    if y < PRODUCT_CLAMP {
        (PRODUCT_CLAMP, true)
    } else if y > 1.0 - PRODUCT_CLAMP {
        (1.0 - PRODUCT_CLAMP, true)
    } else {
        (y, false)
    }
}

/// Binary cross-entropy of the interaction `y` against `p̂·r̂`.
pub fn naive_loss(y: f64, p_hat: f64, r_hat: f64) -> f64 {
    let (prod, clamped) = clamped_product(p_hat, r_hat);
    if clamped {
        debug!("interaction probability {p_hat}·{r_hat} clamped");
    }
    -y * prod.ln() - (1.0 - y) * (1.0 - prod).ln()
}

/// Interaction likelihood and its partial derivatives in `(p̂, r̂)`.
pub fn naive_loss_grad(y: f64, p_hat: f64, r_hat: f64) -> (f64, f64, f64) {
    let (prod, clamped) = clamped_product(p_hat, r_hat);
    let loss = -y * prod.ln() - (1.0 - y) * (1.0 - prod).ln();
    if clamped {
        return (loss, 0.0, 0.0);
    }
    let d = -y / prod + (1.0 - y) / (1.0 - prod);
    (loss, d * r_hat, d * p_hat)
}

/// Variants of the pairwise popularity loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Drop the propensity margin.
    pub no_p: bool,
    /// Drop the relevance margin.
    pub no_r: bool,
    /// Reverse the popularity sign.
    pub neg: bool,
    /// Fix the pair weight at 1.
    pub kappa_one: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_p: false,
        no_r: false,
        neg: false,
        kappa_one: false,
    };
    pub const NO_P_R: Ablation = Ablation {
        no_p: true,
        no_r: true,
        neg: false,
        kappa_one: false,
    };
    pub const NEG: Ablation = Ablation {
        no_p: false,
        no_r: false,
        neg: true,
        kappa_one: false,
    };

    /// With both margins dropped the pairwise term vanishes.
    pub fn disables_pairwise(&self) -> bool {
        self.no_p && self.no_r
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.no_p && self.no_r {
            out.push("no_p_r");
        } else if self.no_p {
            out.push("no_p");
        } else if self.no_r {
            out.push("no_r");
        }
        if self.neg {
            out.push("neg");
        }
        if self.kappa_one {
            out.push("kappa_one");
        }
        out
    }
}

/// Model outputs for the two items of a triplet `(u, i, j)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairOutputs {
    pub p_i: f64,
    pub p_j: f64,
    pub r_i: f64,
    pub r_j: f64,
}

/// Partial derivatives of a triplet loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairGrad {
    pub p_i: f64,
    pub p_j: f64,
    pub r_i: f64,
    pub r_j: f64,
    pub eta_raw: f64,
}

/// `κ = exp(η·(y_i − y_j)²)` with `y = p·r`.
pub fn kappa(eta: f64, out: &PairOutputs) -> f64 {
    let d = out.p_i * out.r_i - out.p_j * out.r_j;
    (eta * d * d).exp()
}

/// `η = −softplus(raw)`; always negative.
pub fn eta_from_raw(eta_raw: f64) -> f64 {
    -softplus(eta_raw)
}

/// Pairwise popularity loss of a triplet with popularity sign `sgn`
/// (`+1` when item `i` is the more popular one). Returns the loss and its
/// gradient. The loss may be negative since the two sigmoids can sum past 1.
pub fn pairwise_pop_loss(
    out: &PairOutputs,
    sgn: f64,
    eta_raw: f64,
    ablation: Ablation,
) -> (f64, PairGrad) {
    let mut g = PairGrad::default();
    if ablation.disables_pairwise() {
        return (0.0, g);
    }
    let sgn = if ablation.neg { -sgn } else { sgn };
    let a = sigmoid(sgn * (out.p_i - out.p_j));
    let b = sigmoid(sgn * (out.r_j - out.r_i));
    let sum = if ablation.no_p {
        b
    } else if ablation.no_r {
        a
    } else {
        a + b
    };
    let log_sum = if ablation.no_p {
        log_sigmoid(sgn * (out.r_j - out.r_i))
    } else if ablation.no_r {
        log_sigmoid(sgn * (out.p_i - out.p_j))
    } else {
        sum.ln()
    };
    let eta = eta_from_raw(eta_raw);
    let d = out.p_i * out.r_i - out.p_j * out.r_j;
    let k = if ablation.kappa_one {
        1.0
    } else {
        (eta * d * d).exp()
    };
    let loss = -k * log_sum;

    let dsum = -k / sum;
    if !ablation.no_p {
        let da = dsum * sgn * a * (1.0 - a);
        g.p_i += da;
        g.p_j -= da;
    }
    if !ablation.no_r {
        let db = dsum * sgn * b * (1.0 - b);
        g.r_j += db;
        g.r_i -= db;
    }
    if !ablation.kappa_one {
        let dk = -log_sum;
        let dd = dk * k * eta * 2.0 * d;
        g.p_i += dd * out.r_i;
        g.r_i += dd * out.p_i;
        g.p_j -= dd * out.r_j;
        g.r_j -= dd * out.p_j;
        g.eta_raw = dk * k * d * d * -sigmoid(eta_raw);
    }
    (loss, g)
}

fn beta_bin_masses(alpha: f64, beta: f64) -> Result<Vec<f64>> {
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::Config(format!("invalid Beta({alpha}, {beta}): {e}")))?;
    let edges: Vec<f64> = (0..=KL_BINS).map(|b| dist.cdf(b as f64 / KL_BINS as f64)).collect();
    let masses: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
    if masses.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Numerical(format!(
            "Beta({alpha}, {beta}) puts no mass on some bin"
        )));
    }
    Ok(masses)
}

/// KL divergence of the 50-bin histogram of `samples` from the binned
/// `Beta(α, β)` distribution; empty bins contribute nothing.
pub fn kl_regularizer(samples: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Input("KL needs at least two samples".into()));
    }
    let masses = beta_bin_masses(alpha, beta)?;
    let mut counts = vec![0usize; KL_BINS];
    for &v in samples {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("sample {v} outside (0, 1)")));
        }
        counts[((v * KL_BINS as f64) as usize).min(KL_BINS - 1)] += 1;
    }
    let n = samples.len() as f64;
    Ok(counts
        .iter()
        .zip(&masses)
        .filter(|(&c, _)| c > 0)
        .map(|(&c, &m)| {
            let q = c as f64 / n;
            q * (q / m).ln()
        })
        .sum())
}

/// Differentiable stand-in for [`kl_regularizer`]: each sample spreads over
/// the bins with Gaussian weights around the bin centres, and the KL of the
/// resulting soft histogram from the binned Beta is returned with its
/// gradient in the samples.
#[derive(Debug, Clone)]
pub struct SoftBetaKl {
    centers: Vec<f64>,
    log_mass: Vec<f64>,
    inv_var: f64,
}

impl SoftBetaKl {
    /// `bandwidth` is the kernel standard deviation in units of bin width.
    pub fn new(alpha: f64, beta: f64, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("KL bandwidth must be positive, got {bandwidth}")));
        }
        let masses = beta_bin_masses(alpha, beta)?;
        let h = bandwidth / KL_BINS as f64;
        Ok(Self {
            centers: (0..KL_BINS).map(|b| (b as f64 + 0.5) / KL_BINS as f64).collect(),
            log_mass: masses.iter().map(|m| m.ln()).collect(),
            inv_var: 1.0 / (h * h),
        })
    }

    pub fn value_and_grad(&self, samples: &[f64]) -> (f64, Vec<f64>) {
        let n = samples.len();
        let nb = self.centers.len();
        let mut weights = vec![0.0; n * nb];
        let mut q = vec![0.0; nb];
        for (k, &x) in samples.iter().enumerate() {
            let w = &mut weights[k * nb..(k + 1) * nb];
            let mut peak = f64::NEG_INFINITY;
            for (b, c) in self.centers.iter().enumerate() {
                w[b] = -0.5 * (x - c).powi(2) * self.inv_var;
                peak = peak.max(w[b]);
            }
            let mut total = 0.0;
            for v in w.iter_mut() {
                *v = (*v - peak).exp();
                total += *v;
            }
            for (b, v) in w.iter_mut().enumerate() {
                *v /= total;
                q[b] += *v;
            }
        }
        q.iter_mut().for_each(|v| *v /= n as f64);
        let mut value = 0.0;
        let mut dq = vec![0.0; nb];
        for b in 0..nb {
            let lq = q[b].max(f64::MIN_POSITIVE).ln();
            value += q[b] * (lq - self.log_mass[b]);
            dq[b] = lq - self.log_mass[b] + 1.0;
        }
        let grad = samples
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let w = &weights[k * nb..(k + 1) * nb];
                let (mut gws, mut gw, mut ws) = (0.0, 0.0, 0.0);
                for b in 0..nb {
                    let slope = -(x - self.centers[b]) * self.inv_var;
                    gws += dq[b] * w[b] * slope;
                    gw += dq[b] * w[b];
                    ws += w[b] * slope;
                }
                (gws - gw * ws) / n as f64
            })
            .collect();
        (value, grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Training pairs visited per epoch; `None` visits every pair.
    pub pairs_per_epoch: Option<usize>,
    /// Size of the fixed validation sample used for early stopping.
    pub validation_pairs: usize,
    pub embedding_dim: usize,
    pub leaky_slope: f64,
    /// Kernel width of the differentiable KL term, in bin widths.
    pub kl_bandwidth: f64,
    pub optimizer: Optimizer,
    pub ablation: Ablation,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            mu: 0.4,
            alpha: 0.2,
            beta: 1.0,
            batch_size: 5096,
            learning_rate: 0.001,
            max_epochs: 50,
            patience: 5,
            pairs_per_epoch: None,
            validation_pairs: 20_000,
            embedding_dim: 128,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            kl_bandwidth: 0.5,
            optimizer: Optimizer::Adam,
            ablation: Ablation::FULL,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Config("lambda and mu must be finite and non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("Beta prior parameters must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.max_epochs == 0 || self.embedding_dim == 0 || self.validation_pairs == 0 {
            return Err(Error::Config(
                "max_epochs, embedding_dim and validation_pairs must be positive".into(),
            ));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder, propensity head, relevance head, embeddings and the pair-weight
/// temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PropCareModel {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub f_e: DenseNet,
    pub f_p: DenseNet,
    pub f_r: DenseNet,
    pub eta_raw: f64,
    pub seed: u64,
}

/// A training example: user, observed item, sampled contrast item and the
/// observed interaction of the first pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub user: usize,
    pub item: usize,
    pub other: usize,
    pub y: f64,
}

/// Gradients of the batch objective for every model parameter. Embedding
/// gradients are dense.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub user_emb: Array2<f64>,
    pub item_emb: Array2<f64>,
    pub f_e: GradientTape,
    pub f_p: GradientTape,
    pub f_r: GradientTape,
    pub eta_raw: f64,
}

/// Terms of the batch objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub naive: f64,
    pub pairwise: f64,
    pub kl: f64,
    pub total: f64,
}

struct BatchGrads {
    parts: LossParts,
    d_input: Array2<f64>,
    f_e: GradientTape,
    f_p: GradientTape,
    f_r: GradientTape,
    eta_raw: f64,
}

impl PropCareModel {
    pub fn initialize(num_users: usize, num_items: usize, config: &TrainConfig) -> Result<Self> {
        if num_users == 0 || num_items < 2 {
            return Err(Error::Input("need at least one user and two items".into()));
        }
        let d = config.embedding_dim;
        let mut rng = rng::stream(config.seed, "propcare-init");
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let user_emb = Array2::from_shape_simple_fn((num_users, d), || normal.sample(&mut rng));
        let item_emb = Array2::from_shape_simple_fn((num_items, d), || normal.sample(&mut rng));
        let slope = config.leaky_slope;
        let f_e = DenseNet::initialize(
            &[2 * d, 256, 128, 64],
            Activation::LeakyRelu,
            Activation::LeakyRelu,
            slope,
            &mut rng,
        )?;
        let head = [64, 64, 32, 16, 8, 1];
        let f_p = DenseNet::initialize(&head, Activation::LeakyRelu, Activation::Sigmoid, slope, &mut rng)?;
        let f_r = DenseNet::initialize(&head, Activation::LeakyRelu, Activation::Sigmoid, slope, &mut rng)?;
        Ok(Self {
            user_emb,
            item_emb,
            f_e,
            f_p,
            f_r,
            eta_raw: 0.0,
            seed: config.seed,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.nrows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.user_emb.ncols()
    }

    pub fn eta(&self) -> f64 {
        eta_from_raw(self.eta_raw)
    }

    fn pair_input(&self, pairs: &[(usize, usize)]) -> Array2<f64> {
        let d = self.embedding_dim();
        let mut x = Array2::zeros((pairs.len(), 2 * d));
        for (row, &(u, i)) in pairs.iter().enumerate() {
            x.slice_mut(s![row, ..d]).assign(&self.user_emb.row(u));
            x.slice_mut(s![row, d..]).assign(&self.item_emb.row(i));
        }
        x
    }

    fn check_index(&self, user: usize, item: usize) -> Result<()> {
        if user >= self.num_users() || item >= self.num_items() {
            return Err(Error::Input(format!(
                "pair (user {user}, item {item}) outside {}x{}",
                self.num_users(),
                self.num_items()
            )));
        }
        Ok(())
    }

    /// `(p̂, r̂)` for one pair.
    pub fn estimate(&self, user: usize, item: usize) -> Result<(f64, f64)> {
        self.check_index(user, item)?;
        let (p, r) = self.estimate_pairs(&[(user, item)])?;
        Ok((p[0], r[0]))
    }

    /// `(p̂, r̂)` for a list of pairs.
    pub fn estimate_pairs(&self, pairs: &[(usize, usize)]) -> Result<(Vec<f64>, Vec<f64>)> {
        for &(u, i) in pairs {
            self.check_index(u, i)?;
        }
        if pairs.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let h = self.f_e.predict_batch(self.pair_input(pairs).view())?;
        let p = self.f_p.predict_batch(h.view())?;
        let r = self.f_r.predict_batch(h.view())?;
        Ok((p.into_raw_vec_and_offset().0, r.into_raw_vec_and_offset().0))
    }

    /// `(p̂, r̂)` for every pair, row-major. The encoder's first affine map is
    /// split into per-user and per-item parts computed once.
    pub fn estimate_all(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.embedding_dim();
        let first = &self.f_e.layers()[0];
        let w_user = first.weights.slice(s![.., ..d]);
        let w_item = first.weights.slice(s![.., d..]);
        let user_part = self.user_emb.dot(&w_user.t());
        let mut item_part = self.item_emb.dot(&w_item.t());
        item_part += &first.bias;
        let (nu, ni) = (self.num_users(), self.num_items());
        let mut p_all = Vec::with_capacity(nu * ni);
        let mut r_all = Vec::with_capacity(nu * ni);
        for u in 0..nu {
            let mut z = item_part.clone();
            z += &user_part.row(u);
            let h = self.f_e.predict_from_first_preactivation(z)?;
            p_all.extend(self.f_p.predict_batch(h.view())?.iter().copied());
            r_all.extend(self.f_r.predict_batch(h.view())?.iter().copied());
        }
        Ok((p_all, r_all))
    }

    /// Estimates for every pair with the propensity scaled by `c` and
    /// exposure thresholded at `epsilon`.
    pub fn propensity_estimate(&self, c: f64, epsilon: f64) -> Result<PropensityEstimate> {
        let (p, _) = self.estimate_all()?;
        PropensityEstimate::from_p_hat(self.num_users(), self.num_items(), p, c, epsilon)
    }

    fn batch_gradients(
        &self,
        triplets: &[Triplet],
        pop: &[f64],
        config: &TrainConfig,
        kl: &SoftBetaKl,
    ) -> Result<BatchGrads> {
        let b = triplets.len();
        let mut pairs: Vec<(usize, usize)> = triplets.iter().map(|t| (t.user, t.item)).collect();
        pairs.extend(triplets.iter().map(|t| (t.user, t.other)));
        let cache_e = self.f_e.forward_batch(self.pair_input(&pairs))?;
        let h = cache_e.output().clone();
        let cache_p = self.f_p.forward_batch(h.clone())?;
        let cache_r = self.f_r.forward_batch(h)?;
        let p = cache_p.output().column(0).to_vec();
        let r = cache_r.output().column(0).to_vec();

        let mut dp = vec![0.0; 2 * b];
        let mut dr = vec![0.0; 2 * b];
        let mut d_eta = 0.0;
        let mut parts = LossParts::default();
        let scale = 1.0 / b as f64;
        for (k, t) in triplets.iter().enumerate() {
            let (ln, gp, gr) = naive_loss_grad(t.y, p[k], r[k]);
            parts.naive += ln * scale;
            dp[k] += gp * scale;
            dr[k] += gr * scale;
            if config.lambda > 0.0 && !config.ablation.disables_pairwise() {
                let (pi, pj) = (pop[t.item], pop[t.other]);
                if pi != pj {
                    let sgn = if pi > pj { 1.0 } else { -1.0 };
                    let out = PairOutputs {
                        p_i: p[k],
                        p_j: p[b + k],
                        r_i: r[k],
                        r_j: r[b + k],
                    };
                    let (lp, g) = pairwise_pop_loss(&out, sgn, self.eta_raw, config.ablation);
                    let w = config.lambda * scale;
                    parts.pairwise += lp * scale;
                    dp[k] += w * g.p_i;
                    dp[b + k] += w * g.p_j;
                    dr[k] += w * g.r_i;
                    dr[b + k] += w * g.r_j;
                    d_eta += w * g.eta_raw;
                }
            }
        }
        if config.mu > 0.0 {
            let (v, g) = kl.value_and_grad(&p[..b]);
            parts.kl = v;
            for (k, gk) in g.iter().enumerate() {
                dp[k] += config.mu * gk;
            }
        }
        parts.total = parts.naive + config.lambda * parts.pairwise + config.mu * parts.kl;
        if !parts.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective (naive {}, pairwise {}, kl {}, eta {})",
                parts.naive,
                parts.pairwise,
                parts.kl,
                self.eta()
            )));
        }

        let mut tape_p = GradientTape::zeros_like(&self.f_p);
        let mut tape_r = GradientTape::zeros_like(&self.f_r);
        let mut tape_e = GradientTape::zeros_like(&self.f_e);
        let up_p = Array2::from_shape_vec((2 * b, 1), dp).expect("column shape");
        let up_r = Array2::from_shape_vec((2 * b, 1), dr).expect("column shape");
        let mut dh = self.f_p.backward_batch(&cache_p, up_p, &mut tape_p)?;
        dh += &self.f_r.backward_batch(&cache_r, up_r, &mut tape_r)?;
        let d_input = self.f_e.backward_batch(&cache_e, dh, &mut tape_e)?;
        Ok(BatchGrads {
            parts,
            d_input,
            f_e: tape_e,
            f_p: tape_p,
            f_r: tape_r,
            eta_raw: d_eta,
        })
    }

    fn pair_rows(triplets: &[Triplet]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let b = triplets.len();
        triplets
            .iter()
            .enumerate()
            .map(|(k, t)| (k, t.user, t.item))
            .chain(triplets.iter().enumerate().map(move |(k, t)| (b + k, t.user, t.other)))
    }

    /// Mean batch objective and dense gradients for every parameter.
    pub fn loss_and_gradients(
        &self,
        triplets: &[Triplet],
        pop: &[f64],
        config: &TrainConfig,
    ) -> Result<(LossParts, ModelGradients)> {
        self.check_batch(triplets, pop)?;
        let kl = SoftBetaKl::new(config.alpha, config.beta, config.kl_bandwidth)?;
        let g = self.batch_gradients(triplets, pop, config, &kl)?;
        let (user_emb, item_emb) = self.embedding_gradients(triplets, &g);
        Ok((
            g.parts,
            ModelGradients {
                user_emb,
                item_emb,
                f_e: g.f_e,
                f_p: g.f_p,
                f_r: g.f_r,
                eta_raw: g.eta_raw,
            },
        ))
    }

    fn embedding_gradients(&self, triplets: &[Triplet], g: &BatchGrads) -> (Array2<f64>, Array2<f64>) {
        let d = self.embedding_dim();
        let mut user_emb = Array2::zeros(self.user_emb.raw_dim());
        let mut item_emb = Array2::zeros(self.item_emb.raw_dim());
        for (row, u, i) in Self::pair_rows(triplets) {
            let gr = g.d_input.row(row);
            let mut ue = user_emb.row_mut(u);
            ue += &gr.slice(s![..d]);
            let mut ie = item_emb.row_mut(i);
            ie += &gr.slice(s![d..]);
        }
        (user_emb, item_emb)
    }

    /// Gradient flattened in the order of [`PropCareModel::parameters`].
    fn flat_gradient(&self, triplets: &[Triplet], g: &BatchGrads) -> Vec<f64> {
        let (ue, ie) = self.embedding_gradients(triplets, g);
        let mut out: Vec<f64> = ue.into_raw_vec_and_offset().0;
        out.extend(ie.iter().copied());
        out.extend(g.f_e.flat());
        out.extend(g.f_p.flat());
        out.extend(g.f_r.flat());
        out.push(g.eta_raw);
        out
    }

    fn apply_adam(&mut self, triplets: &[Triplet], g: &BatchGrads, adam: &mut Adam) -> Result<()> {
        let grad = self.flat_gradient(triplets, g);
        let mut params = self.parameters();
        adam.step(&mut params, &grad)?;
        self.set_parameters(&params)
    }

    /// Mean batch objective only.
    pub fn loss(&self, triplets: &[Triplet], pop: &[f64], config: &TrainConfig) -> Result<LossParts> {
        self.loss_and_gradients(triplets, pop, config).map(|(l, _)| l)
    }

    fn check_batch(&self, triplets: &[Triplet], pop: &[f64]) -> Result<()> {
        if pop.len() != self.num_items() {
            return Err(Error::Shape(format!(
                "{} popularity values for {} items",
                pop.len(),
                self.num_items()
            )));
        }
        if triplets.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for t in triplets {
            self.check_index(t.user, t.item)?;
            self.check_index(t.user, t.other)?;
        }
        Ok(())
    }

    fn apply(&mut self, triplets: &[Triplet], g: &BatchGrads, lr: f64) -> Result<()> {
        self.f_e.sgd_step(&g.f_e, lr)?;
        self.f_p.sgd_step(&g.f_p, lr)?;
        self.f_r.sgd_step(&g.f_r, lr)?;
        self.eta_raw -= lr * g.eta_raw;
        let d = self.embedding_dim();
        for (row, u, i) in Self::pair_rows(triplets) {
            let gr = g.d_input.row(row);
            self.user_emb.row_mut(u).scaled_add(-lr, &gr.slice(s![..d]));
            self.item_emb.row_mut(i).scaled_add(-lr, &gr.slice(s![d..]));
        }
        debug_assert!(self.eta() < 0.0);
        Ok(())
    }

    /// All parameters flattened: user embeddings, item embeddings, `f_e`,
    /// `f_p`, `f_r`, then `eta_raw`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.user_emb.iter().copied().collect();
        out.extend(self.item_emb.iter().copied());
        out.extend(self.f_e.parameters());
        out.extend(self.f_p.parameters());
        out.extend(self.f_r.parameters());
        out.push(self.eta_raw);
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameters().len() {
            return Err(Error::Shape("parameter vector length mismatch".into()));
        }
        let (ue, rest) = flat.split_at(self.user_emb.len());
        self.user_emb.iter_mut().zip(ue).for_each(|(d, s)| *d = *s);
        let (ie, rest) = rest.split_at(self.item_emb.len());
        self.item_emb.iter_mut().zip(ie).for_each(|(d, s)| *d = *s);
        let (fe, rest) = rest.split_at(self.f_e.num_parameters());
        self.f_e.set_parameters(fe)?;
        let (fp, rest) = rest.split_at(self.f_p.num_parameters());
        self.f_p.set_parameters(fp)?;
        let (fr, rest) = rest.split_at(self.f_r.num_parameters());
        self.f_r.set_parameters(fr)?;
        self.eta_raw = rest[0];
        Ok(())
    }

    pub fn to_document(&self) -> PropCareDocument {
        PropCareDocument {
            format_version: MODEL_FORMAT_VERSION,
            seed: self.seed,
            num_users: self.num_users(),
            num_items: self.num_items(),
            embedding_dim: self.embedding_dim(),
            eta_raw: self.eta_raw,
            user_embeddings: self.user_emb.iter().copied().collect(),
            item_embeddings: self.item_emb.iter().copied().collect(),
            f_e: self.f_e.to_document(Some(self.seed)),
            f_p: self.f_p.to_document(Some(self.seed)),
            f_r: self.f_r.to_document(Some(self.seed)),
        }
    }

    pub fn from_document(doc: &PropCareDocument) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        let d = doc.embedding_dim;
        let emb = |v: &Vec<f64>, rows: usize, what: &str| -> Result<Array2<f64>> {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("{what} embeddings are not finite")));
            }
            Array2::from_shape_vec((rows, d), v.clone())
                .map_err(|_| Error::Shape(format!("{what} embeddings do not match {rows}x{d}")))
        };
        let user_emb = emb(&doc.user_embeddings, doc.num_users, "user")?;
        let item_emb = emb(&doc.item_embeddings, doc.num_items, "item")?;
        let f_e = DenseNet::from_document(&doc.f_e)?;
        let f_p = DenseNet::from_document(&doc.f_p)?;
        let f_r = DenseNet::from_document(&doc.f_r)?;
        if f_e.input_dim() != 2 * d
            || f_p.input_dim() != f_e.output_dim()
            || f_r.input_dim() != f_e.output_dim()
            || f_p.output_dim() != 1
            || f_r.output_dim() != 1
        {
            return Err(Error::Shape("network dimensions do not chain".into()));
        }
        if !doc.eta_raw.is_finite() || doc.num_users == 0 || doc.num_items < 2 {
            return Err(Error::Input("invalid model header".into()));
        }
        Ok(Self {
            user_emb,
            item_emb,
            f_e,
            f_p,
            f_r,
            eta_raw: doc.eta_raw,
            seed: doc.seed,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropCareDocument {
    pub format_version: u32,
    pub seed: u64,
    pub num_users: usize,
    pub num_items: usize,
    pub embedding_dim: usize,
    pub eta_raw: f64,
    /// Row-major `num_users × embedding_dim`.
    pub user_embeddings: Vec<f64>,
    /// Row-major `num_items × embedding_dim`.
    pub item_embeddings: Vec<f64>,
    pub f_e: NetDocument,
    pub f_p: NetDocument,
    pub f_r: NetDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub naive: f64,
    pub pairwise: f64,
    pub kl: f64,
    pub valid_loss: f64,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PropCareModel,
    pub history: Vec<EpochLog>,
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

/// Fixed sample of `(draw, user, item)` pairs for early stopping.
fn validation_sample(
    data: &[InteractionDataset],
    count: usize,
    seed: u64,
) -> Vec<(usize, usize, f64)> {
    let mut rng = rng::stream(seed, "propcare-validation");
    let (nu, ni) = (data[0].num_users(), data[0].num_items());
    (0..count)
        .map(|_| {
            let draw = rng.random_range(0..data.len());
            let (u, i) = (rng.random_range(0..nu), rng.random_range(0..ni));
            (u, i, data[draw].contains(u, i) as u8 as f64)
        })
        .collect()
}

fn validation_loss(model: &PropCareModel, sample: &[(usize, usize, f64)]) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = sample.iter().map(|&(u, i, _)| (u, i)).collect();
    let mut total = 0.0;
    for (chunk_pairs, chunk) in pairs.chunks(4096).zip(sample.chunks(4096)) {
        let (p, r) = model.estimate_pairs(chunk_pairs)?;
        total += chunk
            .iter()
            .zip(p.iter().zip(&r))
            .map(|(&(_, _, y), (&p, &r))| naive_loss(y, p, r))
            .sum::<f64>();
    }
    Ok(total / sample.len() as f64)
}

fn check_draws(draws: &[InteractionDataset], what: &str) -> Result<()> {
    let first = draws
        .first()
        .ok_or_else(|| Error::Input(format!("no {what} data")))?;
    if draws.iter().any(|d| !d.same_shape(first)) {
        return Err(Error::Shape(format!("{what} draws differ in shape")));
    }
    Ok(())
}

/// Train on one or more interaction draws over the same users and items.
/// Each epoch visits `pairs_per_epoch` distinct `(draw, user, item)` pairs
/// (all pairs when unset) in mini-batches, each with a fresh contrast item.
/// Training stops after `patience` epochs without a better validation
/// interaction loss, and the best model seen is returned.
pub fn train(
    train_data: &[InteractionDataset],
    valid_data: &[InteractionDataset],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_draws(train_data, "training")?;
    check_draws(valid_data, "validation")?;
    if !train_data[0].same_shape(&valid_data[0]) {
        return Err(Error::Shape("training and validation shapes differ".into()));
    }
    let (nu, ni) = (train_data[0].num_users(), train_data[0].num_items());
    let mut counts = vec![0u64; ni];
    for d in train_data {
        for (c, k) in counts.iter_mut().zip(d.item_counts()) {
            *c += k;
        }
    }
    let pop = popularity_from_counts(&counts)?;
    let kl = SoftBetaKl::new(config.alpha, config.beta, config.kl_bandwidth)?;

    let mut model = PropCareModel::initialize(nu, ni, config)?;
    let valid = validation_sample(valid_data, config.validation_pairs, config.seed);
    let mut rng = rng::stream(config.seed, "propcare-sampling");
    let per_draw = nu * ni;
    let total_pairs = per_draw * train_data.len();
    let mut order: Vec<u32> = (0..total_pairs as u32).collect();
    let visit = config.pairs_per_epoch.unwrap_or(total_pairs).min(total_pairs);

    let mut best = (validation_loss(&model, &valid)?, model.clone(), 0usize);
    info!("initial validation loss {:.6}", best.0);
    let mut history = Vec::new();
    let mut stale = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(Adam::new(model.parameters().len(), config.learning_rate)?),
        Optimizer::Sgd => None,
    };
    for epoch in 1..=config.max_epochs {
        let (picked, _) = order.partial_shuffle(&mut rng, visit);
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for chunk in picked.chunks(config.batch_size) {
            batch.clear();
            for &k in chunk {
                let k = k as usize;
                let (draw, rest) = (k / per_draw, k % per_draw);
                let (u, i) = (rest / ni, rest % ni);
                batch.push(Triplet {
                    user: u,
                    item: i,
                    other: sample_other(&mut rng, i, ni),
                    y: train_data[draw].dense()[rest] as u8 as f64,
                });
            }
            let g = model
                .batch_gradients(&batch, &pop, config, &kl)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {batches}: {e}")))?;
            match adam.as_mut() {
                Some(adam) => model.apply_adam(&batch, &g, adam)?,
                None => model.apply(&batch, &g, config.learning_rate)?,
            }
            sums.naive += g.parts.naive;
            sums.pairwise += g.parts.pairwise;
            sums.kl += g.parts.kl;
            sums.total += g.parts.total;
            batches += 1;
        }
        let valid_loss = validation_loss(&model, &valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss diverged in epoch {epoch}"
            )));
        }
        let n = batches as f64;
        let log = EpochLog {
            epoch,
            train_loss: sums.total / n,
            naive: sums.naive / n,
            pairwise: sums.pairwise / n,
            kl: sums.kl / n,
            valid_loss,
            eta: model.eta(),
        };
        info!(
            "epoch {epoch}: train {:.6} (naive {:.6}, pairwise {:.6}, kl {:.6}) valid {:.6} eta {:.4}",
            log.train_loss, log.naive, log.pairwise, log.kl, log.valid_loss, log.eta
        );
        history.push(log);
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
    Ok(TrainOutcome {
        model: best.1,
        history,
        best_epoch: best.2,
    })
}

/// Mean interaction loss of the model over every pair of `data`.
pub fn dataset_naive_loss(model: &PropCareModel, data: &InteractionDataset) -> Result<f64> {
    let (p, r) = model.estimate_all()?;
    let dense = data.dense();
    Ok(p.iter()
        .zip(&r)
        .zip(dense)
        .map(|((&p, &r), &y)| naive_loss(y as u8 as f64, p, r))
        .sum::<f64>()
        / dense.len() as f64)
}
