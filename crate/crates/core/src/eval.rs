//! Ranking metrics on causal effects, estimate-quality metrics, a logistic
//! matrix-factorization interaction model and the popularity-consistency
//! check.

use log::warn;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{compute_interactions, GroundTruthPanel, InteractionDataset};
use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, sigmoid};
use crate::rng;

pub const KLD_BINS: usize = 50;

/// One ranked list of all items per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rankings {
    num_items: usize,
    orders: Vec<Vec<u32>>,
}

impl Rankings {
    pub fn new(num_items: usize, orders: Vec<Vec<u32>>) -> Result<Self> {
        let mut seen = vec![usize::MAX; num_items];
        for (u, order) in orders.iter().enumerate() {
            if order.len() != num_items {
                return Err(Error::Shape(format!(
                    "ranking of user {u} has {} items, expected {num_items}",
                    order.len()
                )));
            }
            for &i in order {
                let i = i as usize;
                if i >= num_items || seen[i] == u {
                    return Err(Error::Input(format!(
                        "ranking of user {u} is not a permutation (item {i})"
                    )));
                }
                seen[i] = u;
            }
        }
        Ok(Self { num_items, orders })
    }

    pub fn num_users(&self) -> usize {
        self.orders.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn order(&self, user: usize) -> &[u32] {
        &self.orders[user]
    }

    pub fn orders(&self) -> &[Vec<u32>] {
        &self.orders
    }
}

fn check_tau(rankings: &Rankings, tau: &[i8]) -> Result<()> {
    let n = rankings.num_users() * rankings.num_items();
    if tau.len() != n || rankings.num_users() == 0 {
        return Err(Error::Shape(format!(
            "{} causal effects for {} users x {} items",
            tau.len(),
            rankings.num_users(),
            rankings.num_items()
        )));
    }
    Ok(())
}

/// Mean over users of the average causal effect among the top `k` items.
pub fn cp_at_k(rankings: &Rankings, tau: &[i8], k: usize) -> Result<f64> {
    check_tau(rankings, tau)?;
    if k == 0 || k > rankings.num_items() {
        return Err(Error::Input(format!(
            "K must lie in 1..={}, got {k}",
            rankings.num_items()
        )));
    }
    let ni = rankings.num_items();
    let total: f64 = rankings
        .orders
        .iter()
        .enumerate()
        .map(|(u, order)| {
            order[..k]
                .iter()
                .map(|&i| tau[u * ni + i as usize] as f64)
                .sum::<f64>()
                / k as f64
        })
        .sum();
    Ok(total / rankings.num_users() as f64)
}

/// Mean over users of `Σ τ / log₂(1 + rank)` with 1-based ranks.
pub fn cdcg(rankings: &Rankings, tau: &[i8]) -> Result<f64> {
    check_tau(rankings, tau)?;
    let ni = rankings.num_items();
    let discount: Vec<f64> = (1..=ni).map(|r| 1.0 / ((1 + r) as f64).log2()).collect();
    let total: f64 = rankings
        .orders
        .iter()
        .enumerate()
        .map(|(u, order)| {
            order
                .iter()
                .zip(&discount)
                .map(|(&i, d)| tau[u * ni + i as usize] as f64 * d)
                .sum::<f64>()
        })
        .sum();
    Ok(total / rankings.num_users() as f64)
}

fn histogram(values: &[f64], what: &str) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; KLD_BINS];
    for &v in values {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Domain(format!("{what} value {v} outside (0, 1)")));
        }
        let b = ((v * KLD_BINS as f64) as usize).min(KLD_BINS - 1);
        counts[b] += 1.0;
    }
    Ok(counts)
}

/// Histogram KL divergence of the estimated propensity distribution from the
/// true one over 50 equal-width bins on (0, 1). Both histograms get one
/// pseudo-count per bin, so identical samples score exactly 0 and every bin
/// has support on both sides.
pub fn kld_propensity(p_hat: &[f64], p_true: &[f64]) -> Result<f64> {
    if p_hat.is_empty() || p_true.is_empty() {
        return Err(Error::Input("KLD needs non-empty samples".into()));
    }
    let q = histogram(p_hat, "estimated propensity")?;
    let r = histogram(p_true, "true propensity")?;
    let nq = p_hat.len() as f64 + KLD_BINS as f64;
    let nr = p_true.len() as f64 + KLD_BINS as f64;
    Ok(q.iter()
        .zip(&r)
        .map(|(&cq, &cr)| {
            let qb = (cq + 1.0) / nq;
            let rb = (cr + 1.0) / nr;
            qb * (qb / rb).ln()
        })
        .sum())
}

/// Sum of `t(t−1)/2` over runs of equal adjacent values.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<T> = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
            prev = Some(v);
        }
    }
    total + run * run.saturating_sub(1) / 2
}

/// Merge sort that returns the number of inversions.
fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = count_inversions(&mut v[..mid], &mut buf[..mid])
        + count_inversions(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Tie-corrected Kendall rank correlation (tau-b) in `O(n log n)`.
pub fn kendalls_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "tau needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Input("tau needs at least two observations".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Input("tau inputs contain NaN".into()));
    }
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_unstable_by(|&x, &y| a[x].total_cmp(&a[y]).then(b[x].total_cmp(&b[y])));
    let ties_a = tied_pairs(idx.iter().map(|&k| a[k].to_bits()));
    let ties_ab = tied_pairs(idx.iter().map(|&k| (a[k].to_bits(), b[k].to_bits())));
    let mut bs: Vec<f64> = idx.iter().map(|&k| b[k]).collect();
    let mut buf = vec![0.0; n];
    let discordant = count_inversions(&mut bs, &mut buf);
    let ties_b = tied_pairs(bs.iter().map(|v| v.to_bits()));
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let denom = ((n0 - ties_a) as f64 * (n0 - ties_b) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Input(
            "tau undefined: one argument has all values tied".into(),
        ));
    }
    let s = n0 as f64 - ties_a as f64 - ties_b as f64 + ties_ab as f64 - 2.0 * discordant as f64;
    Ok((s / denom).clamp(-1.0, 1.0))
}

/// `2TP / (2TP + FP + FN)` with exposure as the positive class.
pub fn f1_exposure(z_hat: &[bool], z_true: &[bool]) -> Result<f64> {
    if z_hat.len() != z_true.len() {
        return Err(Error::Shape(format!(
            "F1 needs equal lengths, got {} and {}",
            z_hat.len(),
            z_true.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&h, &t) in z_hat.iter().zip(z_true) {
        match (h, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        warn!("F1 with no actual and no predicted exposures; reporting 0");
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

/// Ranks starting at 1 with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(
            "Spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Input("Spearman undefined for a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cp_at_10: f64,
    pub cp_at_100: f64,
    pub cdcg: f64,
    pub kld: f64,
    pub tau: f64,
    pub f1: f64,
    pub metadata: ReportMetadata,
}

/// JSON schema that every serialized [`MetricsReport`] satisfies.
pub const METRICS_REPORT_SCHEMA: &str = include_str!("metrics_report.schema.json");

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticMfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Uniformly sampled pairs per observed positive in each epoch.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for LogisticMfConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 20,
            learning_rate: 0.05,
            l2: 1e-4,
            negatives: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticMfModel {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub user_factors: Vec<f64>,
    pub item_factors: Vec<f64>,
    pub user_bias: Vec<f64>,
    pub item_bias: Vec<f64>,
    pub global_bias: f64,
}

impl LogisticMfModel {
    fn logit(&self, u: usize, i: usize) -> f64 {
        let d = self.dim;
        let pu = &self.user_factors[u * d..(u + 1) * d];
        let qi = &self.item_factors[i * d..(i + 1) * d];
        pu.iter().zip(qi).map(|(a, b)| a * b).sum::<f64>()
            + self.user_bias[u]
            + self.item_bias[i]
            + self.global_bias
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        sigmoid(self.logit(user, item))
    }

    /// Predictions for every pair, row-major.
    pub fn predict_all(&self) -> Vec<f64> {
        (0..self.num_users)
            .flat_map(|u| (0..self.num_items).map(move |i| (u, i)))
            .map(|(u, i)| self.predict(u, i))
            .collect()
    }

    /// Mean binary cross-entropy over every pair of `data`.
    pub fn loss(&self, data: &InteractionDataset) -> f64 {
        let dense = data.dense();
        let mut total = 0.0;
        for u in 0..self.num_users {
            for i in 0..self.num_items {
                let s = self.logit(u, i);
                total -= if dense[u * self.num_items + i] {
                    log_sigmoid(s)
                } else {
                    log_sigmoid(-s)
                };
            }
        }
        total / data.num_pairs() as f64
    }
}

/// Fit `σ(p_u·q_i + b_u + b_i + b)` to the interactions by SGD on binary
/// cross-entropy. Each epoch visits every positive once and draws
/// `negatives` uniform pairs per positive, labelled by the data.
pub fn fit_logistic_mf(data: &InteractionDataset, config: &LogisticMfConfig) -> Result<LogisticMfModel> {
    if data.num_positives() == 0 || data.num_positives() == data.num_pairs() {
        return Err(Error::Input(
            "logistic MF needs both positive and negative pairs".into(),
        ));
    }
    if config.dim == 0 || !(config.learning_rate > 0.0) || config.l2 < 0.0 {
        return Err(Error::Config("invalid logistic MF hyperparameters".into()));
    }
    let (nu, ni, d) = (data.num_users(), data.num_items(), config.dim);
    let mut rng = rng::stream(config.seed, "logistic-mf");
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let rate = data.num_positives() as f64 / data.num_pairs() as f64;
    let mut model = LogisticMfModel {
        dim: d,
        num_users: nu,
        num_items: ni,
        user_factors: (0..nu * d).map(|_| init.sample(&mut rng)).collect(),
        item_factors: (0..ni * d).map(|_| init.sample(&mut rng)).collect(),
        user_bias: vec![0.0; nu],
        item_bias: vec![0.0; ni],
        global_bias: (rate / (1.0 - rate)).ln(),
    };
    let dense = data.dense();
    let mut order: Vec<usize> = (0..data.num_positives()).collect();
    let (lr, l2) = (config.learning_rate, config.l2);
    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &k in &order {
            let (u, i) = data.positives()[k];
            let step = |u: usize, i: usize, y: f64, model: &mut LogisticMfModel| {
                let g = sigmoid(model.logit(u, i)) - y;
                let (pu, qi) = (u * d, i * d);
                for f in 0..d {
                    let a = model.user_factors[pu + f];
                    let b = model.item_factors[qi + f];
                    model.user_factors[pu + f] -= lr * (g * b + l2 * a);
                    model.item_factors[qi + f] -= lr * (g * a + l2 * b);
                }
                model.user_bias[u] -= lr * g;
                model.item_bias[i] -= lr * g;
            };
            step(u as usize, i as usize, 1.0, &mut model);
            for _ in 0..config.negatives {
                let (v, j) = (rng.random_range(0..nu), rng.random_range(0..ni));
                step(v, j, dense[v * ni + j] as u8 as f64, &mut model);
            }
        }
        if !model.user_factors.iter().chain(&model.item_factors).all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "logistic MF diverged in epoch {epoch}"
            )));
        }
    }
    Ok(model)
}

/// Bin edges `0, 0.01, …, 0.09, 0.1, 0.2, …, 0.5`.
pub fn default_assumption_bins() -> Vec<f64> {
    let mut edges: Vec<f64> = (0..10).map(|k| k as f64 / 100.0).collect();
    edges.extend((1..=5).map(|k| k as f64 / 10.0));
    edges
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRatio {
    pub bin_low: f64,
    pub bin_high: f64,
    /// Absent when no user contributed a pair to the bin.
    pub ratio: Option<f64>,
    pub pair_count: u64,
}

/// Share of item pairs whose propensity order agrees with their popularity
/// order, bucketed by the gap between their interaction probabilities.
///
/// Every user contributes one uniformly drawn anchor item paired with each
/// other item. A pair lands in the bin containing `|ŷ_uj − ŷ_ui|`; pairs
/// whose propensity or popularity gap is zero are ignored. The bin ratio is
/// the mean over contributing users of their concordant share.
pub fn assumption_ratios(
    num_users: usize,
    num_items: usize,
    p: &[f64],
    pop: &[f64],
    y_hat: &[f64],
    edges: &[f64],
    seed: u64,
) -> Result<Vec<BinRatio>> {
    let n = num_users * num_items;
    if p.len() != n || y_hat.len() != n || pop.len() != num_items {
        return Err(Error::Shape("assumption check inputs do not match U x I".into()));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    if num_items < 2 {
        return Err(Error::Input("assumption check needs at least two items".into()));
    }
    let nb = edges.len() - 1;
    let mut ratio_sum = vec![0.0; nb];
    let mut users = vec![0u64; nb];
    let mut pairs = vec![0u64; nb];
    let mut rng = rng::stream(seed, "assumption-anchors");
    let mut hits = vec![0u64; nb];
    let mut seen = vec![0u64; nb];
    for u in 0..num_users {
        let anchor = rng.random_range(0..num_items);
        let base = u * num_items;
        hits.fill(0);
        seen.fill(0);
        for j in (0..num_items).filter(|&j| j != anchor) {
            let gap = (y_hat[base + j] - y_hat[base + anchor]).abs();
            if gap < edges[0] || gap >= edges[nb] {
                continue;
            }
            let b = edges.partition_point(|&e| e <= gap) - 1;
            let prod = (p[base + j] - p[base + anchor]) * (pop[j] - pop[anchor]);
            if prod == 0.0 {
                continue;
            }
            seen[b] += 1;
            hits[b] += (prod > 0.0) as u64;
        }
        for b in 0..nb {
            if seen[b] > 0 {
                ratio_sum[b] += hits[b] as f64 / seen[b] as f64;
                users[b] += 1;
                pairs[b] += seen[b];
            }
        }
    }
    Ok((0..nb)
        .map(|b| BinRatio {
            bin_low: edges[b],
            bin_high: edges[b + 1],
            ratio: (users[b] > 0).then(|| ratio_sum[b] / users[b] as f64),
            pair_count: pairs[b],
        })
        .collect())
}

/// Popularity-consistency check on a panel: popularity comes from the
/// panel's observed interactions, propensities from its ground truth.
pub fn validate_assumption(
    panel: &GroundTruthPanel,
    y_hat: &[f64],
    edges: &[f64],
    seed: u64,
) -> Result<Vec<BinRatio>> {
    let counts = compute_interactions(panel).item_counts();
    let pop: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    assumption_ratios(
        panel.num_users(),
        panel.num_items(),
        panel.p(),
        &pop,
        y_hat,
        edges,
        seed,
    )
}

/// Spearman correlation between bin index and ratio over non-empty bins.
pub fn ratio_trend(bins: &[BinRatio]) -> Result<f64> {
    let (idx, vals): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .enumerate()
        .filter_map(|(k, b)| b.ratio.map(|r| (k as f64, r)))
        .unzip();
    spearman(&idx, &vals)
}
