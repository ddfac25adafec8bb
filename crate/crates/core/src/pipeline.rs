//! Glue for end-to-end runs: simulate, split, estimate propensities, train
//! the ranker on them and score the result against the ground truth.

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::causal::{add_propensity_noise, flip_exposure, MeanEstimate};
use crate::data::{split, GroundTruthPanel, SplitDraw, SplitScheme, Splits};
use crate::datagen::{simulate, SimConfig};
use crate::error::{Error, Result};
use crate::estimate::PropensityEstimate;
use crate::eval::{cdcg, cp_at_k, f1_exposure, kendalls_tau, kld_propensity, Rankings};
use crate::propcare::{self, popularity_from_counts, TrainConfig, TrainOutcome};
use crate::ranker::{rank_all, train_ranker, DlceConfig, RankerDraw, RankerOutcome};
use crate::rng;

/// Defaults for the exposure threshold and propensity scale.
pub const DEFAULT_EPSILON: f64 = 0.15;
pub const DEFAULT_SCALE: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Experiment {
    pub panel: GroundTruthPanel,
    pub splits: Splits,
}

impl Experiment {
    pub fn simulate(config: &SimConfig, scheme: SplitScheme) -> Result<Self> {
        let (panel, _) = simulate(config)?;
        let splits = split(&panel, scheme, config.seed)?;
        Ok(Self { panel, splits })
    }

    pub fn num_users(&self) -> usize {
        self.panel.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.panel.num_items()
    }

    /// Popularity pooled over the training draws.
    pub fn train_popularity(&self) -> Result<Vec<f64>> {
        let mut counts = vec![0u64; self.num_items()];
        for d in &self.splits.train {
            for (c, k) in counts.iter_mut().zip(d.data.item_counts()) {
                *c += k;
            }
        }
        popularity_from_counts(&counts)
    }

    pub fn fit_propcare(&self, config: &TrainConfig) -> Result<TrainOutcome> {
        let train: Vec<_> = self.splits.train.iter().map(|d| d.data.clone()).collect();
        let valid: Vec<_> = self.splits.valid.iter().map(|d| d.data.clone()).collect();
        propcare::train(&train, &valid, config)
    }

    pub fn random_estimate(&self, seed: u64, c: f64, epsilon: f64) -> Result<PropensityEstimate> {
        baselines::random_propensity(self.num_users(), self.num_items(), seed, c, epsilon)
    }

    pub fn pop_estimate(&self, c: f64, epsilon: f64) -> Result<PropensityEstimate> {
        baselines::pop_propensity(self.num_users(), &self.train_popularity()?, c, epsilon)
    }

    /// Train the ranker with estimated exposure and scaled propensity, or
    /// with the simulator's exposure draws and true propensity when
    /// `estimate` is `None`.
    pub fn fit_ranker(
        &self,
        estimate: Option<&PropensityEstimate>,
        config: &DlceConfig,
    ) -> Result<RankerOutcome> {
        let train = ranker_draws(&self.splits.train, estimate);
        let valid = ranker_draws(&self.splits.valid, estimate);
        let propensity = estimate.map_or(self.panel.p(), |e| e.p_scaled.as_slice());
        train_ranker(&train, &valid, propensity, config)
    }
}

/// Noise injected into the ground-truth exposure or propensity before the
/// ranker sees it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "kebab-case")]
pub enum Perturbation {
    /// Fraction of exposure labels negated in every draw.
    Flip(f64),
    /// Standard deviation of Gaussian noise added to the propensity.
    Noise(f64),
}

impl Perturbation {
    pub fn level(&self) -> f64 {
        match self {
            Self::Flip(v) | Self::Noise(v) => *v,
        }
    }

    pub fn metric_name(&self) -> &'static str {
        match self {
            Self::Flip(_) => "cdcg_flip",
            Self::Noise(_) => "cdcg_noise",
        }
    }
}

impl Experiment {
    /// Train the ranker on the simulator's exposure and propensity after
    /// applying `perturbation`, drawing the noise from `seed`.
    pub fn fit_ranker_perturbed(
        &self,
        perturbation: Perturbation,
        seed: u64,
        config: &DlceConfig,
    ) -> Result<RankerOutcome> {
        let perturb = |draws: &[SplitDraw], name: &str| -> Result<Vec<Vec<bool>>> {
            draws
                .iter()
                .enumerate()
                .map(|(k, d)| match perturbation {
                    Perturbation::Flip(f) => {
                        flip_exposure(&d.z, f, rng::substream_seed(seed, &format!("{name}-{k}")))
                    }
                    Perturbation::Noise(_) => Ok(d.z.clone()),
                })
                .collect()
        };
        let z_train = perturb(&self.splits.train, "perturb-train")?;
        let z_valid = perturb(&self.splits.valid, "perturb-valid")?;
        let p = match perturbation {
            Perturbation::Noise(sigma) => add_propensity_noise(self.panel.p(), sigma, seed)?,
            Perturbation::Flip(_) => self.panel.p().to_vec(),
        };
        let train = draws_with(&self.splits.train, &z_train);
        let valid = draws_with(&self.splits.valid, &z_valid);
        train_ranker(&train, &valid, &p, config)
    }
}

/// One line of a noise study: the mean metric over repeats at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub noise_level: f64,
    pub metric: String,
    pub value: f64,
    pub stderr: f64,
}

/// CDCG of rankers trained under each perturbation, `repeats` times with
/// distinct noise and ranker seeds.
pub fn noise_study(
    experiment: &Experiment,
    perturbations: &[Perturbation],
    repeats: usize,
    seed: u64,
    config: &DlceConfig,
) -> Result<Vec<StudyRow>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let tau = experiment.panel.tau();
    perturbations
        .iter()
        .map(|&pert| {
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for r in 0..repeats as u64 {
                let cfg = DlceConfig {
                    seed: rng::substream_seed(config.seed, &format!("study-ranker-{r}")),
                    ..config.clone()
                };
                let noise_seed = rng::substream_seed(seed, &format!("study-noise-{r}"));
                let outcome = experiment.fit_ranker_perturbed(pert, noise_seed, &cfg)?;
                let v = cdcg(&rank_all(&outcome.model)?, &tau)?;
                sum += v;
                sum_sq += v * v;
            }
            let est = MeanEstimate::from_sums(repeats, sum, sum_sq);
            Ok(StudyRow {
                noise_level: pert.level(),
                metric: pert.metric_name().to_string(),
                value: est.mean,
                stderr: est.stderr,
            })
        })
        .collect()
}

fn draws_with<'a>(draws: &'a [SplitDraw], exposure: &'a [Vec<bool>]) -> Vec<RankerDraw<'a>> {
    draws
        .iter()
        .zip(exposure)
        .map(|(d, z)| RankerDraw { data: &d.data, exposure: z })
        .collect()
}

fn ranker_draws<'a>(
    split: &'a [SplitDraw],
    estimate: Option<&'a PropensityEstimate>,
) -> Vec<RankerDraw<'a>> {
    split
        .iter()
        .map(|d| RankerDraw {
            data: &d.data,
            exposure: estimate.map_or(d.z.as_slice(), |e| e.z_hat.as_slice()),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub cp_at_10: f64,
    pub cp_at_100: f64,
    pub cdcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateMetrics {
    pub kld: f64,
    pub tau: f64,
    pub f1: f64,
}

pub fn ranking_metrics(rankings: &Rankings, tau: &[i8]) -> Result<RankingMetrics> {
    let ni = rankings.num_items();
    Ok(RankingMetrics {
        cp_at_10: cp_at_k(rankings, tau, 10.min(ni))?,
        cp_at_100: cp_at_k(rankings, tau, 100.min(ni))?,
        cdcg: cdcg(rankings, tau)?,
    })
}

/// KLD of the scaled propensity against the truth, Kendall's tau of the raw
/// estimate against the truth, and F1 of the derived exposure.
pub fn estimate_metrics(estimate: &PropensityEstimate, panel: &GroundTruthPanel) -> Result<EstimateMetrics> {
    if estimate.num_users() != panel.num_users() || estimate.num_items() != panel.num_items() {
        return Err(Error::Misaligned(format!(
            "estimate covers {}x{}, panel {}x{}",
            estimate.num_users(),
            estimate.num_items(),
            panel.num_users(),
            panel.num_items()
        )));
    }
    Ok(EstimateMetrics {
        kld: kld_propensity(&estimate.p_scaled, panel.p())?,
        tau: kendalls_tau(&estimate.p_hat, panel.p())?,
        f1: f1_exposure(&estimate.z_hat, panel.z())?,
    })
}

/// Train a ranker on the given propensity source and score its rankings.
pub fn ranker_metrics(
    experiment: &Experiment,
    estimate: Option<&PropensityEstimate>,
    config: &DlceConfig,
) -> Result<RankingMetrics> {
    let outcome = experiment.fit_ranker(estimate, config)?;
    let rankings = rank_all(&outcome.model)?;
    ranking_metrics(&rankings, &experiment.panel.tau())
}
