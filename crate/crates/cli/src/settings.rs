//! Every tunable of the pipeline behind one flat key space, filled from a
//! `key=value` file, `--set` overrides and `--seed`.

use std::collections::BTreeMap;
use std::path::Path;

use propcare::data::SplitScheme;
use propcare::datagen::SimConfig;
use propcare::eval::LogisticMfConfig;
use propcare::io::{parse_settings, Setting};
use propcare::pipeline::{DEFAULT_EPSILON, DEFAULT_SCALE};
use propcare::propcare::{Ablation, Optimizer, TrainConfig};
use propcare::ranker::DlceConfig;
use propcare::{Error, Result};
use serde_json::{json, Value};

#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub sim: SimConfig,
    pub split: SplitScheme,
    pub train: TrainConfig,
    pub ranker: DlceConfig,
    pub mf: LogisticMfConfig,
    pub c: f64,
    pub epsilon: f64,
    pub repeats: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 0,
            sim: SimConfig::default(),
            split: SplitScheme::SingleDraw,
            train: TrainConfig::default(),
            ranker: DlceConfig::default(),
            mf: LogisticMfConfig::default(),
            c: DEFAULT_SCALE,
            epsilon: DEFAULT_EPSILON,
            repeats: 3,
        }
    }
}

fn parse_split(s: &Setting) -> Result<SplitScheme> {
    if s.value == "single" {
        return Ok(SplitScheme::SingleDraw);
    }
    let counts: Option<Vec<usize>> = s
        .value
        .strip_prefix("repeat:")
        .map(|rest| rest.split(',').map(|v| v.trim().parse().ok()).collect())
        .and_then(|v: Option<Vec<usize>>| v);
    match counts.as_deref() {
        Some(&[train, valid, test]) => Ok(SplitScheme::RepeatDraws { train, valid, test }),
        _ => Err(Error::Parse {
            line: s.line,
            msg: format!("split must be `single` or `repeat:TRAIN,VALID,TEST`, got `{}`", s.value),
        }),
    }
}

fn parse_ablation(s: &Setting) -> Result<Ablation> {
    let mut out = Ablation::FULL;
    for part in s.value.split(',').map(str::trim) {
        match part {
            "none" | "full" => {}
            "no_p" => out.no_p = true,
            "no_r" => out.no_r = true,
            "no_p_r" => {
                out.no_p = true;
                out.no_r = true;
            }
            "neg" => out.neg = true,
            "kappa_one" => out.kappa_one = true,
            other => {
                return Err(Error::Parse {
                    line: s.line,
                    msg: format!("unknown ablation `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

impl Settings {
    /// Defaults, then the config file (if any), then `overrides` given as
    /// `key=value` strings, then `seed`.
    pub fn load(config: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut out = Self::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for s in parse_settings(&text)? {
                out.apply(&s)?;
            }
        }
        for (k, raw) in overrides.iter().enumerate() {
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            out.apply(&Setting {
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                line: k + 1,
            })?;
        }
        if let Some(seed) = seed {
            out.seed = seed;
        }
        out.sim.seed = out.seed;
        out.train.seed = out.seed;
        out.ranker.seed = out.seed;
        out.mf.seed = out.seed;
        Ok(out)
    }

    pub fn apply(&mut self, s: &Setting) -> Result<()> {
        match s.key.as_str() {
            "seed" => self.seed = s.parse()?,
            "num_users" => self.sim.num_users = s.parse()?,
            "num_items" => self.sim.num_items = s.parse()?,
            "latent_dim" => self.sim.latent_dim = s.parse()?,
            "target_interaction" => self.sim.target_interaction = s.parse()?,
            "target_propensity" => self.sim.target_propensity = s.parse()?,
            "pop_skew" => self.sim.pop_skew = s.parse()?,
            "assumption_consistent" => self.sim.assumption_consistent = s.parse_bool()?,
            "popularity_relevance" => self.sim.popularity_relevance = s.parse()?,
            "uplift" => self.sim.uplift = s.parse()?,
            "exposure_popularity" => self.sim.exposure_popularity = s.parse()?,
            "exposure_noise" => self.sim.exposure_noise = s.parse()?,
            "mix_power" => self.sim.mix_power = s.parse()?,
            "split" => self.split = parse_split(s)?,
            "lambda" => self.train.lambda = s.parse()?,
            "mu" => self.train.mu = s.parse()?,
            "alpha" => self.train.alpha = s.parse()?,
            "beta" => self.train.beta = s.parse()?,
            "batch_size" => self.train.batch_size = s.parse()?,
            "learning_rate" => self.train.learning_rate = s.parse()?,
            "max_epochs" => self.train.max_epochs = s.parse()?,
            "patience" => self.train.patience = s.parse()?,
            "pairs_per_epoch" => {
                self.train.pairs_per_epoch = if s.value == "all" { None } else { Some(s.parse()?) }
            }
            "validation_pairs" => self.train.validation_pairs = s.parse()?,
            "embedding_dim" => self.train.embedding_dim = s.parse()?,
            "leaky_slope" => self.train.leaky_slope = s.parse()?,
            "kl_bandwidth" => self.train.kl_bandwidth = s.parse()?,
            "optimizer" => {
                self.train.optimizer = match s.value.as_str() {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => {
                        return Err(Error::Parse {
                            line: s.line,
                            msg: format!("optimizer must be adam or sgd, got `{}`", s.value),
                        })
                    }
                }
            }
            "ablation" => self.train.ablation = parse_ablation(s)?,
            "c" => self.c = s.parse()?,
            "epsilon" => self.epsilon = s.parse()?,
            "ranker.chi1" => self.ranker.chi1 = s.parse()?,
            "ranker.chi0" => self.ranker.chi0 = s.parse()?,
            "ranker.omega" => self.ranker.omega = s.parse()?,
            "ranker.learning_rate" => self.ranker.learning_rate = s.parse()?,
            "ranker.l2" => self.ranker.l2 = s.parse()?,
            "ranker.max_epochs" => self.ranker.max_epochs = s.parse()?,
            "ranker.patience" => self.ranker.patience = s.parse()?,
            "ranker.dim" => self.ranker.dim = s.parse()?,
            "mf.dim" => self.mf.dim = s.parse()?,
            "mf.epochs" => self.mf.epochs = s.parse()?,
            "mf.learning_rate" => self.mf.learning_rate = s.parse()?,
            "mf.l2" => self.mf.l2 = s.parse()?,
            "mf.negatives" => self.mf.negatives = s.parse()?,
            "repeats" => self.repeats = s.parse()?,
            other => {
                return Err(Error::Parse {
                    line: s.line,
                    msg: format!("unknown setting `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Every effective setting, keyed as in config files.
    pub fn snapshot(&self) -> BTreeMap<String, Value> {
        let split = match self.split {
            SplitScheme::SingleDraw => "single".to_string(),
            SplitScheme::RepeatDraws { train, valid, test } => format!("repeat:{train},{valid},{test}"),
        };
        let ablation = match self.train.ablation.labels() {
            l if l.is_empty() => "none".to_string(),
            l => l.join(","),
        };
        let t = &self.train;
        let r = &self.ranker;
        let pairs: Vec<(&str, Value)> = vec![
            ("seed", json!(self.seed)),
            ("num_users", json!(self.sim.num_users)),
            ("num_items", json!(self.sim.num_items)),
            ("latent_dim", json!(self.sim.latent_dim)),
            ("target_interaction", json!(self.sim.target_interaction)),
            ("target_propensity", json!(self.sim.target_propensity)),
            ("pop_skew", json!(self.sim.pop_skew)),
            ("assumption_consistent", json!(self.sim.assumption_consistent)),
            ("popularity_relevance", json!(self.sim.popularity_relevance)),
            ("uplift", json!(self.sim.uplift)),
            ("exposure_popularity", json!(self.sim.exposure_popularity)),
            ("exposure_noise", json!(self.sim.exposure_noise)),
            ("mix_power", json!(self.sim.mix_power)),
            ("split", json!(split)),
            ("lambda", json!(t.lambda)),
            ("mu", json!(t.mu)),
            ("alpha", json!(t.alpha)),
            ("beta", json!(t.beta)),
            ("batch_size", json!(t.batch_size)),
            ("learning_rate", json!(t.learning_rate)),
            ("max_epochs", json!(t.max_epochs)),
            ("patience", json!(t.patience)),
            (
                "pairs_per_epoch",
                t.pairs_per_epoch.map_or(json!("all"), |v| json!(v)),
            ),
            ("validation_pairs", json!(t.validation_pairs)),
            ("embedding_dim", json!(t.embedding_dim)),
            ("leaky_slope", json!(t.leaky_slope)),
            ("kl_bandwidth", json!(t.kl_bandwidth)),
            ("optimizer", json!(t.optimizer)),
            ("ablation", json!(ablation)),
            ("c", json!(self.c)),
            ("epsilon", json!(self.epsilon)),
            ("ranker.chi1", json!(r.chi1)),
            ("ranker.chi0", json!(r.chi0)),
            ("ranker.omega", json!(r.omega)),
            ("ranker.learning_rate", json!(r.learning_rate)),
            ("ranker.l2", json!(r.l2)),
            ("ranker.max_epochs", json!(r.max_epochs)),
            ("ranker.patience", json!(r.patience)),
            ("ranker.dim", json!(r.dim)),
            ("mf.dim", json!(self.mf.dim)),
            ("mf.epochs", json!(self.mf.epochs)),
            ("mf.learning_rate", json!(self.mf.learning_rate)),
            ("mf.l2", json!(self.mf.l2)),
            ("mf.negatives", json!(self.mf.negatives)),
            ("repeats", json!(self.repeats)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
