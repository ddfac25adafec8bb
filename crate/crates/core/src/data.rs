//! Interaction datasets, ground-truth panels and resampled splits.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

/// Sparse binary interaction matrix: listed pairs have `Y = 1`, all others 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    /// Positives sorted by (user, item).
    positives: Vec<(u32, u32)>,
    /// `offsets[u]..offsets[u + 1]` indexes user `u`'s positives.
    offsets: Vec<usize>,
    dense: Vec<bool>,
}

impl InteractionDataset {
    pub fn new(num_users: usize, num_items: usize, mut positives: Vec<(u32, u32)>) -> Result<Self> {
        check_dims(num_users, num_items)?;
        positives.sort_unstable();
        for w in positives.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Input(format!(
                    "duplicate interaction (user {}, item {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut dense = vec![false; num_users * num_items];
        for &(u, i) in &positives {
            let (u, i) = (u as usize, i as usize);
            if u >= num_users || i >= num_items {
                return Err(Error::Input(format!(
                    "interaction (user {u}, item {i}) outside {num_users}x{num_items}"
                )));
            }
            dense[u * num_items + i] = true;
        }
        Ok(Self::assemble(num_users, num_items, positives, dense))
    }

    /// Build from a row-major `U × I` indicator vector.
    pub fn from_dense(num_users: usize, num_items: usize, dense: Vec<bool>) -> Result<Self> {
        check_dims(num_users, num_items)?;
        if dense.len() != num_users * num_items {
            return Err(Error::Shape(format!(
                "{} indicators for a {num_users}x{num_items} matrix",
                dense.len()
            )));
        }
        let positives = dense
            .iter()
            .enumerate()
            .filter(|(_, &y)| y)
            .map(|(k, _)| ((k / num_items) as u32, (k % num_items) as u32))
            .collect();
        Ok(Self::assemble(num_users, num_items, positives, dense))
    }

    fn assemble(
        num_users: usize,
        num_items: usize,
        positives: Vec<(u32, u32)>,
        dense: Vec<bool>,
    ) -> Self {
        let mut offsets = vec![0usize; num_users + 1];
        for &(u, _) in &positives {
            offsets[u as usize + 1] += 1;
        }
        for u in 0..num_users {
            offsets[u + 1] += offsets[u];
        }
        Self {
            num_users,
            num_items,
            positives,
            offsets,
            dense,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_pairs(&self) -> usize {
        self.num_users * self.num_items
    }

    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn positives(&self) -> &[(u32, u32)] {
        &self.positives
    }

    pub fn user_positives(&self, user: usize) -> &[(u32, u32)] {
        &self.positives[self.offsets[user]..self.offsets[user + 1]]
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        user < self.num_users && item < self.num_items && self.dense[user * self.num_items + item]
    }

    /// Row-major `U × I` indicators.
    pub fn dense(&self) -> &[bool] {
        &self.dense
    }

    pub fn item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_items];
        for &(_, i) in &self.positives {
            counts[i as usize] += 1;
        }
        counts
    }

    pub fn same_shape(&self, other: &InteractionDataset) -> bool {
        self.num_users == other.num_users && self.num_items == other.num_items
    }
}

fn check_dims(num_users: usize, num_items: usize) -> Result<()> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::Input(format!(
            "dataset needs at least one user and one item, got U={num_users}, I={num_items}"
        )));
    }
    if num_users > u32::MAX as usize || num_items > u32::MAX as usize {
        return Err(Error::Input("too many users or items".into()));
    }
    num_users
        .checked_mul(num_items)
        .ok_or_else(|| Error::Input("U·I overflows".into()))?;
    Ok(())
}

/// Per-pair ground truth over the full `U × I` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPanel {
    num_users: usize,
    num_items: usize,
    p: Vec<f64>,
    z: Vec<bool>,
    y1: Vec<bool>,
    y0: Vec<bool>,
}

impl GroundTruthPanel {
    pub fn new(
        num_users: usize,
        num_items: usize,
        p: Vec<f64>,
        z: Vec<bool>,
        y1: Vec<bool>,
        y0: Vec<bool>,
    ) -> Result<Self> {
        check_dims(num_users, num_items)?;
        let n = num_users * num_items;
        if p.len() != n || z.len() != n || y1.len() != n || y0.len() != n {
            return Err(Error::Shape(format!(
                "panel arrays must all have {n} entries"
            )));
        }
        if let Some(k) = p.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!(
                "propensity {} at (user {}, item {}) is not strictly inside (0, 1)",
                p[k],
                k / num_items,
                k % num_items
            )));
        }
        Ok(Self {
            num_users,
            num_items,
            p,
            z,
            y1,
            y0,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_pairs(&self) -> usize {
        self.p.len()
    }

    pub fn index(&self, user: usize, item: usize) -> usize {
        user * self.num_items + item
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn z(&self) -> &[bool] {
        &self.z
    }

    pub fn y1(&self) -> &[bool] {
        &self.y1
    }

    pub fn y0(&self) -> &[bool] {
        &self.y0
    }

    /// Causal effect `Y¹ − Y⁰` of every pair.
    pub fn tau(&self) -> Vec<i8> {
        self.y1
            .iter()
            .zip(&self.y0)
            .map(|(&a, &b)| a as i8 - b as i8)
            .collect()
    }

    /// Observed outcomes under exposure `z`.
    pub fn outcomes(&self, z: &[bool]) -> Vec<bool> {
        z.iter()
            .zip(self.y1.iter().zip(&self.y0))
            .map(|(&z, (&y1, &y0))| if z { y1 } else { y0 })
            .collect()
    }
}

/// `Y = Z·Y¹ + (1 − Z)·Y⁰` for every pair of the panel.
pub fn compute_interactions(panel: &GroundTruthPanel) -> InteractionDataset {
    InteractionDataset::from_dense(panel.num_users, panel.num_items, panel.outcomes(&panel.z))
        .expect("panel dimensions were validated")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitScheme {
    /// Resample exposure `train`, `valid` and `test` times respectively.
    RepeatDraws {
        train: usize,
        valid: usize,
        test: usize,
    },
    /// One draw per split.
    SingleDraw,
}

impl SplitScheme {
    pub fn counts(&self) -> (usize, usize, usize) {
        match *self {
            SplitScheme::RepeatDraws { train, valid, test } => (train, valid, test),
            SplitScheme::SingleDraw => (1, 1, 1),
        }
    }
}

/// One exposure draw and the interactions it produces.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDraw {
    pub z: Vec<bool>,
    pub data: InteractionDataset,
}

impl SplitDraw {
    pub fn from_outcomes(
        num_users: usize,
        num_items: usize,
        z: Vec<bool>,
        y: Vec<bool>,
    ) -> Result<Self> {
        if z.len() != y.len() {
            return Err(Error::Shape("exposure and outcome lengths differ".into()));
        }
        Ok(Self {
            z,
            data: InteractionDataset::from_dense(num_users, num_items, y)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<SplitDraw>,
    pub valid: Vec<SplitDraw>,
    pub test: Vec<SplitDraw>,
}

/// Resample exposure from the panel's propensities for each split.
///
/// The first training draw reuses the panel's own exposure, so the panel's
/// `Z` is exactly the exposure behind the primary training interactions.
/// Every other draw uses its own sub-stream of `seed`.
pub fn split(panel: &GroundTruthPanel, scheme: SplitScheme, seed: u64) -> Result<Splits> {
    let (k_train, k_valid, k_test) = scheme.counts();
    if k_train == 0 || k_valid == 0 || k_test == 0 {
        return Err(Error::Config(format!(
            "every split needs at least one draw, got {k_train}/{k_valid}/{k_test}"
        )));
    }
    let draw = |name: &str, k: usize| -> Result<SplitDraw> {
        let z = if name == "split-train" && k == 0 {
            panel.z.clone()
        } else {
            resample_exposure(panel.p(), seed, name, k as u64)
        };
        let y = panel.outcomes(&z);
        SplitDraw::from_outcomes(panel.num_users, panel.num_items, z, y)
    };
    Ok(Splits {
        train: (0..k_train).map(|k| draw("split-train", k)).collect::<Result<_>>()?,
        valid: (0..k_valid).map(|k| draw("split-valid", k)).collect::<Result<_>>()?,
        test: (0..k_test).map(|k| draw("split-test", k)).collect::<Result<_>>()?,
    })
}

/// `Z ~ Bernoulli(p)` independently per pair.
pub fn resample_exposure(p: &[f64], seed: u64, name: &str, index: u64) -> Vec<bool> {
    let mut rng = rng::indexed_stream(seed, name, index);
    p.iter().map(|&p| rng.random::<f64>() < p).collect()
}
