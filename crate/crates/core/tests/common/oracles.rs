//! Exhaustive reference implementations of the ranking and estimation
//! metrics, written as plain loops over items and pairs.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

/// 1-based position of `item` in `order`, found by scanning.
fn position(order: &[u32], item: usize) -> usize {
    let mut r = 0;
    while order[r] as usize != item {
        r += 1;
    }
    r + 1
}

pub fn cp_at_k(orders: &[Vec<u32>], tau: &[i8], k: usize) -> f64 {
    let ni = orders[0].len();
    let mut total = 0.0;
    for (u, order) in orders.iter().enumerate() {
        let mut hits = 0i64;
        for i in 0..ni {
            if position(order, i) <= k {
                hits += i64::from(tau[u * ni + i]);
            }
        }
        total += hits as f64 / k as f64;
    }
    total / orders.len() as f64
}

pub fn cdcg(orders: &[Vec<u32>], tau: &[i8]) -> f64 {
    let ni = orders[0].len();
    let mut total = 0.0;
    for (u, order) in orders.iter().enumerate() {
        for i in 0..ni {
            let r = position(order, i);
            total += f64::from(tau[u * ni + i]) / ((r + 1) as f64).log2();
        }
    }
    total / orders.len() as f64
}

/// Tau-b from an explicit scan over all pairs; `None` when undefined.
pub fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut concordant, mut discordant, mut tie_a, mut tie_b) = (0i64, 0i64, 0i64, 0i64);
    for x in 0..a.len() {
        for y in x + 1..a.len() {
            let da = a[x] - a[y];
            let db = b[x] - b[y];
            if da == 0.0 {
                tie_a += 1;
            }
            if db == 0.0 {
                tie_b += 1;
            }
            if da != 0.0 && db != 0.0 {
                if (da > 0.0) == (db > 0.0) {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let n0 = (a.len() * (a.len() - 1) / 2) as i64;
    let denom = (((n0 - tie_a) * (n0 - tie_b)) as f64).sqrt();
    (denom > 0.0).then(|| (concordant - discordant) as f64 / denom)
}

pub fn f1(z_hat: &[bool], z: &[bool]) -> f64 {
    let tp = z_hat.iter().zip(z).filter(|(h, t)| **h && **t).count() as f64;
    let predicted = z_hat.iter().filter(|h| **h).count() as f64;
    let actual = z.iter().filter(|t| **t).count() as f64;
    if predicted + actual == 0.0 {
        return 0.0;
    }
    2.0 * tp / (predicted + actual)
}

/// A random instance with `U ≤ 5`, `2 ≤ I ≤ 8`.
pub struct Instance {
    pub orders: Vec<Vec<u32>>,
    pub tau: Vec<i8>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub z_hat: Vec<bool>,
    pub z: Vec<bool>,
}

pub fn instance<R: Rng>(rng: &mut R) -> Instance {
    let nu = rng.random_range(1..=5);
    let ni = rng.random_range(2..=8);
    let orders = (0..nu)
        .map(|_| {
            let mut o: Vec<u32> = (0..ni as u32).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let n = nu * ni;
    Instance {
        orders,
        tau: (0..n).map(|_| rng.random_range(-1..=1)).collect(),
        a: (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect(),
        b: (0..n).map(|_| f64::from(rng.random_range(0..4u8))).collect(),
        z_hat: (0..n).map(|_| rng.random_bool(0.4)).collect(),
        z: (0..n).map(|_| rng.random_bool(0.4)).collect(),
    }
}
