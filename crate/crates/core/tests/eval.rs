mod common;

use common::oracles;
use proptest::prelude::*;
use propcare::data::InteractionDataset;
use propcare::eval::{
    assumption_ratios, cdcg, cp_at_k, default_assumption_bins, f1_exposure, fit_logistic_mf, kendalls_tau,
    kld_propensity, ratio_trend, BinRatio, spearman, LogisticMfConfig, Rankings,
};
use propcare::rng;
use rand::Rng as _;

/// CDCG sums logarithmic discounts in a different order than the oracle.
const TOL: f64 = 1e-12;

#[test]
fn metrics_match_brute_force_on_small_instances() {
    let mut r = rng::stream(17, "oracle-instances");
    for _ in 0..200 {
        let inst = oracles::instance(&mut r);
        let ni = inst.orders[0].len();
        let rankings = Rankings::new(ni, inst.orders.clone()).unwrap();
        for k in 1..=ni {
            let got = cp_at_k(&rankings, &inst.tau, k).unwrap();
            assert_eq!(got, oracles::cp_at_k(&inst.orders, &inst.tau, k));
        }
        let got = cdcg(&rankings, &inst.tau).unwrap();
        assert!((got - oracles::cdcg(&inst.orders, &inst.tau)).abs() <= TOL);
        match (kendalls_tau(&inst.a, &inst.b), oracles::kendall_tau_b(&inst.a, &inst.b)) {
            (Ok(t), Some(o)) => assert_eq!(t, o),
            (Err(_), None) => {}
            (t, o) => panic!("tau {t:?} vs oracle {o:?}"),
        }
        assert_eq!(f1_exposure(&inst.z_hat, &inst.z).unwrap(), oracles::f1(&inst.z_hat, &inst.z));
    }
}

#[test]
fn kld_examples() {
    let p: Vec<f64> = (0..500).map(|k| (k as f64 + 0.5) / 500.0).collect();
    assert_eq!(kld_propensity(&p, &p).unwrap(), 0.0);
    for n in [50usize, 500, 5000] {
        let uniform: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        let spike = vec![0.005; n];
        let nf = n as f64;
        let m = nf / 50.0;
        let hand = (nf + 1.0) / (nf + 50.0) * ((nf + 1.0) / (m + 1.0)).ln()
            + 49.0 / (nf + 50.0) * (1.0 / (m + 1.0)).ln();
        let got = kld_propensity(&spike, &uniform).unwrap();
        assert!((got - hand).abs() <= 1e-12, "n {n}: {got} vs {hand}");
    }
    assert!(kld_propensity(&[0.5, 1.0], &[0.5]).is_err());
}

#[test]
fn tau_examples() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let rev = [4.0, 3.0, 2.0, 1.0];
    assert!((kendalls_tau(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    assert!((kendalls_tau(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
    assert!((kendalls_tau(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(kendalls_tau(&[2.0; 4], &a).is_err());
}

#[test]
fn f1_examples() {
    let z = [true, false, true, false];
    assert_eq!(f1_exposure(&z, &z).unwrap(), 1.0);
    assert_eq!(f1_exposure(&[false, true, false, true], &z).unwrap(), 0.0);
    assert_eq!(f1_exposure(&[true, true, false], &[true, false, true]).unwrap(), 0.5);
    assert_eq!(f1_exposure(&[false; 3], &[false; 3]).unwrap(), 0.0);
}

#[test]
fn spearman_and_trend() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

/// Two users, items with increasing popularity, and interaction probability
/// spread so every bin below 0.5 is hit.
fn toy(discordant: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ni = 40;
    let pop: Vec<f64> = (0..ni).map(|i| i as f64 + 1.0).collect();
    let mut p = Vec::new();
    let mut y = Vec::new();
    for u in 0..2 {
        for i in 0..ni {
            let base = 0.1 + 0.02 * i as f64 + 0.01 * u as f64;
            p.push(if discordant { 0.99 - base } else { base });
            y.push(0.0125 * i as f64);
        }
    }
    (p, pop, y)
}

#[test]
fn assumption_toys() {
    let edges = default_assumption_bins();
    let (p, pop, y) = toy(false);
    let bins = assumption_ratios(2, 40, &p, &pop, &y, &edges, 1).unwrap();
    assert!(bins.iter().filter_map(|b| b.ratio).all(|r| r == 1.0));
    assert!(bins.iter().any(|b| b.ratio.is_some()));
    let (p, pop, y) = toy(true);
    let bins = assumption_ratios(2, 40, &p, &pop, &y, &edges, 1).unwrap();
    assert!(bins.iter().filter_map(|b| b.ratio).all(|r| r == 0.0));
    let flat = vec![0.2; 80];
    let bins = assumption_ratios(2, 40, &p, &pop, &flat, &edges, 1).unwrap();
    assert!(bins[1..].iter().all(|b| b.ratio.is_none() && b.pair_count == 0));
}

/// Same anchors as the implementation, but every pair is binned by a linear
/// scan over the edges.
fn brute_force_ratios(nu: usize, ni: usize, p: &[f64], pop: &[f64], y: &[f64], edges: &[f64], seed: u64) -> Vec<Option<f64>> {
    let mut r = rng::stream(seed, "assumption-anchors");
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut users = vec![0usize; nb];
    for u in 0..nu {
        let anchor = r.random_range(0..ni);
        for b in 0..nb {
            let (mut hit, mut seen) = (0usize, 0usize);
            for j in 0..ni {
                if j == anchor {
                    continue;
                }
                let gap = (y[u * ni + j] - y[u * ni + anchor]).abs();
                if !(edges[b] <= gap && gap < edges[b + 1]) {
                    continue;
                }
                let prod = (p[u * ni + j] - p[u * ni + anchor]) * (pop[j] - pop[anchor]);
                if prod != 0.0 {
                    seen += 1;
                    if prod > 0.0 {
                        hit += 1;
                    }
                }
            }
            if seen > 0 {
                sums[b] += hit as f64 / seen as f64;
                users[b] += 1;
            }
        }
    }
    (0..nb).map(|b| (users[b] > 0).then(|| sums[b] / users[b] as f64)).collect()
}

#[test]
fn assumption_ratios_match_pair_scan() {
    let mut r = rng::stream(5, "assumption-instance");
    let (nu, ni) = (30, 50);
    let p: Vec<f64> = (0..nu * ni).map(|_| r.random_range(0.01..0.99)).collect();
    let pop: Vec<f64> = (0..ni).map(|_| f64::from(r.random_range(0..20u8))).collect();
    let y: Vec<f64> = (0..nu * ni).map(|_| r.random_range(0.0..0.6)).collect();
    let edges = default_assumption_bins();
    let got = assumption_ratios(nu, ni, &p, &pop, &y, &edges, 8).unwrap();
    let want = brute_force_ratios(nu, ni, &p, &pop, &y, &edges, 8);
    for (g, w) in got.iter().zip(&want) {
        match (g.ratio, w) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= TOL),
            (None, None) => {}
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn trend_skips_empty_bins() {
    let bin = |k: usize, ratio: Option<f64>| BinRatio { bin_low: k as f64, bin_high: k as f64 + 1.0, ratio, pair_count: 1 };
    let bins = vec![bin(0, Some(0.9)), bin(1, None), bin(2, Some(0.7)), bin(3, Some(0.6))];
    assert!((ratio_trend(&bins).unwrap() + 1.0).abs() < 1e-15);
    let (p, pop, y) = toy(false);
    let constant = assumption_ratios(2, 40, &p, &pop, &y, &default_assumption_bins(), 2).unwrap();
    assert!(ratio_trend(&constant).is_err());
}

fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (s, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (t, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            total += 1.0;
            wins += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
        }
    }
    wins / total
}

#[test]
fn logistic_mf_recovers_planted_structure() {
    let mut r = rng::stream(3, "planted");
    let a: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..20).map(|_| r.random_range(-1.0..1.0)).collect();
    let dense: Vec<bool> = (0..400).map(|k| a[k / 20] * b[k % 20] > 0.0).collect();
    let data = InteractionDataset::from_dense(20, 20, dense.clone()).unwrap();
    let cfg = LogisticMfConfig { dim: 4, epochs: 200, ..LogisticMfConfig::default() };
    let model = fit_logistic_mf(&data, &cfg).unwrap();
    let pred = model.predict_all();
    assert!(pred.iter().all(|&v| v > 0.0 && v < 1.0));
    let fresh = fit_logistic_mf(&data, &LogisticMfConfig { epochs: 0, ..cfg.clone() }).unwrap();
    assert!(model.loss(&data) < fresh.loss(&data));
    let score = auc(&pred, &dense);
    assert!(score >= 0.9, "AUC {score}");
    let empty = InteractionDataset::new(3, 3, vec![]).unwrap();
    assert!(fit_logistic_mf(&empty, &cfg).is_err());
}

proptest! {
    #[test]
    fn tau_is_symmetric(v in proptest::collection::vec((0u8..6, 0u8..6), 2..40)) {
        let a: Vec<f64> = v.iter().map(|x| f64::from(x.0)).collect();
        let b: Vec<f64> = v.iter().map(|x| f64::from(x.1)).collect();
        match (kendalls_tau(&a, &b), kendalls_tau(&b, &a)) {
            (Ok(x), Ok(y)) => prop_assert!((x - y).abs() <= 1e-12),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn tau_of_distinct_values_with_itself_is_one(v in proptest::collection::hash_set(-1000i32..1000, 2..50)) {
        let a: Vec<f64> = v.into_iter().map(f64::from).collect();
        prop_assert!((kendalls_tau(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cp_over_full_list_is_mean_effect(seed: u64) {
        let mut r = rng::stream(seed, "cp-identity");
        let inst = oracles::instance(&mut r);
        let ni = inst.orders[0].len();
        let nu = inst.orders.len();
        let rankings = Rankings::new(ni, inst.orders.clone()).unwrap();
        let mean = inst.tau.iter().map(|&t| f64::from(t)).sum::<f64>() / (nu * ni) as f64;
        prop_assert!((cp_at_k(&rankings, &inst.tau, ni).unwrap() - mean).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_pure(seed: u64) {
        let mut r = rng::stream(seed, "purity");
        let inst = oracles::instance(&mut r);
        let rankings = Rankings::new(inst.orders[0].len(), inst.orders.clone()).unwrap();
        prop_assert_eq!(cdcg(&rankings, &inst.tau).unwrap(), cdcg(&rankings, &inst.tau).unwrap());
        prop_assert_eq!(f1_exposure(&inst.z_hat, &inst.z).unwrap(), f1_exposure(&inst.z_hat, &inst.z).unwrap());
    }
}
