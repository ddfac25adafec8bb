use proptest::prelude::*;
use propcare::data::{split, InteractionDataset, SplitScheme};
use propcare::datagen::{simulate, SimConfig};
use propcare::estimate::{derive_exposure, scale_propensity};
use propcare::eval::kendalls_tau;
use propcare::pipeline::{ranker_metrics, Experiment};
use propcare::propcare::{
    compute_popularity, dataset_naive_loss, eta_from_raw, kappa, kl_regularizer, naive_loss, pairwise_pop_loss, train,
    Ablation, PairOutputs, PropCareModel, TrainConfig, Triplet,
};
use propcare::ranker::DlceConfig;
use propcare::{rng, Error};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn popularity_examples() {
    let data = InteractionDataset::new(2, 3, vec![(0, 0), (1, 0), (0, 1), (1, 2)]).unwrap();
    assert_eq!(compute_popularity(&data).unwrap(), vec![0.5, 0.25, 0.25]);
    let one = InteractionDataset::new(1, 3, vec![(0, 0)]).unwrap();
    assert_eq!(compute_popularity(&one).unwrap(), vec![1.0, 0.0, 0.0]);
    let none = InteractionDataset::new(2, 2, vec![]).unwrap();
    assert!(matches!(compute_popularity(&none), Err(Error::Input(_))));
}

#[test]
fn naive_loss_examples() {
    assert!(close(naive_loss(1.0, 0.8, 0.5), -(0.4f64).ln(), 1e-12));
    assert!(close(naive_loss(1.0, 0.8, 0.5), 0.9163, 1e-4));
    assert!(close(naive_loss(0.0, 0.5, 1.0 - 1e-16), 0.6931, 1e-4));
    assert!(naive_loss(0.0, 1e-9, 1e-9) < 1e-12);
    assert!(naive_loss(1.0, 0.0, 0.0).is_finite());
}

#[test]
fn pairwise_examples() {
    let flat = PairOutputs { p_i: 0.3, p_j: 0.3, r_i: 0.6, r_j: 0.6 };
    let (loss, _) = pairwise_pop_loss(&flat, 1.0, 0.0, Ablation::FULL);
    assert!(close(loss, 0.0, 1e-15));
    let out = PairOutputs { p_i: 0.8, r_i: 0.75, p_j: 0.5, r_j: 0.2 };
    let k = kappa(-1.0, &out);
    assert!(close(k, (-0.25f64).exp(), 1e-12));
    assert!(close(k, 0.7788, 1e-4));
    let (none, _) = pairwise_pop_loss(&out, 1.0, 0.0, Ablation::NO_P_R);
    assert_eq!(none, 0.0);
}

#[test]
fn ablations_change_the_loss_as_described() {
    let out = PairOutputs { p_i: 0.7, r_i: 0.2, p_j: 0.4, r_j: 0.6 };
    let raw = 0.3;
    let full = pairwise_pop_loss(&out, 1.0, raw, Ablation::FULL).0;
    let neg = pairwise_pop_loss(&out, 1.0, raw, Ablation::NEG).0;
    let flipped = pairwise_pop_loss(&out, -1.0, raw, Ablation::FULL).0;
    assert_eq!(neg, flipped);
    assert_ne!(full, neg);
    let one = pairwise_pop_loss(&out, 1.0, raw, Ablation { kappa_one: true, ..Ablation::FULL }).0;
    let k = kappa(eta_from_raw(raw), &out);
    assert!(close(full, k * one, 1e-12));
    let no_p = pairwise_pop_loss(&out, 1.0, raw, Ablation { no_p: true, ..Ablation::FULL }).0;
    let b = 1.0 / (1.0 + (-(out.r_j - out.r_i)).exp());
    assert!(close(no_p, -k * b.ln(), 1e-12));
    let no_r = pairwise_pop_loss(&out, 1.0, raw, Ablation { no_r: true, ..Ablation::FULL }).0;
    let a = 1.0 / (1.0 + (-(out.p_i - out.p_j)).exp());
    assert!(close(no_r, -k * a.ln(), 1e-12));
}

/// `∫₀¹ log(1 / (α·x^(α−1))) dx` for `Beta(α, 1)` by the midpoint rule.
fn uniform_vs_beta_alpha_one(alpha: f64, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    (0..n)
        .map(|k| {
            let x = (k as f64 + 0.5) * h;
            -(alpha * x.powf(alpha - 1.0)).ln() * h
        })
        .sum()
}

#[test]
fn kl_regularizer_examples() {
    let mut r = rng::stream(11, "beta-samples");
    let beta = Beta::new(0.2, 1.0).unwrap();
    let own: Vec<f64> = (0..1_000_000)
        .map(|_| beta.sample(&mut r))
        .filter(|&v: &f64| v > 0.0 && v < 1.0)
        .collect();
    assert!(kl_regularizer(&own, 0.2, 1.0).unwrap() <= 0.02);

    let oracle = uniform_vs_beta_alpha_one(0.2, 2_000_000);
    assert!(close(oracle, 0.809, 1e-3), "oracle {oracle}");
    let uniform: Vec<f64> = (0..1_000_000).map(|_| r.random_range(1e-9..1.0)).collect();
    let kl = kl_regularizer(&uniform, 0.2, 1.0).unwrap();
    assert!(close(kl, oracle, 0.02), "binned {kl} vs {oracle}");

    assert!(matches!(kl_regularizer(&[0.5], 0.2, 1.0), Err(Error::Input(_))));
    assert!(matches!(kl_regularizer(&[0.5, 1.0], 0.2, 1.0), Err(Error::Domain(_))));
}

#[test]
fn exposure_and_scale_examples() {
    assert_eq!(derive_exposure(&[0.1, 0.5, 0.9], 0.2).unwrap(), vec![false, false, true]);
    assert_eq!(derive_exposure(&[0.3, 0.3, 0.3], 0.2).unwrap(), vec![false; 3]);
    assert!(close(scale_propensity(0.5, 0.8).unwrap(), 0.4, 1e-15));
    assert_eq!(scale_propensity(0.37, 1.0).unwrap(), 0.37);
    assert_eq!(scale_propensity(1e-7, 0.2).unwrap(), 1e-6);
    assert!(matches!(scale_propensity(0.5, 0.0), Err(Error::Config(_))));
    assert!(matches!(scale_propensity(0.5, 1.5), Err(Error::Config(_))));
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        embedding_dim: 4,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn estimates_are_interior_and_deterministic() {
    let model = PropCareModel::initialize(5, 7, &tiny_config(1)).unwrap();
    for u in 0..5 {
        for i in 0..7 {
            let (p, r) = model.estimate(u, i).unwrap();
            assert!(p > 0.0 && p < 1.0 && r > 0.0 && r < 1.0 && p * r < 1.0);
            assert_eq!(model.estimate(u, i).unwrap(), (p, r));
        }
    }
    assert!(model.eta() < 0.0);
    assert!(matches!(model.estimate(5, 0), Err(Error::Input(_))));
}

fn flat_gradient(g: &propcare::propcare::ModelGradients) -> Vec<f64> {
    let mut out: Vec<f64> = g.user_emb.iter().copied().collect();
    out.extend(g.item_emb.iter().copied());
    out.extend(g.f_e.flat());
    out.extend(g.f_p.flat());
    out.extend(g.f_r.flat());
    out.push(g.eta_raw);
    out
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (nu, ni) = (4, 6);
    let pop = vec![0.3, 0.25, 0.2, 0.15, 0.07, 0.03];
    for seed in 0..5 {
        let mut r = rng::stream(seed, "model-gradcheck");
        let config = tiny_config(seed);
        let mut model = PropCareModel::initialize(nu, ni, &config).unwrap();
        let mut theta = model.parameters();
        let last = theta.len() - 1;
        theta[last] = r.random_range(-1.0..1.0);
        model.set_parameters(&theta).unwrap();
        let batch: Vec<Triplet> = (0..12)
            .map(|_| {
                let item = r.random_range(0..ni);
                let other = (item + r.random_range(1..ni)) % ni;
                Triplet { user: r.random_range(0..nu), item, other, y: f64::from(u8::from(r.random_bool(0.3))) }
            })
            .collect();
        let (_, grads) = model.loss_and_gradients(&batch, &pop, &config).unwrap();
        let analytic = flat_gradient(&grads);
        assert_eq!(analytic.len(), theta.len());
        let mut coords: Vec<usize> = (0..40).map(|_| r.random_range(0..theta.len())).collect();
        coords.push(last);
        for k in coords {
            let h = 1e-6;
            let mut probe = model.clone();
            let mut t = theta.clone();
            t[k] += h;
            probe.set_parameters(&t).unwrap();
            let up = probe.loss(&batch, &pop, &config).unwrap().total;
            t[k] -= 2.0 * h;
            probe.set_parameters(&t).unwrap();
            let down = probe.loss(&batch, &pop, &config).unwrap().total;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!(err <= 1e-4, "seed {seed}, coordinate {k}: {} vs {numeric}", analytic[k]);
        }
    }
}

fn tiny_dataset(seed: u64) -> (Vec<InteractionDataset>, Vec<InteractionDataset>) {
    let cfg = SimConfig {
        num_users: 20,
        num_items: 20,
        target_interaction: 0.15,
        target_propensity: 0.12,
        seed,
        ..SimConfig::default()
    };
    let (panel, _) = simulate(&cfg).unwrap();
    let s = split(&panel, SplitScheme::SingleDraw, seed).unwrap();
    (vec![s.train[0].data.clone()], vec![s.valid[0].data.clone()])
}

#[test]
fn naive_only_training_descends() {
    let (tr, va) = tiny_dataset(2);
    let config = TrainConfig { lambda: 0.0, mu: 0.0, max_epochs: 5, patience: 5, ..tiny_config(2) };
    let init = PropCareModel::initialize(20, 20, &config).unwrap();
    let before = dataset_naive_loss(&init, &tr[0]).unwrap();
    let out = train(&tr, &va, &config).unwrap();
    assert!(dataset_naive_loss(&out.model, &tr[0]).unwrap() <= before);
    assert!(out.history.iter().all(|h| h.pairwise == 0.0 && h.eta < 0.0));
}

#[test]
fn training_is_reproducible() {
    let (tr, va) = tiny_dataset(3);
    let config = TrainConfig { max_epochs: 2, ..tiny_config(3) };
    let a = train(&tr, &va, &config).unwrap();
    let b = train(&tr, &va, &config).unwrap();
    assert_eq!(a.model.parameters(), b.model.parameters());
    assert_eq!(a.history, b.history);
    let json = serde_json::to_string(&a.model.to_document()).unwrap();
    let back = PropCareModel::from_json(&json).unwrap();
    assert_eq!(back.parameters(), a.model.parameters());
}

#[test]
fn training_rejects_bad_input() {
    let (tr, va) = tiny_dataset(4);
    let bad = TrainConfig { alpha: 0.0, ..tiny_config(4) };
    assert!(matches!(train(&tr, &va, &bad), Err(Error::Config(_))));
    let other = vec![InteractionDataset::new(3, 20, vec![(0, 1)]).unwrap()];
    assert!(train(&tr, &other, &tiny_config(4)).is_err());
    assert!(train(&[], &va, &tiny_config(4)).is_err());
}

fn study_config(seed: u64, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        batch_size: 512,
        max_epochs: 3,
        patience: 10,
        mu: 2.0,
        ablation,
        seed,
        ..TrainConfig::default()
    }
}

fn study_experiment(seed: u64) -> Experiment {
    let cfg = SimConfig { num_users: 200, num_items: 300, seed, ..SimConfig::default() };
    Experiment::simulate(&cfg, SplitScheme::SingleDraw).unwrap()
}

#[test]
fn popularity_term_improves_propensity_ranking() {
    for seed in 0..3 {
        let exp = study_experiment(seed);
        let tau = |ablation| {
            let model = exp.fit_propcare(&study_config(seed, ablation)).unwrap().model;
            let (p_hat, _) = model.estimate_all().unwrap();
            kendalls_tau(&p_hat, exp.panel.p()).unwrap()
        };
        let (full, without) = (tau(Ablation::FULL), tau(Ablation::NO_P_R));
        assert!(full > without, "seed {seed}: full {full} vs no_p_r {without}");
    }
}

#[test]
fn negated_popularity_hurts_the_ranker() {
    for seed in 0..3 {
        let exp = study_experiment(seed);
        let cdcg = |ablation| {
            let model = exp.fit_propcare(&study_config(seed, ablation)).unwrap().model;
            let est = model.propensity_estimate(0.2, 0.15).unwrap();
            let cfg = DlceConfig { seed, ..DlceConfig::default() };
            ranker_metrics(&exp, Some(&est), &cfg).unwrap().cdcg
        };
        let (full, neg) = (cdcg(Ablation::FULL), cdcg(Ablation::NEG));
        assert!(full > neg, "seed {seed}: full {full} vs neg {neg}");
    }
}

proptest! {
    #[test]
    fn popularity_sums_to_one(counts in proptest::collection::vec(0u64..50, 1..30)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let pop = propcare::propcare::popularity_from_counts(&counts).unwrap();
        prop_assert!((pop.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(pop.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn naive_loss_non_negative(y in 0u8..2, p in 1e-6f64..1.0, r in 1e-6f64..1.0) {
        prop_assert!(naive_loss(f64::from(y), p, r) >= 0.0);
    }

    #[test]
    fn kappa_in_unit_interval(
        eta_raw in -20.0f64..20.0,
        v in proptest::array::uniform4(0.001f64..0.999),
    ) {
        let out = PairOutputs { p_i: v[0], p_j: v[1], r_i: v[2], r_j: v[3] };
        let k = kappa(eta_from_raw(eta_raw), &out);
        prop_assert!(k > 0.0 && k <= 1.0);
        let same = PairOutputs { p_j: v[0], r_j: v[2], ..out };
        prop_assert_eq!(kappa(eta_from_raw(eta_raw), &same), 1.0);
        if (v[0] * v[2] - v[1] * v[3]).abs() > 1e-6 {
            prop_assert!(k < 1.0);
        }
    }

    #[test]
    fn concordant_triplets_cost_less(
        lo_p in 0.01f64..0.49, dp in 0.01f64..0.5,
        lo_r in 0.01f64..0.49, dr in 0.01f64..0.5,
        eta_raw in -3.0f64..3.0,
    ) {
        let ablation = Ablation { kappa_one: true, ..Ablation::FULL };
        let concordant = PairOutputs { p_i: lo_p + dp, p_j: lo_p, r_i: lo_r, r_j: lo_r + dr };
        let discordant = PairOutputs { p_i: lo_p, p_j: lo_p + dp, r_i: lo_r + dr, r_j: lo_r };
        let a = pairwise_pop_loss(&concordant, 1.0, eta_raw, ablation).0;
        let b = pairwise_pop_loss(&discordant, 1.0, eta_raw, ablation).0;
        prop_assert!(a < b);
        prop_assert!(a > -(2.0f64).ln());
    }

    #[test]
    fn kl_non_negative(v in proptest::collection::vec(0.0001f64..0.9999, 2..200)) {
        prop_assert!(kl_regularizer(&v, 0.2, 1.0).unwrap() >= -0.01);
    }

    #[test]
    fn exposure_monotone(v in proptest::collection::vec(0.001f64..0.999, 2..50), eps in -2.0f64..2.0) {
        let z = derive_exposure(&v, eps).unwrap();
        for a in 0..v.len() {
            for b in 0..v.len() {
                if v[a] >= v[b] {
                    prop_assert!(z[a] >= z[b]);
                }
            }
        }
    }
}
