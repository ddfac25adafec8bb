use proptest::prelude::*;
use propcare::data::{InteractionDataset, SplitScheme};
use propcare::datagen::SimConfig;
use propcare::diagnostics::gradient_suite;
use propcare::pipeline::{ranker_metrics, Experiment};
use propcare::ranker::{
    dlce_loss, dlce_loss_grad, rank_all, rank_by_scores, train_ranker, DlceConfig, RankerDraw, RankerModel,
};

fn cfg() -> DlceConfig {
    DlceConfig::default()
}

#[test]
fn loss_examples() {
    assert!((dlce_loss(true, true, 0.5, 0.3, 0.3, &cfg()) - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((dlce_loss(true, true, 0.5, 0.0, 0.0, &cfg()) - 1.3863).abs() < 1e-4);
    let clipped = dlce_loss(true, true, 0.05, 0.0, 0.0, &cfg());
    assert!((clipped - 10.0 * 2f64.ln()).abs() < 1e-12);
    for z in [false, true] {
        assert_eq!(dlce_loss(false, z, 0.3, 1.7, -2.0, &cfg()), 0.0);
    }
}

#[test]
fn rank_examples() {
    assert_eq!(rank_by_scores(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
    assert_eq!(rank_by_scores(&[0.4; 5]), vec![0, 1, 2, 3, 4]);
}

#[test]
fn ranker_gradient_check() {
    let dlce = gradient_suite(100, 3).unwrap().into_iter().find(|c| c.objective == "dlce").unwrap();
    assert!(dlce.passed(), "{dlce:?}");
}

fn toy() -> (InteractionDataset, Vec<bool>, Vec<f64>) {
    let (nu, ni) = (6, 9);
    let positives: Vec<(u32, u32)> = (0..nu as u32)
        .flat_map(|u| [(u, u % 3), (u, 3 + u % 4)])
        .collect();
    let data = InteractionDataset::new(nu, ni, positives).unwrap();
    let z: Vec<bool> = (0..nu * ni).map(|k| k % 3 != 1).collect();
    let p: Vec<f64> = (0..nu * ni).map(|k| 0.05 + 0.9 * ((k * 7) % 11) as f64 / 11.0).collect();
    (data, z, p)
}

fn mean_train_loss(model: &RankerModel, data: &InteractionDataset, z: &[bool], p: &[f64], c: &DlceConfig) -> f64 {
    let ni = data.num_items();
    let mut total = 0.0;
    let mut n = 0.0;
    for &(u, i) in data.positives() {
        let (u, i) = (u as usize, i as usize);
        for j in (0..ni).filter(|&j| j != i) {
            total += dlce_loss(true, z[u * ni + i], p[u * ni + i], model.score(u, i), model.score(u, j), c);
            n += 1.0;
        }
    }
    total / n
}

#[test]
fn one_epoch_descends() {
    let (data, z, p) = toy();
    let c = DlceConfig { dim: 4, max_epochs: 1, patience: 1, learning_rate: 1e-3, l2: 0.0, ..cfg() };
    let init = RankerModel::initialize(6, 9, &c).unwrap();
    let draw = RankerDraw { data: &data, exposure: &z };
    let trained = train_ranker(&[draw], &[draw], &p, &c).unwrap();
    assert!(mean_train_loss(&trained.model, &data, &z, &p, &c) <= mean_train_loss(&init, &data, &z, &p, &c));
}

#[test]
fn training_is_deterministic() {
    let (data, z, p) = toy();
    let c = DlceConfig { dim: 4, max_epochs: 5, ..cfg() };
    let draw = RankerDraw { data: &data, exposure: &z };
    let a = train_ranker(&[draw], &[draw], &p, &c).unwrap();
    let b = train_ranker(&[draw], &[draw], &p, &c).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(rank_all(&a.model).unwrap(), rank_all(&b.model).unwrap());
}

#[test]
fn bad_propensity_rejected() {
    let (data, z, mut p) = toy();
    p[3] = 1.0;
    let draw = RankerDraw { data: &data, exposure: &z };
    assert!(train_ranker(&[draw], &[draw], &p, &cfg()).is_err());
    assert!(train_ranker(&[draw], &[draw], &p[..5], &cfg()).is_err());
}

#[test]
fn ground_truth_beats_random_propensity() {
    for seed in 0..3 {
        let sim = SimConfig { num_users: 200, num_items: 300, seed, ..SimConfig::default() };
        let exp = Experiment::simulate(&sim, SplitScheme::SingleDraw).unwrap();
        let c = DlceConfig { seed, ..cfg() };
        let gt = ranker_metrics(&exp, None, &c).unwrap().cdcg;
        let random = exp.random_estimate(seed, 0.2, 0.15).unwrap();
        let rnd = ranker_metrics(&exp, Some(&random), &c).unwrap().cdcg;
        assert!(gt >= rnd, "seed {seed}: ground truth {gt} vs random {rnd}");
    }
}

proptest! {
    #[test]
    fn loss_monotone_in_score_gap(p in 0.01f64..0.99, a in -5.0f64..5.0, b in -5.0f64..5.0) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = (a.min(b), a.max(b));
        let c = cfg();
        prop_assert!(dlce_loss(true, true, p, hi, 0.0, &c) < dlce_loss(true, true, p, lo, 0.0, &c));
        prop_assert!(dlce_loss(true, false, p, hi, 0.0, &c) > dlce_loss(true, false, p, lo, 0.0, &c));
        prop_assert!(dlce_loss(true, true, p, a, b, &c) >= 0.0);
    }

    #[test]
    fn clipping_is_exact(p in 1e-6f64..0.1, q in 0.9f64..0.999999, diff in -3.0f64..3.0) {
        let c = cfg();
        prop_assert_eq!(dlce_loss_grad(true, true, p, diff, &c), dlce_loss_grad(true, true, c.chi1, diff, &c));
        prop_assert_eq!(dlce_loss_grad(true, false, q, diff, &c), dlce_loss_grad(true, false, 1.0 - c.chi0, diff, &c));
    }

    #[test]
    fn rankings_are_permutations(scores in proptest::collection::vec(-1.0f64..1.0, 1..50)) {
        let mut order = rank_by_scores(&scores);
        for w in order.windows(2) {
            prop_assert!(scores[w[0] as usize] >= scores[w[1] as usize]);
        }
        order.sort_unstable();
        prop_assert_eq!(order, (0..scores.len() as u32).collect::<Vec<_>>());
    }
}
