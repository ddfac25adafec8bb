use proptest::prelude::*;
use propcare::causal::{
    add_propensity_noise, bias_formula, flip_exposure, ips_estimate, ips_panel_check, monte_carlo_bias, BiasInputs,
    ExposureRule,
};
use propcare::Error;

fn bias(p: f64, p_hat: f64, delta_z: f64, y1: bool, y0: bool) -> f64 {
    bias_formula(&BiasInputs { p, p_hat, delta_z, y1, y0 }).unwrap()
}

#[test]
fn ips_examples() {
    assert_eq!(ips_estimate(true, true, 0.5).unwrap(), 2.0);
    assert_eq!(ips_estimate(false, true, 0.5).unwrap(), -2.0);
    for z in [false, true] {
        assert_eq!(ips_estimate(z, false, 0.37).unwrap(), 0.0);
    }
    assert!(matches!(ips_estimate(true, true, 1.0), Err(Error::Domain(_))));
}

#[test]
fn bias_examples() {
    for (y1, y0) in [(false, false), (true, false), (false, true), (true, true)] {
        assert_eq!(bias(0.3, 0.3, 0.0, y1, y0), 0.0);
    }
    assert!((bias(0.5, 0.25, 0.0, true, false) - 1.0).abs() < 1e-15);
    assert!((bias(0.5, 0.5, 0.1, false, true) - 0.2).abs() < 1e-15);
    assert!(bias_formula(&BiasInputs { p: 0.95, p_hat: 0.5, delta_z: 0.1, y1: true, y0: false }).is_err());
}

#[test]
fn bias_blows_up_near_zero() {
    let near = bias(0.5, 1e-4, 0.0, true, false).abs();
    let far = bias(0.5, 0.1, 0.0, true, false).abs();
    assert!(near > 100.0 * far);
}

#[test]
fn unbiased_with_true_quantities() {
    for (p, y1, y0) in [(0.2, true, false), (0.5, false, true), (0.8, true, true)] {
        let m = monte_carlo_bias(p, p, y1, y0, ExposureRule::Exact, 10_000, 9).unwrap();
        assert!(m.within(0.0, 3.0), "{p} {y1} {y0}: {m:?}");
    }
}

#[test]
fn monte_carlo_matches_formula_for_halved_propensity() {
    let p = 0.6;
    let m = monte_carlo_bias(p, p / 2.0, true, false, ExposureRule::Exact, 10_000, 4).unwrap();
    assert!(m.within(bias(p, p / 2.0, 0.0, true, false), 3.0), "{m:?}");
    let shifted = monte_carlo_bias(p, 0.4, true, true, ExposureRule::Shifted(-0.1), 10_000, 4).unwrap();
    assert!(shifted.within(bias(p, 0.4, -0.1, true, true), 3.0), "{shifted:?}");
}

#[test]
fn shifted_exposure_matches_formula_with_discordant_outcomes() {
    for (p, p_hat, dz, y1, y0) in [(0.2, 0.3, 0.1, true, false), (0.5, 0.7, -0.1, false, true), (0.8, 0.5, 0.1, false, true)] {
        let m = monte_carlo_bias(p, p_hat, y1, y0, ExposureRule::Shifted(dz), 10_000, 6).unwrap();
        assert!(m.within(bias(p, p_hat, dz, y1, y0), 3.0), "{p} {p_hat} {dz}: {m:?}");
    }
}

#[test]
fn stderr_scales_with_root_trials() {
    let small = monte_carlo_bias(0.3, 0.2, true, false, ExposureRule::Exact, 10_000, 1).unwrap();
    let large = monte_carlo_bias(0.3, 0.2, true, false, ExposureRule::Exact, 40_000, 2).unwrap();
    let ratio = small.stderr / large.stderr;
    assert!((ratio - 2.0).abs() <= 0.4, "ratio {ratio}");
}

#[test]
fn panel_check_is_unbiased() {
    let p = [0.1, 0.5, 0.9, 0.3];
    let y1 = [true, true, false, true];
    let y0 = [false, true, true, false];
    let checks = ips_panel_check(&p, &y1, &y0, 10_000, 3).unwrap();
    assert_eq!(checks.len(), 4);
    assert!(checks.iter().all(|m| m.within(0.0, 4.0)), "{checks:?}");
}

#[test]
fn flip_examples() {
    let z: Vec<bool> = (0..100).map(|k| k % 7 == 0).collect();
    assert_eq!(flip_exposure(&z, 0.0, 1).unwrap(), z);
    let all: Vec<bool> = z.iter().map(|v| !v).collect();
    assert_eq!(flip_exposure(&z, 1.0, 1).unwrap(), all);
    let half = flip_exposure(&z, 0.5, 1).unwrap();
    assert_eq!(half.iter().zip(&z).filter(|(a, b)| a != b).count(), 50);
    assert!(flip_exposure(&z, 1.5, 1).is_err());
}

#[test]
fn noise_examples() {
    let p = [0.2, 0.5, 0.8];
    assert_eq!(add_propensity_noise(&p, 0.0, 3).unwrap(), p.to_vec());
    let flat = vec![0.5; 1_000_000];
    let noisy = add_propensity_noise(&flat, 0.1, 3).unwrap();
    let mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
    let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noisy.len() - 1) as f64;
    let sd = var.sqrt();
    assert!((0.097..=0.103).contains(&sd), "sd {sd}");
    assert!(noisy.iter().all(|&v| (0.01..=0.99).contains(&v)));
    assert!(add_propensity_noise(&p, -0.1, 3).is_err());
}

proptest! {
    #[test]
    fn zero_shift_reduces_to_propensity_bias(p in 0.01f64..0.99, p_hat in 0.01f64..0.99, y1: bool, y0: bool) {
        let expected = (p / p_hat - 1.0) * f64::from(u8::from(y1))
            - ((1.0 - p) / (1.0 - p_hat) - 1.0) * f64::from(u8::from(y0));
        prop_assert!((bias(p, p_hat, 0.0, y1, y0) - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
    }

    #[test]
    fn exposure_shift_decomposes(
        p in 0.1f64..0.9, p_hat in 0.01f64..0.99, dz in -0.1f64..0.1, y1: bool, y0: bool,
    ) {
        let diff = bias(p, p_hat, dz, y1, y0) - bias(p, p_hat, 0.0, y1, y0);
        let expected = dz * f64::from(u8::from(y1)) / p_hat + dz * f64::from(u8::from(y0)) / (1.0 - p_hat);
        prop_assert!((diff - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
    }

    #[test]
    fn flip_count_is_exact(n in 1usize..300, fraction in 0.0f64..1.0, seed: u64) {
        let z = vec![false; n];
        let flipped = flip_exposure(&z, fraction, seed).unwrap();
        prop_assert_eq!(flipped.iter().filter(|&&v| v).count(), (fraction * n as f64).round() as usize);
    }
}
