//! Preference fitting against Monte-Carlo and closed-form oracles.

mod common;

use common::checks::{self, random_samples};
use obai::preference::{fit_preference, Preference, PreferenceSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn fit_matches_monte_carlo_mixture_moments() {
    let o = checks::preference_oracle(20, 1_000_000);
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn weight_scale_invariance_is_exact() {
    let o = checks::preference_weight_scale(20);
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn arbitrary_weight_scales_agree_to_rounding() {
    let samples = random_samples(30, 4, 9);
    let base = fit_preference(&samples).unwrap();
    let scaled: Vec<PreferenceSample> = samples
        .iter()
        .map(|s| PreferenceSample {
            weight: s.weight * 3.7e-5,
            ..s.clone()
        })
        .collect();
    let p = fit_preference(&scaled).unwrap();
    for i in 0..4 {
        assert!((p.mean[i] - base.mean[i]).abs() < 1e-12);
        assert!((p.sd[i] - base.sd[i]).abs() < 1e-12);
    }
}

/// Latents equal to the true position plus fixed Normal noise, proposals
/// uniform, weights the target density: the fit must recover the target
/// mean and the target variance plus the belief variance.
#[test]
fn linear_gaussian_importance_pipeline() {
    let (m, s, belief_sd): ([f64; 2], f64, f64) = ([3.0, -2.0], 1.5, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples: Vec<PreferenceSample> = (0..200_000)
        .map(|_| {
            let x = [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)];
            let log_u: f64 = (0..2).map(|i| -(x[i] - m[i]).powi(2) / (2.0 * s * s)).sum();
            PreferenceSample {
                mean: x.to_vec(),
                sd: vec![belief_sd; 2],
                weight: log_u.exp(),
            }
        })
        .collect();
    let p = fit_preference(&samples).unwrap();
    let want_sd = (s * s + belief_sd * belief_sd).sqrt();
    for i in 0..2 {
        assert!((p.mean[i] - m[i]).abs() < 0.03, "mean {i} = {}", p.mean[i]);
        assert!((p.sd[i] - want_sd).abs() < 0.03, "sd {i} = {}", p.sd[i]);
    }
}

#[test]
fn preference_files_round_trip_and_accept_missing_goal() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = fit_preference(&random_samples(8, 3, 4)).unwrap();
    p.goal = Some([16.0, 16.0]);
    let path = dir.path().join("p.json");
    p.save(&path).unwrap();
    assert_eq!(Preference::load(&path).unwrap(), p);

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("goal");
    std::fs::write(&path, v.to_string()).unwrap();
    assert_eq!(Preference::load(&path).unwrap().goal, None);
}

#[test]
fn invalid_preference_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = fit_preference(&random_samples(8, 2, 4)).unwrap();
    p.sd[1] = 0.0;
    let path = dir.path().join("p.json");
    p.save(&path).unwrap();
    assert!(Preference::load(&path).is_err());
}
