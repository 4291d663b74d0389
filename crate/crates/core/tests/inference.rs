//! End-to-end inference checks: gradients of the composite loss, schedule
//! determinism and predictive initialization.

mod common;

use obai::inference::InferenceOptions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn composite_loss_gradients_match_finite_differences() {
    let (net, store) = common::tiny_network(3);
    let video = common::env_video(2, 8, 1, 5);
    let report = common::composite_gradcheck(&net, &store, &video, 6);
    eprintln!("checked {} coordinates, max rel err {:.3e}, worst {:?}", report.checked, report.max_rel_err, report.worst);
    assert!(report.passes(1e-4));
}

#[test]
fn inference_is_deterministic_given_the_stream() {
    let (net, store) = common::tiny_network(4);
    let video = common::env_video(3, 8, 1, 6);
    let run = |seed| {
        net.infer(&store, &video, &mut ChaCha8Rng::seed_from_u64(seed), &InferenceOptions::new(0.5))
            .unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a.beliefs, b.beliefs);
    assert_eq!(a.composite, b.composite);
    assert_ne!(a.composite, c.composite);
}

#[test]
fn replayed_inputs_reproduce_the_recorded_pass() {
    let (net, store) = common::tiny_network(5);
    let video = common::env_video(2, 8, 1, 7);
    let mut opts = InferenceOptions::new(0.5);
    opts.record_inputs = true;
    let rec = net.infer(&store, &video, &mut ChaCha8Rng::seed_from_u64(3), &opts).unwrap();
    assert_eq!(rec.inputs.len(), 8);
    let mut replay = InferenceOptions::new(0.5);
    replay.replay = Some(rec.inputs.clone());
    let again = net.infer(&store, &video, &mut ChaCha8Rng::seed_from_u64(3), &replay).unwrap();
    assert_eq!(rec.beliefs, again.beliefs);
    assert_eq!(rec.composite, again.composite);
}

#[test]
fn new_frames_start_from_the_dynamics_prediction() {
    // With untouched (zero) output layers nothing is refined, so the second
    // frame's beliefs are exactly the prediction from λ₀ under λ₀'s action.
    let cfg = obai::ModelConfig::tiny(8, 8, 2, 4);
    let net = obai::Obai::new(&cfg).unwrap();
    let store = net.init_params::<f64>(9).unwrap();
    let video = common::env_video(2, 8, 1, 8);
    let out = net
        .infer(&store, &video, &mut ChaCha8Rng::seed_from_u64(0), &InferenceOptions::new(0.5))
        .unwrap();
    let q0 = out.beliefs.state_normal(0, 0);
    let a0 = out.beliefs.action_normal(0, 0);
    let d_t = store.get(obai::model::D_PARAM).unwrap();
    // Row-major L×2 from the stored 2×L transpose.
    let l = cfg.latent;
    let d: Vec<f64> = (0..l).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| d_t.data()[j * l + i]).collect();
    let want = obai::model::dynamics_predict(&q0, &a0, &d, cfg.sigma_s);
    let got = out.beliefs.state_normal(1, 0);
    for (a, b) in got.mean.iter().zip(&want.mean) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in got.var.iter().zip(&want.var) {
        assert!((a - b).abs() / b < 1e-10);
    }
}
