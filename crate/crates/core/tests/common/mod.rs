//! Shared fixtures for the integration tests.

#![allow(dead_code)]

pub mod checks;


use obai::inference::{InferenceOptions, RefinementInputs};
use obai::{ModelConfig, Obai, Video};
use obai_env::{generate_video, DatasetConfig};
use obai_nn::gradcheck::{GradCheck, GradCheckReport};
use obai_nn::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn env_video(frames: usize, side: usize, objects: usize, seed: u64) -> Video<f64> {
    let cfg = DatasetConfig {
        n_videos: 1,
        frames,
        height: side,
        width: side,
        n_objects: objects,
        seed: 0,
        static_objects: false,
    };
    Video::from_record(&generate_video(&cfg, seed).unwrap())
}

/// 8×8, K=2, latent 4 network whose zero-initialized output layers are
/// replaced by small random weights so every refinement path carries
/// gradient.
pub fn tiny_network(seed: u64) -> (Obai, ParamStore<f64>) {
    let cfg = ModelConfig::tiny(8, 8, 2, 4);
    let net = Obai::new(&cfg).unwrap();
    let mut store = net.init_params::<f64>(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for name in ["ref.out.w", "ref.out.b", "act.out.w", "act.out.b"] {
        if let Some(t) = store.get_mut(name) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    }
    (net, store)
}

/// Finite-difference check of the composite loss of a full inference pass.
/// The detached refinement inputs are recorded once and replayed, so the
/// numerical derivative sees the same stop-gradient function as backprop.
pub fn composite_gradcheck(
    net: &Obai,
    store: &ParamStore<f64>,
    video: &Video<f64>,
    per_tensor: usize,
) -> GradCheckReport {
    let mut opts = InferenceOptions::new(0.5);
    opts.record_inputs = true;
    let rec = net.infer(store, video, &mut ChaCha8Rng::seed_from_u64(11), &opts).unwrap();
    let replay: Vec<RefinementInputs<f64>> = rec.inputs;
    let mut opts = InferenceOptions::new(0.5);
    opts.replay = Some(replay);
    let check = GradCheck {
        eps: 1e-4,
        max_per_tensor: per_tensor,
        ..GradCheck::default()
    };
    check
        .params(store, |s, g| {
            let run = net
                .run_graph(g, s, video, &mut ChaCha8Rng::seed_from_u64(11), &opts)
                .expect("inference");
            Ok(run.composite)
        })
        .unwrap()
}
