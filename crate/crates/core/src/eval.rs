//! Held-out evaluation: segmentation (ARI, FARI), reconstruction MSE and
//! future-frame prediction against a persist-last-frame baseline.

use obai_env::{video_seed, Dataset};
use obai_nn::{ParamStore, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ObaiError;
use crate::inference::{Beliefs, InferenceOptions, Obai};
use crate::metrics::{ari, argmax_labels, fari, mse};
use crate::model::{decode_values, dynamics_predict, DecodeValues, DiagNormal};
use crate::planner::dynamics_matrix;
use crate::video::Video;

pub const POOLING: &str = "pixels pooled across the frames of a video; mean over videos";

/// Extrapolate frame `t`'s beliefs `steps` times with zero actions and
/// decode the predicted means. Entry 0 is the reconstruction of frame `t`.
pub fn predict_rollout<T: Real>(
    net: &Obai,
    store: &ParamStore<T>,
    beliefs: &Beliefs<T>,
    t: usize,
    steps: usize,
) -> Result<Vec<DecodeValues>, ObaiError> {
    let (k, l) = (net.cfg.slots, net.cfg.latent);
    let d = dynamics_matrix(store)?;
    let mut qs: Vec<DiagNormal> = (0..k).map(|j| beliefs.state_normal(t, j)).collect();
    let zero = DiagNormal::point(vec![0.0, 0.0]);
    let mut out = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        if step > 0 {
            for q in &mut qs {
                *q = dynamics_predict(q, &zero, &d, net.cfg.sigma_s);
            }
        }
        let s: Vec<T> = qs.iter().flat_map(|q| q.mean[..l].iter().map(|&v| T::from_f64(v))).collect();
        out.push(decode_values(&net.model, store, Tensor::new(&[k, l], s)?, 1)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub index: usize,
    pub ari: f64,
    pub fari: Option<f64>,
    pub mse: f64,
    /// Reconstruction MSE of the current window after each iteration.
    pub iteration_mse: Vec<f64>,
    pub rollout_mse: Vec<f64>,
    pub persist_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: usize,
    pub ari: f64,
    pub fari: f64,
    pub mse: f64,
    pub pooling: String,
    /// Mean rollout MSE per predicted step.
    pub prediction_mse: Vec<f64>,
    pub persist_mse: Vec<f64>,
    /// Fraction of videos whose mean rollout MSE beats persisting the last
    /// observed frame.
    pub rollout_win_rate: Option<f64>,
    pub per_video: Vec<VideoEval>,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub tau: f64,
    /// Observe this many frames and predict the rest (0 = no rollout).
    pub observe: usize,
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            tau: 0.2,
            observe: 0,
            limit: 0,
        }
    }
}

fn frame_values<T: Real>(video: &Video<T>, t: usize) -> Vec<f64> {
    let n = 3 * video.height() * video.width();
    video.frames.data()[t * n..(t + 1) * n].iter().map(|v| v.as_f64()).collect()
}

/// Segmentation and reconstruction scores of decoded beliefs against one
/// video; `truth` holds `F·P` labels.
pub fn score_decode<T: Real>(dec: &DecodeValues, video: &Video<T>, truth: &[i32]) -> (f64, Option<f64>, f64) {
    let p = dec.pixels();
    let mut pred = Vec::with_capacity(dec.frames * p);
    for t in 0..dec.frames {
        let m = &dec.masks[t * dec.slots * p..(t + 1) * dec.slots * p];
        pred.extend(argmax_labels(m, dec.slots));
    }
    let truth = &truth[..dec.frames * p];
    let frames: Vec<f64> = (0..dec.frames).flat_map(|t| frame_values(video, t)).collect();
    (ari(truth, &pred), fari(truth, &pred), mse(&dec.recon, &frames))
}

pub fn evaluate_video<T: Real>(
    net: &Obai,
    store: &ParamStore<T>,
    video: &Video<T>,
    index: usize,
    opts: &EvalOptions,
) -> Result<VideoEval, ObaiError> {
    let truth = video
        .masks
        .as_ref()
        .ok_or_else(|| ObaiError::Config("evaluation needs ground-truth masks".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(opts.seed, index as u64));
    let out = net.infer(store, video, &mut rng, &InferenceOptions::new(opts.tau))?;
    let dec = net.decode_beliefs(store, &out.beliefs)?;
    let (a, fa, m) = score_decode(&dec, video, truth);
    let mut ev = VideoEval {
        index,
        ari: a,
        fari: fa,
        mse: m,
        iteration_mse: out.breakdowns.iter().map(|b| b.recon_mse).collect(),
        rollout_mse: Vec::new(),
        persist_mse: Vec::new(),
    };
    let f = video.len();
    if opts.observe > 0 && opts.observe < f {
        let seen = video.window(0, opts.observe);
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed(opts.seed ^ 1, index as u64));
        let obs = net.infer(store, &seen, &mut rng, &InferenceOptions::new(opts.tau))?;
        let roll = predict_rollout(net, store, &obs.beliefs, opts.observe - 1, f - opts.observe)?;
        let last = frame_values(video, opts.observe - 1);
        for (step, dec) in roll.iter().enumerate().skip(1) {
            let target = frame_values(video, opts.observe - 1 + step);
            ev.rollout_mse.push(mse(&dec.recon, &target));
            ev.persist_mse.push(mse(&last, &target));
        }
    }
    Ok(ev)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Evaluate every video of `data` (or the first `limit`).
pub fn evaluate<T: Real>(net: &Obai, store: &ParamStore<T>, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport, ObaiError> {
    let n = if opts.limit > 0 { opts.limit.min(data.len()) } else { data.len() };
    let per_video: Vec<VideoEval> = (0..n)
        .into_par_iter()
        .map(|i| {
            let video = Video::<T>::from_record(&data.load(i)?);
            evaluate_video(net, store, &video, i, opts)
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(per_video))
}

pub fn summarize(per_video: Vec<VideoEval>) -> EvalReport {
    let steps = per_video.iter().map(|v| v.rollout_mse.len()).max().unwrap_or(0);
    let step_mean = |f: &dyn Fn(&VideoEval) -> Option<f64>| mean(per_video.iter().filter_map(f));
    let prediction_mse = (0..steps).map(|s| step_mean(&|v| v.rollout_mse.get(s).copied())).collect();
    let persist_mse = (0..steps).map(|s| step_mean(&|v| v.persist_mse.get(s).copied())).collect();
    let rollout_win_rate = (steps > 0).then(|| {
        let wins = per_video
            .iter()
            .filter(|v| mean(v.rollout_mse.iter().copied()) < mean(v.persist_mse.iter().copied()))
            .count();
        wins as f64 / per_video.len() as f64
    });
    EvalReport {
        videos: per_video.len(),
        ari: mean(per_video.iter().map(|v| v.ari)),
        fari: mean(per_video.iter().filter_map(|v| v.fari)),
        mse: mean(per_video.iter().map(|v| v.mse)),
        pooling: POOLING.into(),
        prediction_mse,
        persist_mse,
        rollout_win_rate,
        per_video,
    }
}
