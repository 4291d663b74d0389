//! Preferences over slot latents, learned by importance-weighted moment
//! matching of beliefs inferred from rendered goal-state samples.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use obai_env::{render, sample_scene, video_seed, SceneConfig};
use obai_nn::{ParamStore, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ObaiError;
use crate::inference::{InferenceOptions, Obai};
use crate::model::DiagNormal;
use crate::video::Video;

/// Broad Normal placed on the velocity block so planning is driven by
/// position alone.
pub const VELOCITY_SD: f64 = 10.0;

/// Normal preference `p̃(s) = N(μ̃, diag σ̃²)` over the s-block of a slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preference {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub velocity_sd: f64,
    pub samples: usize,
    pub source: String,
    /// Pixel location the preference was learned for, when known.
    #[serde(default)]
    pub goal: Option<[f64; 2]>,
}

impl Preference {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn s_normal(&self) -> DiagNormal {
        DiagNormal {
            mean: self.mean.clone(),
            var: self.sd.iter().map(|s| s * s).collect(),
        }
    }

    /// Preference over `[s, s']` with the velocity block at `N(0, velocity_sd²)`.
    pub fn full_normal(&self) -> DiagNormal {
        let mut n = self.s_normal();
        n.mean.extend(std::iter::repeat_n(0.0, self.dim()));
        n.var.extend(std::iter::repeat_n(self.velocity_sd * self.velocity_sd, self.dim()));
        n
    }

    /// Diagonal of the precision `L = diag(σ̃⁻²)`.
    pub fn precision(&self) -> Vec<f64> {
        self.sd.iter().map(|s| 1.0 / (s * s)).collect()
    }

    pub fn validate(&self) -> Result<(), ObaiError> {
        if self.mean.len() != self.sd.len() || self.mean.is_empty() {
            return Err(ObaiError::Config("preference mean and sd lengths differ".into()));
        }
        if self.sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(ObaiError::Config("preference needs finite means and positive sds".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ObaiError> {
        let text = serde_json::to_string_pretty(self).expect("preference serializes");
        fs::write(path, text).map_err(|e| ObaiError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ObaiError> {
        let text = fs::read_to_string(path).map_err(|e| ObaiError::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| ObaiError::io(path, e))?;
        p.validate()?;
        Ok(p)
    }
}

/// Belief of one slot for one rendered sample, with its importance weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSample {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub weight: f64,
}

/// Importance-weighted moments:
/// `μ̃ = Σ u_j μ_j / Σ u_j`, `σ̃² = Σ u_j ((μ̃ − μ_j)² + σ_j²) / Σ u_j`,
/// i.e. the first two moments of the weighted Normal mixture.
pub fn fit_preference(samples: &[PreferenceSample]) -> Result<Preference, ObaiError> {
    let first = samples.first().ok_or_else(|| ObaiError::Config("no preference samples".into()))?;
    let d = first.mean.len();
    if samples.iter().any(|s| s.mean.len() != d || s.sd.len() != d) {
        return Err(ObaiError::Config("preference samples differ in dimension".into()));
    }
    if samples.iter().any(|s| !(s.weight >= 0.0 && s.weight.is_finite())) {
        return Err(ObaiError::Config("importance weights must be finite and non-negative".into()));
    }
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if total <= 0.0 {
        return Err(ObaiError::Config("all importance weights are zero".into()));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        let w = s.weight / total;
        for (m, x) in mean.iter_mut().zip(&s.mean) {
            *m += w * x;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        let w = s.weight / total;
        for i in 0..d {
            var[i] += w * ((mean[i] - s.mean[i]).powi(2) + s.sd[i] * s.sd[i]);
        }
    }
    Ok(Preference {
        mean,
        sd: var.into_iter().map(f64::sqrt).collect(),
        velocity_sd: VELOCITY_SD,
        samples: samples.iter().filter(|s| s.weight > 0.0).count(),
        source: String::new(),
        goal: None,
    })
}

/// Preference over true object positions: an isotropic Normal in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruePreference {
    pub mean: [f64; 2],
    pub sd: f64,
}

impl TruePreference {
    pub fn log_density(&self, pos: [f64; 2]) -> f64 {
        let s2 = self.sd * self.sd;
        -((pos[0] - self.mean[0]).powi(2) + (pos[1] - self.mean[1]).powi(2)) / (2.0 * s2)
            - (2.0 * std::f64::consts::PI * s2).ln()
    }
}

impl FromStr for TruePreference {
    type Err = ObaiError;

    /// `m,sd` (same mean on both axes) or `mx,my,sd`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ObaiError::Config(format!("bad position preference {s:?}: {e}")))?;
        let p = match v[..] {
            [m, sd] => Self { mean: [m, m], sd },
            [mx, my, sd] => Self { mean: [mx, my], sd },
            _ => return Err(ObaiError::Config(format!("position preference {s:?} needs 2 or 3 numbers"))),
        };
        if !(p.sd > 0.0) || p.mean.iter().any(|m| !m.is_finite()) {
            return Err(ObaiError::Config(format!("position preference {s:?} needs a positive sd")));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleMode {
    /// Uniform scenes weighted by `u = p̃(s_true)`.
    Importance,
    /// Object positions drawn from `p̃` itself, all weights 1.
    Direct,
}

#[derive(Clone, Debug)]
pub struct CollectConfig {
    pub scene: SceneConfig,
    pub n: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct Collected {
    pub samples: Vec<PreferenceSample>,
    /// Scenes whose inference diverged.
    pub dropped: usize,
}

/// Slot with the least soft-assignment mass on ground-truth foreground
/// pixels. `masks` is `[K·P]`, `truth` is `[P]` with 0 for background.
pub fn background_slot_by_truth(masks: &[f64], truth: &[i32]) -> usize {
    let p = truth.len();
    let k = masks.len() / p;
    (0..k)
        .map(|j| {
            let m: f64 = (0..p).filter(|&i| truth[i] > 0).map(|i| masks[j * p + i]).sum();
            (j, m)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
        .expect("at least one slot")
}

/// Render `n` goal-state samples, infer beliefs, and attach importance
/// weights. Scenes are independent: scene `j` uses its own seeded stream.
pub fn collect_samples<T: Real>(
    net: &Obai,
    store: &ParamStore<T>,
    cfg: &CollectConfig,
    ptrue: &TruePreference,
) -> Result<Collected, ObaiError> {
    let l = net.cfg.latent;
    let results: Vec<Option<(Vec<PreferenceSample>, f64)>> = (0..cfg.n)
        .into_par_iter()
        .map(|j| -> Result<_, ObaiError> {
            let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, j as u64));
            let mut scene = sample_scene(&mut rng, &cfg.scene)?;
            let log_u = match cfg.mode {
                SampleMode::Importance => scene.objects.iter().map(|o| ptrue.log_density(o.position)).sum(),
                SampleMode::Direct => {
                    let n = Normal::new(0.0, ptrue.sd).expect("positive sd");
                    for o in &mut scene.objects {
                        o.position = [
                            (ptrue.mean[0] + n.sample(&mut rng)).clamp(0.0, scene.width as f64),
                            (ptrue.mean[1] + n.sample(&mut rng)).clamp(0.0, scene.height as f64),
                        ];
                    }
                    0.0
                }
            };
            let r = render(&scene);
            let video = Video::<T>::from_rendered(&r);
            let out = match net.infer(store, &video, &mut rng, &InferenceOptions::new(cfg.tau)) {
                Ok(o) => o,
                Err(ObaiError::Numerical(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let dec = net.decode_beliefs(store, &out.beliefs)?;
            let bg = background_slot_by_truth(&dec.masks, &r.mask);
            let samples = (0..net.cfg.slots)
                .filter(|&k| k != bg)
                .map(|k| {
                    let q = out.beliefs.state_normal(0, k);
                    PreferenceSample {
                        mean: q.mean[..l].to_vec(),
                        sd: q.var[..l].iter().map(|v| v.sqrt()).collect(),
                        weight: 0.0,
                    }
                })
                .collect();
            Ok(Some((samples, log_u)))
        })
        .collect::<Result<_, _>>()?;
    let max_log = results
        .iter()
        .flatten()
        .map(|(_, lu)| *lu)
        .fold(f64::NEG_INFINITY, f64::max);
    let dropped = results.iter().filter(|r| r.is_none()).count();
    let mut samples = Vec::new();
    for (s, lu) in results.into_iter().flatten() {
        let w = if max_log.is_finite() { (lu - max_log).exp() } else { 0.0 };
        samples.extend(s.into_iter().map(|mut s| {
            s.weight = w;
            s
        }));
    }
    if dropped > 0 {
        log::warn!("{dropped} preference scenes dropped after non-finite inference");
    }
    Ok(Collected { samples, dropped })
}
