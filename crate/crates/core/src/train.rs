//! Training: Adam with a plateau learning-rate schedule, data-parallel
//! gradient accumulation with a fixed reduction order, checkpoints that
//! carry the full optimizer state, and per-step CSV logs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use obai_env::{video_seed, Dataset};
use obai_nn::{Checkpoint, Graph, Gradients, ParamStore, Real, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::ObaiError;
use crate::inference::{InferenceOptions, Obai};
use crate::loss::{LossBreakdown, TauSchedule};
use crate::video::Video;

const EPOCH_SALT: u64 = 0x0e90_c4a1_d5e7_1f00;
const VALID_SALT: u64 = 0x7a11_d000_5eed_0001;
pub const CSV_HEADER: &str = "step,epoch,loss,entropy,reconstruction,action,dynamics,recon_mse,tau,lr,grad_norm";

/// Adam with the usual defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name, Tensor::zeros(p.shape())).expect("unique names");
        }
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update; parameters without a gradient see a zero
    /// gradient (their moments still decay).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for id in 0..params.len() {
            let g = grads.get(id).map(|g| g.data());
            let m = self.m.get_by_id_mut(id).data_mut();
            let v = self.v.get_by_id_mut(id).data_mut();
            let p = params.get_by_id_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = T::from_f64(p[i].as_f64() - upd);
            }
        }
    }
}

/// Divide the learning rate by `factor` after `patience` consecutive epochs
/// without relative improvement of the validation loss, never going below
/// `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Record one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) => loss < b - self.threshold * b.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr / self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub lr_min: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_epochs: usize,
    /// Videos held out from the training data for validation when no
    /// separate validation set is given.
    pub val_videos: usize,
    /// Train on single frames with the dynamics and action terms removed.
    pub static_ablation: bool,
    /// Cap on training videos (0 = all).
    pub max_videos: usize,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            lr_factor: 3.0,
            lr_patience: 10,
            lr_min: 3e-5,
            batch: 16,
            epochs: 30,
            seed: 0,
            tau_start: 1.0,
            tau_end: 0.2,
            tau_epochs: 50,
            val_videos: 64,
            static_ablation: false,
            max_videos: 0,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn tau(&self) -> TauSchedule {
        TauSchedule {
            start: self.tau_start,
            end: self.tau_end,
            epochs: self.tau_epochs,
        }
    }

    pub fn validate(&self) -> Result<(), ObaiError> {
        let bad = |m: &str| Err(ObaiError::Config(m.into()));
        if !(self.lr > 0.0) || !(self.lr_min > 0.0) || self.lr_min > self.lr {
            return bad("need 0 < lr_min ≤ lr");
        }
        if !(self.lr_factor > 1.0) {
            return bad("lr_factor must exceed 1");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.tau_start > 0.0) || !(self.tau_end > 0.0) {
            return bad("Gumbel temperatures must be positive");
        }
        Ok(())
    }
}

/// One training example: frames `start..start+len` of video `video`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub video: usize,
    pub start: usize,
    pub len: usize,
}

/// Whole videos, or every frame on its own for the static ablation.
pub fn make_items(videos: &[usize], frames: usize, static_frames: bool) -> Vec<Item> {
    if static_frames {
        videos
            .iter()
            .flat_map(|&v| (0..frames).map(move |t| Item { video: v, start: t, len: 1 }))
            .collect()
    } else {
        videos.iter().map(|&v| Item { video: v, start: 0, len: frames }).collect()
    }
}

pub fn load_item<T: Real>(data: &Dataset, item: Item) -> Result<Video<T>, ObaiError> {
    let rec = data.load(item.video)?;
    let v = Video::<T>::from_record(&rec);
    Ok(if item.start == 0 && item.len == v.len() {
        v
    } else {
        v.window(item.start, item.len)
    })
}

/// Mean final-iteration breakdown and composite loss of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub entropy: f64,
    pub reconstruction: f64,
    pub action: f64,
    pub dynamics: f64,
    pub recon_mse: f64,
    pub tau: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.5},{:.3e},{:.4e}",
            self.step,
            self.epoch,
            self.loss,
            self.entropy,
            self.reconstruction,
            self.action,
            self.dynamics,
            self.recon_mse,
            self.tau,
            self.lr,
            self.grad_norm
        )
    }
}

/// Resumable position of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Batches of the current epoch already consumed.
    pub batch_in_epoch: usize,
    pub plateau: Plateau,
    pub adam_t: u64,
    pub val_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
}

pub struct Trainer<T> {
    pub net: Obai,
    pub cfg: TrainConfig,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub state: TrainState,
}

/// Per-video randomness for step `step`, position `slot` in the batch.
fn step_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(video_seed(video_seed(seed, step), slot as u64))
}

/// Forward and backward pass of one example: composite loss, final
/// breakdown and parameter gradients.
pub fn example_gradients<T: Real>(
    net: &Obai,
    params: &ParamStore<T>,
    video: &Video<T>,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, LossBreakdown, Gradients<T>), ObaiError> {
    let mut g = Graph::new();
    let run = net.run_graph(&mut g, params, video, rng, &InferenceOptions::new(tau))?;
    let loss = g.value(run.composite).item().as_f64();
    if !loss.is_finite() {
        return Err(ObaiError::Numerical("non-finite composite loss".into()));
    }
    let grads = g.backward(run.composite)?;
    let last = run.breakdowns.last().cloned().expect("at least one iteration");
    Ok((loss, last, grads))
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self, ObaiError> {
        cfg.validate()?;
        let mut model = model.clone();
        if cfg.static_ablation {
            model.dynamics = false;
        }
        let net = Obai::new(&model)?;
        let params = net.init_params(cfg.seed)?;
        Ok(Self {
            adam: Adam::new(&params),
            net,
            params,
            state: TrainState {
                step: 0,
                epoch: 0,
                batch_in_epoch: 0,
                plateau: Plateau::new(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.lr_min),
                adam_t: 0,
                val_history: Vec::new(),
            },
            cfg: cfg.clone(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.state.plateau.lr
    }

    pub fn tau(&self) -> f64 {
        self.cfg.tau().at(self.state.epoch)
    }

    /// One optimizer step on a batch. Examples run in parallel; their
    /// gradients are summed in batch order, so the result does not depend
    /// on the thread count.
    pub fn train_step(&mut self, videos: &[Video<T>]) -> Result<StepLog, ObaiError> {
        let tau = self.tau();
        let (net, params, seed, step) = (&self.net, &self.params, self.cfg.seed, self.state.step);
        let results: Vec<_> = videos
            .par_iter()
            .enumerate()
            .map(|(i, v)| example_gradients(net, params, v, tau, &mut step_rng(seed, step, i)))
            .collect::<Result<_, _>>()?;
        let n = results.len() as f64;
        let mut total = Gradients::default();
        let mut log = StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            loss: 0.0,
            entropy: 0.0,
            reconstruction: 0.0,
            action: 0.0,
            dynamics: 0.0,
            recon_mse: 0.0,
            tau,
            lr: self.lr(),
            grad_norm: 0.0,
        };
        for (loss, b, g) in &results {
            total.accumulate(g);
            log.loss += loss / n;
            log.entropy += b.entropy / n;
            log.reconstruction += b.reconstruction / n;
            log.action += b.action / n;
            log.dynamics += b.dynamics / n;
            log.recon_mse += b.recon_mse / n;
        }
        total.scale(T::from_f64(1.0 / n));
        if !total.all_finite() {
            return Err(ObaiError::Numerical(format!("non-finite gradient at step {}", self.state.step)));
        }
        log.grad_norm = total.global_norm();
        let lr = self.lr();
        self.adam.step(&mut self.params, &total, lr);
        self.state.adam_t = self.adam.t;
        self.state.step += 1;
        if !self.params.all_finite() {
            return Err(ObaiError::Numerical(format!("non-finite parameters after step {}", log.step)));
        }
        Ok(log)
    }

    /// Mean composite loss over `videos` with fixed per-video streams.
    pub fn validation_loss(&self, videos: &[Video<T>]) -> Result<f64, ObaiError> {
        let tau = self.tau();
        let losses: Vec<f64> = videos
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let mut rng = ChaCha8Rng::seed_from_u64(video_seed(self.cfg.seed ^ VALID_SALT, i as u64));
                self.net
                    .infer(&self.params, v, &mut rng, &InferenceOptions::new(tau))
                    .map(|o| o.composite)
            })
            .collect::<Result<_, _>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Order of the training items in `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(video_seed(self.cfg.seed ^ EPOCH_SALT, epoch as u64)));
        idx
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            model: self.net.cfg.clone(),
            train: self.cfg.clone(),
            state: self.state.clone(),
        };
        Checkpoint::new(serde_json::to_value(meta).expect("metadata serializes"))
            .with_group("params", self.params.cast())
            .with_group("adam.m", self.adam.m.cast())
            .with_group("adam.v", self.adam.v.cast())
    }

    /// Write atomically: a sibling temporary directory renamed into place,
    /// so a crash never leaves a half-written checkpoint.
    pub fn save(&self, dir: &Path) -> Result<(), ObaiError> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| ObaiError::io(&tmp, e))?;
        }
        self.checkpoint().save(&tmp)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| ObaiError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| ObaiError::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self, ObaiError> {
        let ck = Checkpoint::load(dir)?;
        let meta: CheckpointMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| ObaiError::io(dir, format!("bad checkpoint metadata: {e}")))?;
        let net = Obai::new(&meta.model)?;
        let group = |name: &str| -> Result<ParamStore<T>, ObaiError> {
            ck.group(name)
                .map(ParamStore::cast)
                .ok_or_else(|| ObaiError::io(dir, format!("checkpoint lacks group {name}")))
        };
        let params = group("params")?;
        let reference = net.init_params::<T>(0)?;
        if params.len() != reference.len()
            || reference.iter().any(|(n, t)| params.get(n).map(Tensor::shape) != Some(t.shape()))
        {
            return Err(ObaiError::io(dir, "checkpoint parameters do not match the model configuration"));
        }
        let adam = Adam {
            t: meta.state.adam_t,
            m: group("adam.m")?,
            v: group("adam.v")?,
            ..Adam::new(&params)
        };
        Ok(Self {
            net,
            cfg: meta.train,
            params,
            adam,
            state: meta.state,
        })
    }

    /// Train for the configured number of epochs, resuming from the current
    /// state. Writes `train.csv`, `val.csv` and `checkpoint/` into `run_dir`
    /// (checkpoint after each epoch and at the end).
    pub fn run(&mut self, data: &Dataset, val: Option<&Dataset>, run_dir: &Path) -> Result<TrainSummary, ObaiError> {
        fs::create_dir_all(run_dir).map_err(|e| ObaiError::io(run_dir, e))?;
        let frames = data.manifest.config.frames;
        let mut train_videos: Vec<usize> = (0..data.len()).collect();
        let held_out: Vec<usize>;
        let val_set = match val {
            Some(v) => {
                held_out = (0..v.len().min(self.cfg.val_videos.max(1))).collect();
                v
            }
            None => {
                let k = self.cfg.val_videos.min(data.len().saturating_sub(1));
                held_out = train_videos.split_off(data.len() - k);
                data
            }
        };
        if self.cfg.max_videos > 0 {
            train_videos.truncate(self.cfg.max_videos);
        }
        let val_frames = val_set.manifest.config.frames;
        let items = make_items(&train_videos, frames, self.cfg.static_ablation);
        let val_items = make_items(&held_out, val_frames, self.cfg.static_ablation);
        let val_videos: Vec<Video<T>> = val_items.iter().map(|&it| load_item(val_set, it)).collect::<Result<_, _>>()?;
        let csv = run_dir.join("train.csv");
        let val_csv = run_dir.join("val.csv");
        let ck_dir = run_dir.join("checkpoint");
        let mut out = open_csv(&csv, CSV_HEADER)?;
        let mut vout = open_csv(&val_csv, "epoch,val_loss,lr")?;
        let batches = items.len().div_ceil(self.cfg.batch);
        let mut last = None;
        while self.state.epoch < self.cfg.epochs {
            let order = self.epoch_order(items.len(), self.state.epoch);
            while self.state.batch_in_epoch < batches {
                if self.cfg.max_steps > 0 && self.state.step >= self.cfg.max_steps {
                    self.save(&ck_dir)?;
                    return Ok(TrainSummary::new(self, &csv, &ck_dir, last));
                }
                let b = self.state.batch_in_epoch;
                let batch: Vec<Video<T>> = order[b * self.cfg.batch..((b + 1) * self.cfg.batch).min(items.len())]
                    .iter()
                    .map(|&i| load_item(data, items[i]))
                    .collect::<Result<_, _>>()?;
                let log = match self.train_step(&batch) {
                    Ok(l) => l,
                    Err(e) => {
                        log::error!("training aborted: {e}; last good checkpoint kept at {}", ck_dir.display());
                        return Err(e);
                    }
                };
                writeln!(out, "{}", log.csv_row()).map_err(|e| ObaiError::io(&csv, e))?;
                if log.step % 10 == 0 {
                    log::info!(
                        "step {} epoch {} loss {:.2} recon-mse {:.3e} lr {:.1e} τ {:.3}",
                        log.step,
                        log.epoch,
                        log.loss,
                        log.recon_mse,
                        log.lr,
                        log.tau
                    );
                }
                last = Some(log);
                self.state.batch_in_epoch += 1;
            }
            let vl = if val_videos.is_empty() { f64::NAN } else { self.validation_loss(&val_videos)? };
            if vl.is_finite() {
                self.state.plateau.observe(vl);
            }
            self.state.val_history.push(vl);
            writeln!(vout, "{},{vl:.6},{:.3e}", self.state.epoch, self.lr()).map_err(|e| ObaiError::io(&val_csv, e))?;
            log::info!("epoch {} validation loss {vl:.3} lr {:.1e}", self.state.epoch, self.lr());
            self.state.epoch += 1;
            self.state.batch_in_epoch = 0;
            self.save(&ck_dir)?;
        }
        self.save(&ck_dir)?;
        Ok(TrainSummary::new(self, &csv, &ck_dir, last))
    }
}

fn open_csv(path: &Path, header: &str) -> Result<std::fs::File, ObaiError> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| ObaiError::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| ObaiError::io(path, e))?;
    }
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub last: Option<StepLog>,
    pub val_history: Vec<f64>,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainSummary {
    fn new<T>(t: &Trainer<T>, csv: &Path, ck: &Path, last: Option<StepLog>) -> Self {
        Self {
            steps: t.state.step,
            epochs: t.state.epoch,
            last,
            val_history: t.state.val_history.clone(),
            csv: csv.to_path_buf(),
            checkpoint: ck.to_path_buf(),
        }
    }
}
