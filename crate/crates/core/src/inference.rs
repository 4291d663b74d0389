//! Iterative amortized inference: refinement networks for state and action
//! beliefs, the input assembly that feeds them, and the `F×4` schedule that
//! grows the inference window one frame at a time with predictive
//! initialization.

use obai_nn::{softplus, Conv2d, Graph, Init, Linear, LstmCell, LstmState, ParamStore, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::ObaiError;
use crate::loss::{composite_graph, elbo, ElboVars, LossBreakdown};
use crate::model::{dynamics_predict_graph, DecodeValues, DiagNormal, GenerativeModel, D_PARAM};
use crate::video::Video;

pub const STATE_IMAGE_CHANNELS: usize = 16;
pub const ACTION_INPUTS: usize = 10;
pub const LAMBDA0_STATE: &str = "lambda0.state";
pub const LAMBDA0_ACTION: &str = "lambda0.action";
const NORM_EPS: f64 = 1e-5;

/// Shared refinement networks (one copy per slot and frame, same weights).
#[derive(Clone, Debug)]
pub struct Refiner {
    convs: Vec<Conv2d>,
    fc: Linear,
    lstm: LstmCell,
    out: Linear,
    act_lstm: LstmCell,
    act_out: Linear,
    pool: usize,
}

impl Refiner {
    pub fn new(cfg: &ModelConfig) -> Self {
        let k = cfg.kernel;
        let mut convs = Vec::with_capacity(3);
        let mut c_in = STATE_IMAGE_CHANNELS;
        for i in 0..3 {
            convs.push(Conv2d::new(format!("ref.conv{i}"), c_in, cfg.ref_channels, k, 2, k / 2));
            c_in = cfg.ref_channels;
        }
        let sd = cfg.state_dim();
        Self {
            convs,
            fc: Linear::new("ref.fc", cfg.ref_flatten(), cfg.ref_hidden),
            lstm: LstmCell::new("ref.lstm", cfg.ref_hidden + 4 * sd, cfg.ref_lstm),
            out: Linear::new("ref.out", cfg.ref_lstm, 2 * sd),
            act_lstm: LstmCell::new("act.lstm", ACTION_INPUTS, cfg.act_lstm),
            act_out: Linear::new("act.out", cfg.act_lstm, 4),
            pool: cfg.ref_pool(),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), ObaiError> {
        for c in &self.convs {
            c.register(store, init)?;
        }
        self.fc.register(store, init)?;
        self.lstm.register(store, init)?;
        // Zero-initialized output layers: the untrained networks leave the
        // beliefs untouched.
        self.out.register_zeroed(store)?;
        self.act_lstm.register(store, init)?;
        self.act_out.register_zeroed(store)?;
        Ok(())
    }

    /// `(Δλ_state, new LSTM state)` for a batch of rows.
    pub fn refine_state<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        lambda: Var,
        grad: Var,
        st: LstmState,
    ) -> Result<(Var, LstmState), ObaiError> {
        let s = g.shape(image).to_vec();
        assert_eq!(s[1], STATE_IMAGE_CHANNELS, "state refinement expects 16 image channels");
        let mut x = if s[2] == self.pool && s[3] == self.pool {
            image
        } else {
            g.adaptive_avg_pool(image, self.pool, self.pool)
        };
        for c in &self.convs {
            let y = c.forward(g, store, x)?;
            x = g.elu(y);
        }
        let flat = g.shape(x)[1..].iter().product();
        let x = g.reshape(x, &[s[0], flat]);
        let h = self.fc.forward(g, store, x)?;
        let h = g.elu(h);
        let joined = g.concat(&[h, lambda, grad], 1);
        let st = self.lstm.forward(g, store, joined, st)?;
        let delta = self.out.forward(g, store, st.h)?;
        Ok((delta, st))
    }

    /// `(Δλ_action, new LSTM state)` from `[λ_a, ∇λ_a, expected action]`.
    pub fn refine_action<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        lambda: Var,
        grad: Var,
        expected: Var,
        st: LstmState,
    ) -> Result<(Var, LstmState), ObaiError> {
        let x = g.concat(&[lambda, grad, expected], 1);
        assert_eq!(g.shape(x)[1], ACTION_INPUTS, "action refinement expects 10 inputs");
        let st = self.act_lstm.forward(g, store, x, st)?;
        let delta = self.act_out.forward(g, store, st.h)?;
        Ok((delta, st))
    }

    fn zero_states<T: Real>(&self, g: &mut Graph<T>, rows: usize) -> (LstmState, LstmState) {
        (self.lstm.zero_state(g, rows), self.act_lstm.zero_state(g, rows))
    }
}

/// Detached inputs of one refinement step. Recording them lets a
/// finite-difference check replay the exact function the analytic gradient
/// differentiates (the inputs are stop-gradient by construction).
#[derive(Clone, Debug)]
pub struct RefinementInputs<T> {
    /// `[B, 16, H, W]`.
    pub image: Tensor<T>,
    /// Normalized `∇λ L` for the state beliefs, `[B, 4L]`.
    pub state_grad: Tensor<T>,
    /// Normalized `∇λ_a L`, `[B, 4]`.
    pub action_grad: Tensor<T>,
    /// `Σ_i m̂_ik ψ_i`, `[B, 2]`.
    pub expected_action: Tensor<T>,
}

/// Zero-mean, unit-variance rescaling of a detached input group.
pub fn normalize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let s = 1.0 / (v + NORM_EPS).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - m) * s);
}

fn rows_normalized<T: Real>(t: &Tensor<T>, rows: usize) -> Tensor<T> {
    let mut d = t.to_f64_vec();
    let n = d.len() / rows;
    for r in d.chunks_mut(n) {
        normalize(r);
    }
    let out: Vec<T> = d.into_iter().map(T::from_f64).collect();
    Tensor::new(t.shape(), out).expect("same shape")
}

/// Build the refinement inputs from the values of one ELBO evaluation and
/// its detached gradients `[∇state, ∇action, ∇rgb, ∇logits]`.
///
/// Image channels per slot: frame RGB (3), slot RGB means (3), `m̂` (1),
/// mask logits (1), mask posterior given the pixel (1), mixture pixel
/// log-likelihood (1), `∇μ L` (3), `∇logits L` (1), coordinates (2).
pub fn assemble_inputs<T: Real>(
    cfg: &ModelConfig,
    g: &Graph<T>,
    ev: &ElboVars,
    frames: &Tensor<T>,
    fields: &Tensor<T>,
    grads: &[Tensor<T>],
) -> RefinementInputs<T> {
    let (k, h, w) = (cfg.slots, cfg.height, cfg.width);
    let p = h * w;
    let nw = frames.shape()[0];
    let rows = nw * k;
    let fr = frames.to_f64_vec();
    let rgb = g.value(ev.decode.rgb).to_f64_vec();
    let logits = g.value(ev.decode.logits).to_f64_vec();
    let log_mask = g.value(ev.mixture.log_mask).to_f64_vec();
    let comp = g.value(ev.mixture.component).to_f64_vec();
    let mut pixel = g.value(ev.mixture.pixel).to_f64_vec();
    for f in pixel.chunks_mut(p) {
        normalize(f);
    }
    let mut g_rgb = grads[2].to_f64_vec();
    for r in g_rgb.chunks_mut(3 * p) {
        normalize(r);
    }
    let mut g_log = grads[3].to_f64_vec();
    for r in g_log.chunks_mut(p) {
        normalize(r);
    }
    let coords = GenerativeModel::coordinates::<f64>(h, w).into_data();
    let psi = fields.to_f64_vec();

    let mut image = vec![0.0; rows * STATE_IMAGE_CHANNELS * p];
    let mut expected = vec![0.0; rows * 2];
    for t in 0..nw {
        for i in 0..p {
            let mx = (0..k).map(|j| log_mask[(t * k + j) * p + i] + comp[(t * k + j) * p + i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|j| (log_mask[(t * k + j) * p + i] + comp[(t * k + j) * p + i] - mx).exp()).sum();
            for j in 0..k {
                let r = t * k + j;
                let base = r * STATE_IMAGE_CHANNELS * p;
                let mut set = |c: usize, v: f64| image[base + c * p + i] = v;
                for c in 0..3 {
                    set(c, fr[(t * 3 + c) * p + i]);
                    set(3 + c, rgb[(r * 3 + c) * p + i]);
                    set(10 + c, g_rgb[(r * 3 + c) * p + i]);
                }
                let m = log_mask[r * p + i].exp();
                set(6, m);
                set(7, logits[r * p + i]);
                set(8, (log_mask[r * p + i] + comp[r * p + i] - mx).exp() / z);
                set(9, pixel[t * p + i]);
                set(13, g_log[r * p + i]);
                set(14, coords[i]);
                set(15, coords[p + i]);
                expected[r * 2] += m * psi[(t * 2) * p + i];
                expected[r * 2 + 1] += m * psi[(t * 2 + 1) * p + i];
            }
        }
    }
    let conv = |v: Vec<f64>, shape: &[usize]| Tensor::new(shape, v.into_iter().map(T::from_f64).collect()).expect("input shape");
    RefinementInputs {
        image: conv(image, &[rows, STATE_IMAGE_CHANNELS, h, w]),
        state_grad: rows_normalized(&grads[0], rows),
        action_grad: rows_normalized(&grads[1], rows),
        expected_action: conv(expected, &[rows, 2]),
    }
}

/// Final variational parameters for every frame and slot (frame-major rows).
#[derive(Clone, Debug, PartialEq)]
pub struct Beliefs<T> {
    pub frames: usize,
    pub slots: usize,
    /// `[F·K, 4L]`: s† means then variance parameters (`σ = softplus(v)`).
    pub state: Tensor<T>,
    /// `[F·K, 4]`: action means then variance parameters.
    pub action: Tensor<T>,
}

impl<T: Real> Beliefs<T> {
    pub fn state_dim(&self) -> usize {
        self.state.shape()[1] / 2
    }

    fn row(t: &Tensor<T>, r: usize) -> Vec<f64> {
        let n = t.shape()[1];
        t.data()[r * n..(r + 1) * n].iter().map(|v| v.as_f64()).collect()
    }

    /// `q(s†)` for slot `k` of frame `t`.
    pub fn state_normal(&self, t: usize, k: usize) -> DiagNormal {
        let row = Self::row(&self.state, t * self.slots + k);
        let d = row.len() / 2;
        DiagNormal {
            mean: row[..d].to_vec(),
            var: row[d..].iter().map(|&v| softplus(v).powi(2)).collect(),
        }
    }

    pub fn action_normal(&self, t: usize, k: usize) -> DiagNormal {
        let row = Self::row(&self.action, t * self.slots + k);
        DiagNormal {
            mean: row[..2].to_vec(),
            var: row[2..].iter().map(|&v| softplus(v).powi(2)).collect(),
        }
    }

    /// Means of the s-block for frame `t`, `[K, L]`.
    pub fn s_means(&self, t: usize) -> Tensor<T> {
        let l = self.state_dim() / 2;
        let mut d = Vec::with_capacity(self.slots * l);
        for k in 0..self.slots {
            let r = (t * self.slots + k) * self.state.shape()[1];
            d.extend_from_slice(&self.state.data()[r..r + l]);
        }
        Tensor::new(&[self.slots, l], d).expect("mean shape")
    }

    pub fn all_finite(&self) -> bool {
        self.state.all_finite() && self.action.all_finite()
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOptions<T> {
    /// Gumbel-Softmax temperature for the action-likelihood estimator.
    pub tau: f64,
    /// Keep the detached refinement inputs of every iteration.
    pub record_inputs: bool,
    /// Use these inputs instead of computing them (finite-difference checks).
    pub replay: Option<Vec<RefinementInputs<T>>>,
    /// Keep the beliefs after every iteration.
    pub record_trajectory: bool,
}

impl<T> InferenceOptions<T> {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            record_inputs: false,
            replay: None,
            record_trajectory: false,
        }
    }
}

/// Everything one inference pass leaves in its graph.
pub struct GraphRun<T> {
    /// `L⁽ⁿ⁾` for `n = 1..=N`.
    pub losses: Vec<Var>,
    pub composite: Var,
    pub breakdowns: Vec<LossBreakdown>,
    pub state: Var,
    pub action: Var,
    pub inputs: Vec<RefinementInputs<T>>,
    /// Beliefs after each iteration `1..=N` when requested.
    pub trajectory: Vec<Beliefs<T>>,
}

/// Result of inference with the graph discarded.
#[derive(Clone, Debug)]
pub struct InferenceOutput<T> {
    pub beliefs: Beliefs<T>,
    pub breakdowns: Vec<LossBreakdown>,
    pub composite: f64,
    pub trajectory: Vec<Beliefs<T>>,
    pub inputs: Vec<RefinementInputs<T>>,
}

impl<T> InferenceOutput<T> {
    pub fn final_loss(&self) -> &LossBreakdown {
        self.breakdowns.last().expect("at least one iteration")
    }
}

/// The full network: generative model plus refinement networks.
#[derive(Clone, Debug)]
pub struct Obai {
    pub cfg: ModelConfig,
    pub model: GenerativeModel,
    pub refiner: Refiner,
}

impl Obai {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ObaiError> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            model: GenerativeModel::new(cfg),
            refiner: Refiner::new(cfg),
        })
    }

    /// Deterministic initial parameters, including the learned initial
    /// beliefs λ₀ (means 0, σ = 1).
    pub fn init_params<T: Real>(&self, seed: u64) -> Result<ParamStore<T>, ObaiError> {
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        self.model.register(&mut store, &init)?;
        self.refiner.register(&mut store, &init)?;
        let sd = self.cfg.state_dim();
        let v1 = obai_nn::softplus_inv(1.0);
        let mut s0 = vec![T::zero(); 2 * sd];
        s0[sd..].iter_mut().for_each(|v| *v = T::from_f64(v1));
        store.insert(LAMBDA0_STATE, Tensor::new(&[1, 2 * sd], s0)?)?;
        store.insert(
            LAMBDA0_ACTION,
            Tensor::new(&[1, 4], vec![T::zero(), T::zero(), T::from_f64(v1), T::from_f64(v1)])?,
        )?;
        Ok(store)
    }

    pub fn iterations(&self, frames: usize) -> usize {
        frames * self.cfg.iters_per_frame
    }

    fn check_video<T: Real>(&self, video: &Video<T>) -> Result<(), ObaiError> {
        let s = video.frames.shape();
        if s.len() != 4 || s[0] == 0 || s[1] != 3 || s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(ObaiError::Config(format!(
                "video of shape {s:?} does not match a {}×{} model",
                self.cfg.height, self.cfg.width
            )));
        }
        Ok(())
    }

    /// Run the whole inference schedule inside `g`, leaving the composite
    /// loss differentiable with respect to every parameter.
    pub fn run_graph<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        video: &Video<T>,
        rng: &mut R,
        opts: &InferenceOptions<T>,
    ) -> Result<GraphRun<T>, ObaiError> {
        self.check_video(video)?;
        let cfg = &self.cfg;
        let k = cfg.slots;
        let f = video.len();
        let n_iter = self.iterations(f);
        if let Some(r) = &opts.replay {
            if r.len() != n_iter {
                return Err(ObaiError::Config(format!("replay holds {} steps, schedule needs {n_iter}", r.len())));
            }
        }
        let l0s = g.param(store, LAMBDA0_STATE)?;
        let l0a = g.param(store, LAMBDA0_ACTION)?;
        let init_rows = |g: &mut Graph<T>, v: Var| {
            let c = g.shape(v)[1];
            g.broadcast_to(v, &[k, c])
        };
        let mut state = init_rows(g, l0s);
        let mut action = init_rows(g, l0a);
        let (mut st_lstm, mut act_lstm) = self.refiner.zero_states(g, k);
        let mut window = 1;
        let mut losses = Vec::with_capacity(n_iter);
        let mut breakdowns = Vec::with_capacity(n_iter);
        let mut inputs = Vec::new();
        let mut trajectory = Vec::new();
        let sd = cfg.state_dim();

        for n in 0..=n_iter {
            if n > 0 && n < n_iter && n % cfg.iters_per_frame == 0 {
                let (ns, na) = self.append_frame(g, store, state, action, window, l0a)?;
                state = ns;
                action = na;
                let (zs, za) = self.refiner.zero_states(g, k);
                st_lstm = LstmState {
                    h: g.concat(&[st_lstm.h, zs.h], 0),
                    c: g.concat(&[st_lstm.c, zs.c], 0),
                };
                act_lstm = LstmState {
                    h: g.concat(&[act_lstm.h, za.h], 0),
                    c: g.concat(&[act_lstm.c, za.c], 0),
                };
                window += 1;
            }
            let frames = video.frames.slice_axis(0, 0, window);
            let fields = video.fields.slice_axis(0, 0, window);
            let ev = elbo(g, store, &self.model, &frames, &fields, state, action, opts.tau, rng)?;
            if n > 0 {
                let b = ev.breakdown(g, &frames);
                if !b.total.is_finite() {
                    return Err(ObaiError::Numerical(format!("non-finite loss after {n} iterations")));
                }
                losses.push(ev.total);
                breakdowns.push(b);
                if opts.record_trajectory {
                    trajectory.push(Beliefs {
                        frames: window,
                        slots: k,
                        state: g.value(state).clone(),
                        action: g.value(action).clone(),
                    });
                }
            }
            if n == n_iter {
                break;
            }
            let inp = match &opts.replay {
                Some(r) => r[n].clone(),
                None => {
                    let grads = g.grad_of(ev.total, &[state, action, ev.decode.rgb, ev.decode.logits])?;
                    assemble_inputs(cfg, g, &ev, &frames, &fields, &grads)
                }
            };
            let image = g.constant(inp.image.clone());
            let sgrad = g.constant(inp.state_grad.clone());
            let (ds, ns) = self.refiner.refine_state(g, store, image, state, sgrad, st_lstm)?;
            let agrad = g.constant(inp.action_grad.clone());
            let expected = g.constant(inp.expected_action.clone());
            let (da, na) = self.refiner.refine_action(g, store, action, agrad, expected, act_lstm)?;
            debug_assert_eq!(g.shape(ds)[1], 2 * sd);
            state = g.add(state, ds);
            action = g.add(action, da);
            st_lstm = ns;
            act_lstm = na;
            if opts.record_inputs {
                inputs.push(inp);
            }
        }
        let composite = composite_graph(g, &losses);
        Ok(GraphRun {
            losses,
            composite,
            breakdowns,
            state,
            action,
            inputs,
            trajectory,
        })
    }

    /// Extend the window by one frame. New state beliefs extrapolate the
    /// last frame's beliefs through the dynamics under its action beliefs;
    /// new action beliefs start at λ₀.
    fn append_frame<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        state: Var,
        action: Var,
        window: usize,
        l0a: Var,
    ) -> Result<(Var, Var), ObaiError> {
        let (k, sd) = (self.cfg.slots, self.cfg.state_dim());
        let last = g.slice(state, 0, (window - 1) * k, k);
        let new_state = if self.cfg.dynamics {
            let last_a = g.slice(action, 0, (window - 1) * k, k);
            let m = g.slice(last, 1, 0, sd);
            let vp = g.slice(last, 1, sd, sd);
            let s = g.softplus(vp);
            let am = g.slice(last_a, 1, 0, 2);
            let avp = g.slice(last_a, 1, 2, 2);
            let asd = g.softplus(avp);
            let d_t = g.param(store, D_PARAM)?;
            let (pm, psd) = dynamics_predict_graph(g, m, s, am, asd, d_t, self.cfg.sigma_s);
            let pvp = g.softplus_inv(psd);
            g.concat(&[pm, pvp], 1)
        } else {
            let l0s = g.param(store, LAMBDA0_STATE)?;
            g.broadcast_to(l0s, &[k, 2 * sd])
        };
        let new_action = g.broadcast_to(l0a, &[k, 4]);
        Ok((g.concat(&[state, new_state], 0), g.concat(&[action, new_action], 0)))
    }

    /// Inference without keeping the graph.
    pub fn infer<T: Real, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        video: &Video<T>,
        rng: &mut R,
        opts: &InferenceOptions<T>,
    ) -> Result<InferenceOutput<T>, ObaiError> {
        let mut g = Graph::new();
        let run = self.run_graph(&mut g, store, video, rng, opts)?;
        let beliefs = Beliefs {
            frames: video.len(),
            slots: self.cfg.slots,
            state: g.value(run.state).clone(),
            action: g.value(run.action).clone(),
        };
        if !beliefs.all_finite() {
            return Err(ObaiError::Numerical("non-finite beliefs".into()));
        }
        Ok(InferenceOutput {
            beliefs,
            composite: g.value(run.composite).item().as_f64(),
            breakdowns: run.breakdowns,
            trajectory: run.trajectory,
            inputs: run.inputs,
        })
    }

    /// Deterministic decode of the posterior means of every frame.
    pub fn decode_beliefs<T: Real>(&self, store: &ParamStore<T>, beliefs: &Beliefs<T>) -> Result<DecodeValues, ObaiError> {
        let l = self.cfg.latent;
        let s = beliefs.state.slice_axis(1, 0, l);
        Ok(crate::model::decode_values(&self.model, store, s, beliefs.frames)?)
    }
}
