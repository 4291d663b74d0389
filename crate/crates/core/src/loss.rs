//! Training and inference objective: the β-weighted ELBO over a window of
//! frames, the Gumbel-Softmax estimator of the action likelihood, the
//! enumeration pair bracketing it, and the composite over-iterations loss.

use obai_nn::{Graph, NnError, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::ObaiError;
use crate::model::{gaussian_loglik, DecodeVars, GenerativeModel, MixtureVars, D_PARAM};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Gumbel-Softmax settings for the action-likelihood estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f64,
    pub n_samples: usize,
}

impl GumbelConfig {
    pub fn new(tau: f64) -> Result<Self, ObaiError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(ObaiError::Config(format!("Gumbel temperature must be positive, got {tau}")));
        }
        Ok(Self { tau, n_samples: 1 })
    }
}

/// Exponential temperature decay from `start` to `end` over `epochs`, then
/// constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.2,
            epochs: 50,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.end;
        }
        let frac = epoch.min(self.epochs) as f64 / self.epochs as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub entropy: f64,
    pub reconstruction: f64,
    pub action: f64,
    pub dynamics: f64,
    /// Per frame in the window: `[entropy, reconstruction, action, dynamics]`.
    pub per_frame: Vec<[f64; 4]>,
    /// Mean squared error of the mixture reconstruction over the window.
    pub recon_mse: f64,
}

/// Graph nodes of one ELBO evaluation over `W` frames.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub total: Var,
    /// `[W, 1]` per-frame term sums.
    pub entropy: Var,
    pub reconstruction: Var,
    pub action: Var,
    pub dynamics: Var,
    pub decode: DecodeVars,
    pub mixture: MixtureVars,
}

impl ElboVars {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, frames: &Tensor<T>) -> LossBreakdown {
        let col = |v: Var| g.value(v).to_f64_vec();
        let (e, r, a, d) = (col(self.entropy), col(self.reconstruction), col(self.action), col(self.dynamics));
        let per_frame: Vec<[f64; 4]> = (0..e.len()).map(|t| [e[t], r[t], a[t], d[t]]).collect();
        LossBreakdown {
            total: g.value(self.total).item().as_f64(),
            entropy: e.iter().sum(),
            reconstruction: r.iter().sum(),
            action: a.iter().sum(),
            dynamics: d.iter().sum(),
            per_frame,
            recon_mse: mixture_mse(g, self, frames),
        }
    }
}

fn mixture_mse<T: Real>(g: &Graph<T>, v: &ElboVars, frames: &Tensor<T>) -> f64 {
    let rgb = g.value(v.decode.rgb).data();
    let lm = g.value(v.mixture.log_mask).data();
    let s = frames.shape();
    let (w, p) = (s[0], s[2] * s[3]);
    let k = lm.len() / (w * p);
    let f = frames.data();
    let mut se = 0.0;
    for t in 0..w {
        for c in 0..3 {
            for i in 0..p {
                let mut m = 0.0;
                for j in 0..k {
                    m += lm[(t * k + j) * p + i].as_f64().exp() * rgb[((t * k + j) * 3 + c) * p + i].as_f64();
                }
                se += (m - f[(t * 3 + c) * p + i].as_f64()).powi(2);
            }
        }
    }
    se / (w * 3 * p) as f64
}

/// Closed-form entropy per row of diagonal Normals with `σ = softplus(v)`:
/// `Σ_j ½ log(2πe) + log σ_j`, shape `[rows]`.
pub fn entropy_rows<T: Real>(g: &mut Graph<T>, vparam: Var) -> Var {
    let d = g.shape(vparam)[1];
    let sd = g.softplus(vparam);
    let ls = g.log(sd);
    let s = g.sum_axis(ls, 1);
    let rows = g.shape(s)[0];
    let s = g.reshape(s, &[rows]);
    g.offset(s, T::from_f64(0.5 * d as f64 * (LN_2PI + 1.0)))
}

/// Relaxed one-hot samples `softmax((logits + G)/τ)` along `axis`, with
/// Gumbel noise `G = −log(−log U)`.
pub fn gumbel_softmax<T: Real, R: Rng + ?Sized>(g: &mut Graph<T>, logits: Var, axis: usize, tau: f64, rng: &mut R) -> Var {
    let shape = g.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<T> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect();
    let noise = g.constant(Tensor::new(&shape, noise).expect("noise shape"));
    let z = g.add(logits, noise);
    let z = g.scale(z, T::from_f64(1.0 / tau));
    g.softmax(z, axis)
}

/// `log N(a*; Σ_i m*_i ψ_i, σ_ψ² I)` per row. `a_star` is `[W·K, 2]`,
/// `assign` is `[W, K, 1, H, W]`, `fields` is `[W, 1, 2, H, W]`.
pub fn action_loglik_rows<T: Real>(g: &mut Graph<T>, a_star: Var, assign: Var, fields: Var, sigma_psi: f64) -> Var {
    let s = g.shape(assign).to_vec();
    let (w, k, p) = (s[0], s[1], s[3] * s[4]);
    let weighted = g.mul(assign, fields);
    let weighted = g.reshape(weighted, &[w * k, 2, p]);
    let expected = g.sum_axis(weighted, 2);
    let expected = g.reshape(expected, &[w * k, 2]);
    let ll = gaussian_loglik(g, a_star, expected, sigma_psi, 1);
    g.reshape(ll, &[w * k])
}

/// Monte-Carlo estimate of `Σ_k E_q(a_k) E_p(m)[log N(a_k; Σ_i [m_i=k] ψ_i, σ_ψ²)]`
/// for a single frame: `act_mean`/`act_vparam` are `[K, 2]`, `logits` is
/// `[K, 1, H, W]`, `field` is `[1, 2, H, W]`. Averages over
/// `gumbel.n_samples` joint draws of assignments and actions.
pub fn sampled_action_loglik<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    act_mean: Var,
    act_vparam: Var,
    logits: Var,
    field: Var,
    sigma_psi: f64,
    gumbel: &GumbelConfig,
    rng: &mut R,
) -> Result<Var, ObaiError> {
    if !(gumbel.tau > 0.0) {
        return Err(ObaiError::Config(format!("Gumbel temperature must be positive, got {}", gumbel.tau)));
    }
    let n = gumbel.n_samples.max(1);
    let ls = g.shape(logits).to_vec();
    let logits5 = g.reshape(logits, &[1, ls[0], 1, ls[2], ls[3]]);
    let fs = g.shape(field).to_vec();
    let field5 = g.reshape(field, &[1, 1, 2, fs[2], fs[3]]);
    let mut acc: Option<Var> = None;
    for _ in 0..n {
        let m_star = gumbel_softmax(g, logits5, 1, gumbel.tau, rng);
        let a_star = obai_nn::reparameterized_normal_sample(g, act_mean, act_vparam, rng);
        let rows = action_loglik_rows(g, a_star, m_star, field5, sigma_psi);
        let s = g.sum(rows);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s),
        });
    }
    Ok(g.scale(acc.expect("at least one sample"), T::from_f64(1.0 / n as f64)))
}

/// β-ELBO over a window of frames. `frames` is `[W,3,H,W]`, `fields` is
/// `[W,2,H,W]`, `state` is `[W·K, 4L]` (means then variance parameters of
/// s†), `action` is `[W·K, 4]`. One reparameterized sample per belief is
/// shared by every term. Random draws, in order: state noise, action noise,
/// Gumbel noise.
#[allow(clippy::too_many_arguments)]
pub fn elbo<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    model: &GenerativeModel,
    frames: &Tensor<T>,
    fields: &Tensor<T>,
    state: Var,
    action: Var,
    tau: f64,
    rng: &mut R,
) -> Result<ElboVars, NnError> {
    let cfg: &ModelConfig = &model.cfg;
    let (k, l, h, w) = (cfg.slots, cfg.latent, cfg.height, cfg.width);
    let nw = frames.shape()[0];
    let rows = nw * k;
    let sd_dim = 2 * l;
    assert_eq!(g.shape(state), &[rows, 2 * sd_dim], "state beliefs do not match the window");
    assert_eq!(g.shape(action), &[rows, 4], "action beliefs do not match the window");

    let s_mean = g.slice(state, 1, 0, sd_dim);
    let s_vp = g.slice(state, 1, sd_dim, sd_dim);
    let a_mean = g.slice(action, 1, 0, 2);
    let a_vp = g.slice(action, 1, 2, 2);
    let s_dag = obai_nn::reparameterized_normal_sample(g, s_mean, s_vp, rng);
    let a_star = obai_nn::reparameterized_normal_sample(g, a_mean, a_vp, rng);

    // Entropy of q(s†) and q(a), per frame.
    let hs = entropy_rows(g, s_vp);
    let ha = entropy_rows(g, a_vp);
    let h_rows = g.add(hs, ha);
    let h_rows = g.reshape(h_rows, &[nw, k]);
    let entropy = g.sum_axis(h_rows, 1);

    // Reconstruction.
    let s = g.slice(s_dag, 1, 0, l);
    let dec = model.decode(g, store, s)?;
    let fr = g.constant(frames.clone());
    let mix = model.mixture(g, fr, dec);
    let pix = g.reshape(mix.pixel, &[nw, h * w]);
    let reconstruction = g.sum_axis(pix, 1);

    // Action likelihood.
    let action_term = if cfg.dynamics {
        let logits5 = g.reshape(dec.logits, &[nw, k, 1, h, w]);
        let m_star = gumbel_softmax(g, logits5, 1, tau, rng);
        let psi = g.constant(fields.clone().reshape(&[nw, 1, 2, h, w])?);
        let rows_ll = action_loglik_rows(g, a_star, m_star, psi, cfg.sigma_psi);
        let rows_ll = g.reshape(rows_ll, &[nw, k]);
        g.sum_axis(rows_ll, 1)
    } else {
        g.constant(Tensor::zeros(&[nw, 1]))
    };

    // Dynamics: standard-Normal prior at t = 0 (every frame when the
    // dynamics are ablated), transition density afterwards.
    let prior_rows = |g: &mut Graph<T>, x: Var| {
        let n = g.shape(x)[0];
        let z = g.constant(Tensor::zeros(&[1, sd_dim]));
        let ll = gaussian_loglik(g, x, z, 1.0, 1);
        g.reshape(ll, &[n])
    };
    let dyn_rows = if cfg.dynamics && nw > 1 {
        let first = g.slice(s_dag, 0, 0, k);
        let p0 = prior_rows(g, first);
        let n = (nw - 1) * k;
        let prev = g.slice(s_dag, 0, 0, n);
        let cur = g.slice(s_dag, 0, k, n);
        let a_prev = g.slice(a_star, 0, 0, n);
        let d_t = g.param(store, D_PARAM)?;
        let prev_s = g.slice(prev, 1, 0, l);
        let prev_v = g.slice(prev, 1, l, l);
        let cur_s = g.slice(cur, 1, 0, l);
        let cur_v = g.slice(cur, 1, l, l);
        let push = g.matmul(a_prev, d_t);
        let pred_v = g.add(prev_v, push);
        let pred_s = g.add(prev_s, cur_v);
        let lv = gaussian_loglik(g, cur_v, pred_v, cfg.sigma_s, 1);
        let ls = gaussian_loglik(g, cur_s, pred_s, cfg.sigma_s, 1);
        let lt = g.add(lv, ls);
        let lt = g.reshape(lt, &[n]);
        g.concat(&[p0, lt], 0)
    } else {
        prior_rows(g, s_dag)
    };
    let dyn_rows = g.reshape(dyn_rows, &[nw, k]);
    let dynamics = g.sum_axis(dyn_rows, 1);

    let rb = g.scale(reconstruction, T::from_f64(cfg.beta));
    let t1 = g.add(entropy, rb);
    let t2 = g.add(t1, action_term);
    let t3 = g.add(t2, dynamics);
    let s = g.sum(t3);
    let total = g.neg(s);
    Ok(ElboVars {
        total,
        entropy,
        reconstruction,
        action: action_term,
        dynamics,
        decode: dec,
        mixture: mix,
    })
}

/// `Σ_n (n/N) L⁽ⁿ⁾` for losses after iterations `1..=N`.
pub fn composite_loss(losses: &[f64]) -> f64 {
    let n = losses.len() as f64;
    losses.iter().enumerate().map(|(i, l)| (i + 1) as f64 / n * l).sum()
}

pub fn composite_graph<T: Real>(g: &mut Graph<T>, losses: &[Var]) -> Var {
    let n = losses.len() as f64;
    let mut acc: Option<Var> = None;
    for (i, &l) in losses.iter().enumerate() {
        let w = g.scale(l, T::from_f64((i + 1) as f64 / n));
        acc = Some(match acc {
            None => w,
            Some(a) => g.add(a, w),
        });
    }
    acc.expect("composite loss needs at least one iteration")
}

/// Largest instance [`jensen_pair`] will enumerate.
pub const MAX_ENUM_PIXELS: usize = 12;
pub const MAX_ENUM_SLOTS: usize = 3;

fn log_normal2(a: [f64; 2], mean: [f64; 2], sigma: f64) -> f64 {
    let z0 = (a[0] - mean[0]) / sigma;
    let z1 = (a[1] - mean[1]) / sigma;
    -0.5 * (z0 * z0 + z1 * z1) - 2.0 * sigma.ln() - LN_2PI
}

fn check_enumerable(probs: &[Vec<f64>]) -> Result<usize, ObaiError> {
    let p = probs.len();
    let k = probs.first().map_or(0, |r| r.len());
    if p == 0 || k == 0 || p > MAX_ENUM_PIXELS || k > MAX_ENUM_SLOTS {
        return Err(ObaiError::Config(format!(
            "enumeration needs 1..={MAX_ENUM_PIXELS} pixels and 1..={MAX_ENUM_SLOTS} slots, got {p}×{k}"
        )));
    }
    Ok(k)
}

/// Visit every assignment `m ∈ {0..K}^P` with its probability.
fn for_each_assignment(probs: &[Vec<f64>], k: usize, mut f: impl FnMut(&[usize], f64)) {
    let p = probs.len();
    let mut m = vec![0usize; p];
    loop {
        let pr: f64 = m.iter().enumerate().map(|(i, &j)| probs[i][j]).product();
        f(&m, pr);
        let mut i = 0;
        loop {
            if i == p {
                return;
            }
            m[i] += 1;
            if m[i] < k {
                break;
            }
            m[i] = 0;
            i += 1;
        }
    }
}

fn assigned_sum(m: &[usize], slot: usize, field: &[[f64; 2]]) -> [f64; 2] {
    let mut s = [0.0; 2];
    for (i, &j) in m.iter().enumerate() {
        if j == slot {
            s[0] += field[i][0];
            s[1] += field[i][1];
        }
    }
    s
}

/// Both sides of the Jensen inequality for the action likelihood, summed
/// over slots: `lhs = Σ_k E_m[log p(a_k|Ψ,m)]`, `rhs = Σ_k log E_m[p(a_k|Ψ,m)]`,
/// by exhaustive enumeration. `probs[i][k]` is the assignment probability
/// of pixel `i` to slot `k`; `actions[k]` is a fixed action per slot.
pub fn jensen_pair(
    actions: &[[f64; 2]],
    probs: &[Vec<f64>],
    field: &[[f64; 2]],
    sigma_psi: f64,
) -> Result<(f64, f64), ObaiError> {
    let k = check_enumerable(probs)?;
    let mut lhs = vec![0.0; k];
    let mut terms: Vec<Vec<f64>> = vec![Vec::new(); k];
    for_each_assignment(probs, k, |m, pr| {
        if pr == 0.0 {
            return;
        }
        for slot in 0..k {
            let ll = log_normal2(actions[slot], assigned_sum(m, slot, field), sigma_psi);
            lhs[slot] += pr * ll;
            terms[slot].push(pr.ln() + ll);
        }
    });
    let rhs: f64 = terms
        .iter()
        .map(|t| {
            let mx = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            mx + t.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
        })
        .sum();
    Ok((lhs.iter().sum(), rhs))
}

/// Exact `Σ_k E_q(a_k) E_m[log N(a_k; Σ_i [m_i=k] ψ_i, σ_ψ²)]` for diagonal
/// Normal action beliefs, by enumeration over assignments.
pub fn enumerated_action_loglik(
    act_mean: &[[f64; 2]],
    act_var: &[[f64; 2]],
    probs: &[Vec<f64>],
    field: &[[f64; 2]],
    sigma_psi: f64,
) -> Result<f64, ObaiError> {
    let k = check_enumerable(probs)?;
    let mut total = 0.0;
    for_each_assignment(probs, k, |m, pr| {
        if pr == 0.0 {
            return;
        }
        for slot in 0..k {
            let ll = log_normal2(act_mean[slot], assigned_sum(m, slot, field), sigma_psi)
                - 0.5 * (act_var[slot][0] + act_var[slot][1]) / (sigma_psi * sigma_psi);
            total += pr * ll;
        }
    });
    Ok(total)
}
