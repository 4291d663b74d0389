//! The object-structured generative model: a spatial broadcast decoder shared
//! across slots, the Normal mixture pixel likelihood, and the linear
//! generalized-coordinate dynamics.

use obai_nn::{ConvTranspose2d, Graph, Init, NnError, ParamStore, Real, Tensor, Var};

use crate::config::ModelConfig;

pub const D_PARAM: &str = "dynamics.D";
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Decoder plus the learned action-to-latent matrix D.
#[derive(Clone, Debug)]
pub struct GenerativeModel {
    pub cfg: ModelConfig,
    hidden: Vec<ConvTranspose2d>,
    out: ConvTranspose2d,
}

/// Graph nodes of one batched decode: `rgb` is `[B,3,H,W]`, `logits` is
/// `[B,1,H,W]`, rows ordered frame-major (`t·K + k`).
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    pub rgb: Var,
    pub logits: Var,
}

/// Mixture likelihood nodes for `W` frames of `K` slots.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    /// `log m̂`, `[W,K,1,H,W]`.
    pub log_mask: Var,
    /// Per-slot `Σ_c log N(o_c; μ_kc, σ_o²)`, `[W,K,1,H,W]`.
    pub component: Var,
    /// `log Σ_k m̂_k N_k`, `[W,1,1,H,W]`.
    pub pixel: Var,
}

impl GenerativeModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        let k = cfg.kernel;
        let mut hidden = Vec::with_capacity(cfg.dec_layers);
        let mut c_in = cfg.latent + 2;
        for i in 0..cfg.dec_layers {
            hidden.push(ConvTranspose2d::same(format!("dec.{i}"), c_in, cfg.dec_channels, k));
            c_in = cfg.dec_channels;
        }
        Self {
            cfg: cfg.clone(),
            hidden,
            out: ConvTranspose2d::same("dec.out", c_in, 4, k),
        }
    }

    pub fn register<T: Real>(&self, store: &mut ParamStore<T>, init: &Init) -> Result<(), NnError> {
        for l in &self.hidden {
            l.register(store, init)?;
        }
        self.out.register(store, init)?;
        // D is stored transposed, [2, latent], so a row of actions maps by a
        // plain matrix product.
        store.insert(D_PARAM, init.truncated_normal(D_PARAM, &[2, self.cfg.latent], 0.1))?;
        Ok(())
    }

    /// `(x, y)` coordinate planes in `[-1, 1]`, `[2, H, W]`.
    pub fn coordinates<T: Real>(height: usize, width: usize) -> Tensor<T> {
        let lin = |n: usize, i: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
        let p = height * width;
        let mut d = vec![T::zero(); 2 * p];
        for y in 0..height {
            for x in 0..width {
                d[y * width + x] = T::from_f64(lin(width, x));
                d[p + y * width + x] = T::from_f64(lin(height, y));
            }
        }
        Tensor::new(&[2, height, width], d).expect("coordinate shape")
    }

    /// Decode a batch of latent states `s` (`[B, latent]`; derivatives never
    /// enter the decoder). Identical weights are applied to every row.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, s: Var) -> Result<DecodeVars, NnError> {
        let (h, w, l) = (self.cfg.height, self.cfg.width, self.cfg.latent);
        let shape = g.shape(s).to_vec();
        if shape.len() != 2 || shape[1] != l {
            return Err(NnError::Shape {
                layer: "decoder input".into(),
                expected: format!("[batch, {l}]"),
                got: shape,
            });
        }
        let b = shape[0];
        let s4 = g.reshape(s, &[b, l, 1, 1]);
        let grid = g.broadcast_to(s4, &[b, l, h, w]);
        let coords = Self::coordinates::<T>(h, w).reshape(&[1, 2, h, w])?;
        let coords = g.constant(coords);
        let coords = g.broadcast_to(coords, &[b, 2, h, w]);
        let mut x = g.concat(&[grid, coords], 1);
        for layer in &self.hidden {
            let y = layer.forward(g, store, x)?;
            x = g.elu(y);
        }
        let y = self.out.forward(g, store, x)?;
        Ok(DecodeVars {
            rgb: g.slice(y, 1, 0, 3),
            logits: g.slice(y, 1, 3, 1),
        })
    }

    /// Mixture likelihood of `frames` (`[W,3,H,W]` node) under a decode of
    /// `W·K` rows.
    pub fn mixture<T: Real>(&self, g: &mut Graph<T>, frames: Var, dec: DecodeVars) -> MixtureVars {
        let (h, w, k) = (self.cfg.height, self.cfg.width, self.cfg.slots);
        let nw = g.shape(frames)[0];
        let rgb = g.reshape(dec.rgb, &[nw, k, 3, h, w]);
        let logits = g.reshape(dec.logits, &[nw, k, 1, h, w]);
        let obs = g.reshape(frames, &[nw, 1, 3, h, w]);
        let component = gaussian_loglik(g, obs, rgb, self.cfg.sigma_o, 2);
        let log_mask = g.log_softmax(logits, 1);
        let joint = g.add(log_mask, component);
        let pixel = g.logsumexp(joint, 1);
        MixtureVars {
            log_mask,
            component,
            pixel,
        }
    }
}

/// `Σ_axis log N(x; μ, σ²)` for isotropic `σ`, keeping `axis` as size 1.
pub fn gaussian_loglik<T: Real>(g: &mut Graph<T>, x: Var, mean: Var, sigma: f64, axis: usize) -> Var {
    let n = {
        let (a, b) = (g.shape(x).to_vec(), g.shape(mean).to_vec());
        a[axis].max(b[axis])
    };
    let d = g.sub(x, mean);
    let z = g.scale(d, T::from_f64(1.0 / sigma));
    let z2 = g.sqr(z);
    let s = g.sum_axis(z2, axis);
    let s = g.scale(s, T::from_f64(-0.5));
    g.offset(s, T::from_f64(-(n as f64) * (sigma.ln() + 0.5 * LN_2PI)))
}

/// Per-pixel mixture log-likelihood in plain `f64`: `frame` is `[3,P]`,
/// `rgb` is `[K,3,P]`, `logits` is `[K,P]` (all flattened).
pub fn pixel_log_likelihood(frame: &[f64], rgb: &[f64], logits: &[f64], k: usize, sigma_o: f64) -> Vec<f64> {
    let p = frame.len() / 3;
    (0..p)
        .map(|i| {
            let mx = (0..k).map(|j| logits[j * p + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse_l = mx + (0..k).map(|j| (logits[j * p + i] - mx).exp()).sum::<f64>().ln();
            let terms: Vec<f64> = (0..k)
                .map(|j| {
                    let ll: f64 = (0..3)
                        .map(|c| {
                            let z = (frame[c * p + i] - rgb[(j * 3 + c) * p + i]) / sigma_o;
                            -0.5 * z * z - sigma_o.ln() - 0.5 * LN_2PI
                        })
                        .sum();
                    logits[j * p + i] - lse_l + ll
                })
                .collect();
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

/// Diagonal Normal over a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagNormal {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagNormal {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn point(mean: Vec<f64>) -> Self {
        let n = mean.len();
        Self { mean, var: vec![0.0; n] }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| -0.5 * (x - m).powi(2) / v - 0.5 * (LN_2PI + v.ln()))
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.var.iter().map(|v| 0.5 * (LN_2PI + 1.0 + v.ln())).sum()
    }
}

/// Standard-Normal prior over all generalized coordinates of one slot.
pub fn initial_prior(latent: usize) -> DiagNormal {
    DiagNormal::standard(2 * latent)
}

/// One step of the action-dependent dynamics for a single slot:
/// `s'_t = s'_{t-1} + D a`, `s_t = s_{t-1} + s'_t`, each with added noise
/// of variance `σ_s²`. `d` is `latent × 2` row-major; `prev` covers `[s, s']`.
/// Returned variances are the exact marginals (cross-covariances dropped).
pub fn dynamics_predict(prev: &DiagNormal, action: &DiagNormal, d: &[f64], sigma_s: f64) -> DiagNormal {
    let l = prev.mean.len() / 2;
    assert_eq!(d.len(), 2 * l, "D must be latent × 2");
    let s2 = sigma_s * sigma_s;
    let mut mean = vec![0.0; 2 * l];
    let mut var = vec![0.0; 2 * l];
    for j in 0..l {
        let (d0, d1) = (d[2 * j], d[2 * j + 1]);
        let dm = d0 * action.mean[0] + d1 * action.mean[1];
        let dv = d0 * d0 * action.var[0] + d1 * d1 * action.var[1];
        mean[l + j] = prev.mean[l + j] + dm;
        var[l + j] = prev.var[l + j] + dv + s2;
        mean[j] = prev.mean[j] + mean[l + j];
        var[j] = prev.var[j] + var[l + j] + s2;
    }
    DiagNormal { mean, var }
}

/// Graph version of [`dynamics_predict`] over rows: `mean`/`sd` are
/// `[B, 2L]`, `act_mean`/`act_sd` are `[B, 2]`, `d_t` is `[2, L]`.
/// Returns the predicted mean and standard deviation.
pub fn dynamics_predict_graph<T: Real>(
    g: &mut Graph<T>,
    mean: Var,
    sd: Var,
    act_mean: Var,
    act_sd: Var,
    d_t: Var,
    sigma_s: f64,
) -> (Var, Var) {
    let l = g.shape(mean)[1] / 2;
    let s2 = T::from_f64(sigma_s * sigma_s);
    let m_s = g.slice(mean, 1, 0, l);
    let m_v = g.slice(mean, 1, l, l);
    let var = g.sqr(sd);
    let v_s = g.slice(var, 1, 0, l);
    let v_v = g.slice(var, 1, l, l);
    let push = g.matmul(act_mean, d_t);
    let new_mv = g.add(m_v, push);
    let new_ms = g.add(m_s, new_mv);
    let avar = g.sqr(act_sd);
    let d2 = g.sqr(d_t);
    let push_var = g.matmul(avar, d2);
    let vv = g.add(v_v, push_var);
    let new_vv = g.offset(vv, s2);
    let vs = g.add(v_s, new_vv);
    let new_vs = g.offset(vs, s2);
    let m = g.concat(&[new_ms, new_mv], 1);
    let v = g.concat(&[new_vs, new_vv], 1);
    (m, g.sqrt(v))
}

/// `Σ_i m̂_i ψ_i` for one slot: `mask` has `P` entries, `field` is `[2, P]`.
pub fn expected_object_action(mask: &[f64], field: &[f64]) -> [f64; 2] {
    let p = mask.len();
    let mut a = [0.0; 2];
    for i in 0..p {
        a[0] += mask[i] * field[i];
        a[1] += mask[i] * field[p + i];
    }
    a
}

/// Values of a deterministic decode, grouped by frame.
#[derive(Clone, Debug)]
pub struct DecodeValues {
    pub frames: usize,
    pub slots: usize,
    pub height: usize,
    pub width: usize,
    /// `[F·K, 3, P]` flattened.
    pub rgb: Vec<f64>,
    /// `[F·K, P]`.
    pub logits: Vec<f64>,
    /// Soft assignments `m̂`, `[F·K, P]`.
    pub masks: Vec<f64>,
    /// Mixture mean `Σ_k m̂_k μ_k`, `[F, 3, P]`.
    pub recon: Vec<f64>,
}

impl DecodeValues {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn from_tensors<T: Real>(rgb: &Tensor<T>, logits: &Tensor<T>, frames: usize, slots: usize) -> Self {
        let (h, w) = (rgb.shape()[2], rgb.shape()[3]);
        let p = h * w;
        let rgb = rgb.to_f64_vec();
        let logits = logits.to_f64_vec();
        let mut masks = vec![0.0; frames * slots * p];
        let mut recon = vec![0.0; frames * 3 * p];
        for t in 0..frames {
            for i in 0..p {
                let mx = (0..slots).map(|k| logits[(t * slots + k) * p + i]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..slots).map(|k| (logits[(t * slots + k) * p + i] - mx).exp()).sum();
                for k in 0..slots {
                    let m = (logits[(t * slots + k) * p + i] - mx).exp() / z;
                    masks[(t * slots + k) * p + i] = m;
                    for c in 0..3 {
                        recon[(t * 3 + c) * p + i] += m * rgb[((t * slots + k) * 3 + c) * p + i];
                    }
                }
            }
        }
        Self {
            frames,
            slots,
            height: h,
            width: w,
            rgb,
            logits,
            masks,
            recon,
        }
    }

    pub fn mask(&self, t: usize, k: usize) -> &[f64] {
        let p = self.pixels();
        &self.masks[(t * self.slots + k) * p..(t * self.slots + k + 1) * p]
    }

    pub fn recon_frame(&self, t: usize) -> &[f64] {
        let p = self.pixels();
        &self.recon[t * 3 * p..(t + 1) * 3 * p]
    }

    /// Argmax-`m̂` slot label of each pixel in frame `t`.
    pub fn labels(&self, t: usize) -> Vec<i32> {
        let p = self.pixels();
        (0..p)
            .map(|i| {
                let mut best = 0;
                for k in 1..self.slots {
                    if self.masks[(t * self.slots + k) * p + i] > self.masks[(t * self.slots + best) * p + i] {
                        best = k;
                    }
                }
                best as i32
            })
            .collect()
    }

    /// Channel-last reconstruction of frame `t`.
    pub fn recon_hwc(&self, t: usize) -> Vec<f32> {
        crate::video::chw_to_hwc(self.recon_frame(t), 3, self.pixels())
    }

    pub fn slot_rgb_hwc(&self, t: usize, k: usize) -> Vec<f32> {
        let p = self.pixels();
        let r = (t * self.slots + k) * 3 * p;
        crate::video::chw_to_hwc(&self.rgb[r..r + 3 * p], 3, p)
    }
}

/// Decode posterior means (no sampling) for `frames · K` rows of `s`.
pub fn decode_values<T: Real>(
    model: &GenerativeModel,
    store: &ParamStore<T>,
    s: Tensor<T>,
    frames: usize,
) -> Result<DecodeValues, NnError> {
    let mut g = Graph::new();
    let s = g.constant(s);
    let dec = model.decode(&mut g, store, s)?;
    Ok(DecodeValues::from_tensors(g.value(dec.rgb), g.value(dec.logits), frames, model.cfg.slots))
}
