//! One-step planning: the free energy of the expected future of a policy,
//! the closed-form greedy action per slot, its placement in an executable
//! action field, and imagination of the outcome.

use obai_env::ActionField;
use obai_nn::{ParamStore, Real, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::error::ObaiError;
use crate::inference::{Beliefs, InferenceOptions, Obai};
use crate::model::{decode_values, dynamics_predict, DecodeValues, DiagNormal, D_PARAM};
use crate::preference::Preference;
use crate::video::Video;

/// `KL(q ‖ p)` between diagonal Normals.
pub fn kl_diag(q: &DiagNormal, p: &DiagNormal) -> f64 {
    q.mean
        .iter()
        .zip(&q.var)
        .zip(p.mean.iter().zip(&p.var))
        .map(|((mq, vq), (mp, vp))| 0.5 * ((vp / vq).ln() + (vq + (mq - mp).powi(2)) / vp - 1.0))
        .sum()
}

/// Actions per step and slot, `actions[τ][k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub actions: Vec<Vec<[f64; 2]>>,
}

impl Policy {
    pub fn single(actions: Vec<[f64; 2]>) -> Self {
        Self { actions: vec![actions] }
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeefValue {
    pub total: f64,
    /// `terms[τ][k]`.
    pub terms: Vec<Vec<f64>>,
}

/// Which part of each rolled-out belief enters the divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeefBlock {
    /// The s-block only (the preference has no velocity density).
    Position,
    /// `[s, s']` against the preference with its broad velocity block.
    Full,
}

/// The dynamics matrix `D` as `latent × 2` row-major.
pub fn dynamics_matrix<T: Real>(store: &ParamStore<T>) -> Result<Vec<f64>, ObaiError> {
    let d_t = store
        .get(D_PARAM)
        .ok_or_else(|| ObaiError::Config("parameters lack the dynamics matrix".into()))?;
    let l = d_t.shape()[1];
    let v = d_t.to_f64_vec();
    Ok((0..l).flat_map(|i| [v[i], v[l + i]]).collect())
}

/// Free energy of the expected future: roll the beliefs (`[s, s']` per
/// slot) forward under point actions and sum `KL(q(s_τ) ‖ p̃)` over steps
/// and slots. `skip` excludes slots (e.g. the background).
pub fn feef(
    policy: &Policy,
    beliefs: &[DiagNormal],
    pref: &Preference,
    d: &[f64],
    sigma_s: f64,
    block: FeefBlock,
    skip: Option<usize>,
) -> FeefValue {
    let l = pref.dim();
    let target = match block {
        FeefBlock::Position => pref.s_normal(),
        FeefBlock::Full => pref.full_normal(),
    };
    let mut cur: Vec<DiagNormal> = beliefs.to_vec();
    let mut terms = Vec::with_capacity(policy.steps());
    for step in &policy.actions {
        let mut row = Vec::with_capacity(cur.len());
        for (k, q) in cur.iter_mut().enumerate() {
            *q = dynamics_predict(q, &DiagNormal::point(step[k].to_vec()), d, sigma_s);
            if Some(k) == skip {
                row.push(0.0);
                continue;
            }
            let part = match block {
                FeefBlock::Position => DiagNormal {
                    mean: q.mean[..l].to_vec(),
                    var: q.var[..l].to_vec(),
                },
                FeefBlock::Full => q.clone(),
            };
            row.push(kl_diag(&part, &target));
        }
        terms.push(row);
    }
    FeefValue {
        total: terms.iter().flatten().sum(),
        terms,
    }
}

/// Greedy one-step action `â = (DᵀLD)⁻¹DᵀL r` with `r = μ̃ − μ_s`, or
/// `r = μ̃ − μ_s − μ_s'` when `velocity` (the current derivative mean) is
/// given, since the next position also moves by the velocity.
pub fn greedy_action(
    mu_s: &[f64],
    velocity: Option<&[f64]>,
    pref: &Preference,
    d: &[f64],
) -> Result<[f64; 2], ObaiError> {
    let l = pref.dim();
    if mu_s.len() != l || d.len() != 2 * l {
        return Err(ObaiError::Config("greedy action dimensions disagree".into()));
    }
    let prec = pref.precision();
    let mut a = [[0.0; 2]; 2];
    let mut b = [0.0; 2];
    for i in 0..l {
        let mut r = pref.mean[i] - mu_s[i];
        if let Some(v) = velocity {
            r -= v[i];
        }
        let row = [d[2 * i], d[2 * i + 1]];
        for p in 0..2 {
            b[p] += row[p] * prec[i] * r;
            for q in 0..2 {
                a[p][q] += row[p] * prec[i] * row[q];
            }
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let scale = (a[0][0] + a[1][1]).powi(2);
    if !(det.abs() > 1e-12 * scale) || !det.is_finite() {
        return Err(ObaiError::Numerical(format!("DᵀLD is singular (det {det:e})")));
    }
    Ok([
        (a[1][1] * b[0] - a[0][1] * b[1]) / det,
        (a[0][0] * b[1] - a[1][0] * b[0]) / det,
    ])
}

/// The slot explaining the most pixels in total, taken as the background
/// when no ground truth is available.
pub fn background_slot_by_mass(masks: &[f64], slots: usize) -> usize {
    let p = masks.len() / slots;
    (0..slots)
        .map(|k| (k, masks[k * p..(k + 1) * p].iter().sum::<f64>()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
        .expect("at least one slot")
}

#[derive(Clone, Debug)]
pub struct Placement {
    pub field: ActionField,
    /// Pixel chosen per slot (`None` for the skipped slot).
    pub pixels: Vec<Option<usize>>,
    /// Slots whose chosen pixel has `m̂ < 0.5`.
    pub weak: Vec<usize>,
}

/// Put each slot's action on its highest-`m̂` pixel, so the environment's
/// per-object sum returns it exactly. A pixel already taken by an earlier
/// slot is passed over for that slot's next best.
pub fn action_to_field(
    actions: &[[f64; 2]],
    masks: &[f64],
    height: usize,
    width: usize,
    skip: Option<usize>,
) -> Placement {
    let p = height * width;
    let k = actions.len();
    assert_eq!(masks.len(), k * p, "one mask per action");
    let mut field = ActionField::zeros(height, width);
    let mut taken = vec![false; p];
    let mut pixels = vec![None; k];
    let mut weak = Vec::new();
    for j in 0..k {
        if Some(j) == skip {
            continue;
        }
        let m = &masks[j * p..(j + 1) * p];
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
        let Some(&best) = order.iter().find(|&&i| !taken[i]) else {
            continue;
        };
        taken[best] = true;
        if m[best] < 0.5 {
            log::warn!("slot {j} has no dominant pixel (max m̂ {:.3})", m[best]);
            weak.push(j);
        }
        field.set(best, actions[j]);
        pixels[j] = Some(best);
    }
    Placement { field, pixels, weak }
}

/// Options for [`plan`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanOptions {
    /// Target `μ̃ − μ_s − μ_s'` instead of `μ̃ − μ_s`.
    pub velocity_compensated: bool,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub actions: Vec<[f64; 2]>,
    pub background: usize,
    pub placement: Placement,
    pub feef_before: f64,
    pub feef_after: f64,
    pub current: DecodeValues,
    pub imagined: DecodeValues,
}

/// Greedy plan for frame `t` of `beliefs`: one action per foreground slot,
/// its action field, and the imagined next frame.
pub fn plan<T: Real>(
    net: &Obai,
    store: &ParamStore<T>,
    beliefs: &Beliefs<T>,
    t: usize,
    pref: &Preference,
    opts: PlanOptions,
) -> Result<Plan, ObaiError> {
    let (k, l) = (net.cfg.slots, net.cfg.latent);
    if pref.dim() != l {
        return Err(ObaiError::Config(format!("preference has {} dims, model latent is {l}", pref.dim())));
    }
    let d = dynamics_matrix(store)?;
    let current = decode_values(&net.model, store, beliefs.s_means(t), 1)?;
    let background = background_slot_by_mass(&current.masks, k);
    let qs: Vec<DiagNormal> = (0..k).map(|j| beliefs.state_normal(t, j)).collect();
    let mut actions = vec![[0.0; 2]; k];
    for j in (0..k).filter(|&j| j != background) {
        let vel = opts.velocity_compensated.then(|| &qs[j].mean[l..]);
        actions[j] = greedy_action(&qs[j].mean[..l], vel, pref, &d)?;
    }
    let sigma_s = net.cfg.sigma_s;
    let zero = Policy::single(vec![[0.0; 2]; k]);
    let feef_before = feef(&zero, &qs, pref, &d, sigma_s, FeefBlock::Position, Some(background)).total;
    let chosen = Policy::single(actions.clone());
    let feef_after = feef(&chosen, &qs, pref, &d, sigma_s, FeefBlock::Position, Some(background)).total;
    let placement = action_to_field(&actions, &current.masks, net.cfg.height, net.cfg.width, Some(background));
    let imagined = imagine(net, store, &qs, &actions, &d)?;
    Ok(Plan {
        actions,
        background,
        placement,
        feef_before,
        feef_after,
        current,
        imagined,
    })
}

/// Predict every slot one step ahead under point actions and decode the
/// predicted means.
pub fn imagine<T: Real>(
    net: &Obai,
    store: &ParamStore<T>,
    beliefs: &[DiagNormal],
    actions: &[[f64; 2]],
    d: &[f64],
) -> Result<DecodeValues, ObaiError> {
    let l = net.cfg.latent;
    let mut s = Vec::with_capacity(beliefs.len() * l);
    for (q, a) in beliefs.iter().zip(actions) {
        let next = dynamics_predict(q, &DiagNormal::point(a.to_vec()), d, net.cfg.sigma_s);
        s.extend(next.mean[..l].iter().map(|&v| T::from_f64(v)));
    }
    let s = Tensor::new(&[beliefs.len(), l], s)?;
    Ok(decode_values(&net.model, store, s, 1)?)
}

/// Mask-weighted centroid `(x, y)` in pixel units of one soft mask.
pub fn mask_centroid(mask: &[f64], width: usize) -> Option<[f64; 2]> {
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut c = [0.0; 2];
    for (i, m) in mask.iter().enumerate() {
        c[0] += m * ((i % width) as f64 + 0.5);
        c[1] += m * ((i / width) as f64 + 0.5);
    }
    Some([c[0] / total, c[1] / total])
}

/// Centroid distances to a goal before and after one imagined greedy step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImaginationTrial {
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// Every foreground slot's decoded mask centroid ends strictly closer.
    pub moved_closer: bool,
}

/// Infer a single frame, plan greedily toward `pref` and compare the
/// foreground slots' mask centroids with `goal` before and after.
#[allow(clippy::too_many_arguments)]
pub fn imagination_trial<T: Real, R: Rng + ?Sized>(
    net: &Obai,
    store: &ParamStore<T>,
    video: &Video<T>,
    pref: &Preference,
    goal: [f64; 2],
    opts: PlanOptions,
    tau: f64,
    rng: &mut R,
) -> Result<ImaginationTrial, ObaiError> {
    let out = net.infer(store, video, rng, &InferenceOptions::new(tau))?;
    let p = plan(net, store, &out.beliefs, 0, pref, opts)?;
    let w = net.cfg.width;
    let dist = |c: [f64; 2]| ((c[0] - goal[0]).powi(2) + (c[1] - goal[1]).powi(2)).sqrt();
    let mut before = Vec::new();
    let mut after = Vec::new();
    for k in (0..net.cfg.slots).filter(|&k| k != p.background) {
        if let (Some(b), Some(a)) = (mask_centroid(p.current.mask(0, k), w), mask_centroid(p.imagined.mask(0, k), w)) {
            before.push(dist(b));
            after.push(dist(a));
        }
    }
    let moved_closer = !before.is_empty() && before.iter().zip(&after).all(|(b, a)| a < b);
    Ok(ImaginationTrial {
        before,
        after,
        moved_closer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preference::VELOCITY_SD;

    fn pref(mean: Vec<f64>, sd: Vec<f64>) -> Preference {
        Preference {
            mean,
            sd,
            velocity_sd: VELOCITY_SD,
            samples: 1,
            source: String::new(),
            goal: None,
        }
    }

    #[test]
    fn kl_closed_form() {
        let q = DiagNormal {
            mean: vec![1.0],
            var: vec![1.0],
        };
        assert!((kl_diag(&q, &DiagNormal::standard(1)) - 0.5).abs() < 1e-15);
        assert_eq!(kl_diag(&q, &q), 0.0);
    }

    #[test]
    fn identity_dynamics_and_precision() {
        let p = pref(vec![1.0, -2.0], vec![1.0, 1.0]);
        let d = [1.0, 0.0, 0.0, 1.0];
        let a = greedy_action(&[0.25, 0.5], None, &p, &d).unwrap();
        assert_eq!(a, [0.75, -2.5]);
        assert_eq!(greedy_action(&[1.0, -2.0], None, &p, &d).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn velocity_compensation_subtracts_drift() {
        let p = pref(vec![1.0, 1.0], vec![1.0, 1.0]);
        let d = [1.0, 0.0, 0.0, 1.0];
        let a = greedy_action(&[0.0, 0.0], Some(&[0.5, -0.5]), &p, &d).unwrap();
        assert_eq!(a, [0.5, 1.5]);
    }

    #[test]
    fn rank_deficient_dynamics_rejected() {
        let p = pref(vec![1.0, 1.0], vec![1.0, 1.0]);
        let d = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(greedy_action(&[0.0, 0.0], None, &p, &d), Err(ObaiError::Numerical(_))));
    }

    #[test]
    fn zero_feef_at_the_preference() {
        let p = pref(vec![0.3, -0.7], vec![0.5, 2.0]);
        let q = DiagNormal {
            mean: vec![0.3, -0.7, 0.0, 0.0],
            var: vec![0.25, 4.0, 0.0, 0.0],
        };
        let d = [0.2, 0.1, -0.3, 0.4];
        let v = feef(&Policy::single(vec![[0.0; 2]]), &[q], &p, &d, 0.0, FeefBlock::Position, None);
        assert!(v.total.abs() < 1e-15);
    }

    #[test]
    fn one_hot_masks_place_actions_exactly() {
        // 2×2 frame, slot 0 owns pixel 3, slot 1 pixel 0, slot 2 the rest.
        let masks = [0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let truth = [2, 3, 3, 1];
        let pl = action_to_field(&[[1.0, 2.0], [-3.0, 0.5], [9.0, 9.0]], &masks, 2, 2, Some(2));
        assert_eq!(obai_env::object_action_from_field(&pl.field, &truth, 0), [1.0, 2.0]);
        assert_eq!(obai_env::object_action_from_field(&pl.field, &truth, 1), [-3.0, 0.5]);
        assert_eq!(obai_env::object_action_from_field(&pl.field, &truth, 2), [0.0, 0.0]);
        assert!(pl.weak.is_empty());
        let zero = action_to_field(&[[0.0; 2]; 3], &masks, 2, 2, Some(2));
        assert!(zero.field.is_zero());
    }

    #[test]
    fn conflicting_argmax_moves_to_next_best() {
        let masks = [0.6, 0.4, 0.0, 0.0, 0.7, 0.3, 0.0, 0.0];
        let pl = action_to_field(&[[1.0, 0.0], [0.0, 1.0]], &masks, 2, 2, None);
        assert_eq!(pl.pixels, vec![Some(0), Some(1)]);
        assert_eq!(pl.weak, vec![1]);
        let truth = [1, 2, 0, 0];
        assert_eq!(obai_env::object_action_from_field(&pl.field, &truth, 0), [1.0, 0.0]);
        assert_eq!(obai_env::object_action_from_field(&pl.field, &truth, 1), [0.0, 1.0]);
    }

    #[test]
    fn centroid_of_a_point_mask() {
        let mut m = vec![0.0; 12];
        m[7] = 2.0;
        assert_eq!(mask_centroid(&m, 4), Some([3.5, 1.5]));
        assert_eq!(mask_centroid(&[0.0; 4], 2), None);
    }
}
