//! Greedy planning against numerical minimization and hand-derived FEEF
//! values.

mod common;

use common::checks::{self, preference, PlanInstance};
use obai::model::{dynamics_predict, DiagNormal};
use obai::planner::{action_to_field, feef, greedy_action, kl_diag, FeefBlock, Policy};
use obai::ObaiError;
use obai_env::object_action_from_field;
use proptest::prelude::*;

#[test]
fn closed_form_matches_numerical_minimization() {
    let o = checks::planner_oracle(100);
    assert!(o.pass, "{}", o.detail);
}

#[test]
fn identity_dynamics_and_precision_give_the_difference() {
    let o = checks::planner_identity(50);
    assert!(o.pass, "{}", o.detail);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_the_precision_leaves_the_action(seed in any::<u64>(), c in 0.1f64..10.0) {
        let inst = PlanInstance::random(6, seed);
        let a = greedy_action(&inst.mu_s, None, &inst.pref, &inst.d).unwrap();
        let scaled = preference(inst.pref.mean.clone(), inst.pref.sd.iter().map(|s| s * c).collect());
        let b = greedy_action(&inst.mu_s, None, &scaled, &inst.d).unwrap();
        for i in 0..2 {
            prop_assert!((a[i] - b[i]).abs() <= 1e-9 * a[i].abs().max(1.0));
        }
    }

    #[test]
    fn greedy_action_never_raises_the_objective(seed in any::<u64>(), da in -1.0f64..1.0, db in -1.0f64..1.0) {
        let inst = PlanInstance::random(5, seed);
        let a = greedy_action(&inst.mu_s, None, &inst.pref, &inst.d).unwrap();
        let best = inst.objective(a, false);
        prop_assert!(best <= inst.objective([a[0] + da, a[1] + db], false) + 1e-9);
    }
}

#[test]
fn rank_deficient_dynamics_is_a_numerical_error() {
    let pref = preference(vec![1.0, 2.0, 3.0], vec![1.0; 3]);
    // Both columns of D are parallel.
    let d = [1.0, 2.0, 0.5, 1.0, -1.0, -2.0];
    let err = greedy_action(&[0.0; 3], None, &pref, &d).unwrap_err();
    assert!(matches!(err, ObaiError::Numerical(_)), "{err}");
}

/// Two steps written out by hand: each step adds `D a` to the velocity
/// mean and `σ_s²` to both variances, position gains the new velocity.
#[test]
fn two_step_feef_matches_a_hand_rollout() {
    let pref = preference(vec![1.0, -1.0], vec![0.5, 2.0]);
    let d = [1.0, 0.0, 0.5, 1.0];
    let sigma_s: f64 = 0.2;
    let q0 = DiagNormal {
        mean: vec![0.0, 0.5, 0.1, -0.2],
        var: vec![0.1, 0.2, 0.05, 0.05],
    };
    let a1 = [0.3, -0.1];
    let a2 = [-0.2, 0.4];
    let policy = Policy {
        actions: vec![vec![a1], vec![a2]],
    };
    let got = feef(&policy, &[q0.clone()], &pref, &d, sigma_s, FeefBlock::Position, None);

    let s2 = sigma_s * sigma_s;
    let mut mean = q0.mean.clone();
    let mut var = q0.var.clone();
    let mut want = Vec::new();
    for a in [a1, a2] {
        for j in 0..2 {
            mean[2 + j] += d[2 * j] * a[0] + d[2 * j + 1] * a[1];
            var[2 + j] += s2;
            mean[j] += mean[2 + j];
            var[j] += var[2 + j] + s2;
        }
        let kl: f64 = (0..2)
            .map(|j| {
                let vp = pref.sd[j] * pref.sd[j];
                0.5 * ((vp / var[j]).ln() + (var[j] + (mean[j] - pref.mean[j]).powi(2)) / vp - 1.0)
            })
            .sum();
        want.push(kl);
    }
    assert_eq!(got.terms.len(), 2);
    for (g, w) in got.terms.iter().zip(&want) {
        assert!((g[0] - w).abs() < 1e-12, "{} vs {w}", g[0]);
    }
    assert!((got.total - want.iter().sum::<f64>()).abs() < 1e-12);

    // The same rollout through the library's one-step predictor.
    let p = DiagNormal::point(a1.to_vec());
    let q1 = dynamics_predict(&q0, &p, &d, sigma_s);
    let one = feef(&Policy::single(vec![a1]), &[q0], &pref, &d, sigma_s, FeefBlock::Position, None);
    let pos = DiagNormal {
        mean: q1.mean[..2].to_vec(),
        var: q1.var[..2].to_vec(),
    };
    assert!((one.total - kl_diag(&pos, &pref.s_normal())).abs() < 1e-12);
}

#[test]
fn skipped_slots_contribute_nothing() {
    let pref = preference(vec![0.0], vec![1.0]);
    let q = DiagNormal {
        mean: vec![3.0, 0.0],
        var: vec![1.0, 1.0],
    };
    let pol = Policy::single(vec![[0.0, 0.0], [0.0, 0.0]]);
    let both = feef(&pol, &[q.clone(), q.clone()], &pref, &[1.0, 0.0], 0.1, FeefBlock::Full, None);
    let one = feef(&pol, &[q.clone(), q], &pref, &[1.0, 0.0], 0.1, FeefBlock::Full, Some(1));
    assert!((both.total - 2.0 * one.total).abs() < 1e-12);
    assert_eq!(one.terms[0][1], 0.0);
}

/// Placing each slot's action on its dominant pixel makes the environment
/// deliver exactly that action when the slot's mask matches the object.
#[test]
fn placed_actions_reach_their_objects() {
    let (h, w) = (4, 4);
    let p = h * w;
    // Slot 0 background, slot 1 = object 1 (pixels 5, 6), slot 2 = object 2 (pixel 15).
    let mut truth = vec![0; p];
    truth[5] = 1;
    truth[6] = 1;
    truth[15] = 2;
    let mut masks = vec![0.0; 3 * p];
    for i in 0..p {
        let k = truth[i] as usize;
        masks[k * p + i] = 0.9;
        for j in 0..3 {
            if j != k {
                masks[j * p + i] = 0.05;
            }
        }
    }
    masks[p + 6] = 0.95; // slot 1 prefers pixel 6
    let actions = [[9.0, 9.0], [0.5, -1.5], [-2.0, 0.25]];
    let placed = action_to_field(&actions, &masks, h, w, Some(0));
    assert_eq!(placed.pixels, vec![None, Some(6), Some(15)]);
    assert!(placed.weak.is_empty());
    assert_eq!(object_action_from_field(&placed.field, &truth, 0), actions[1]);
    assert_eq!(object_action_from_field(&placed.field, &truth, 1), actions[2]);
}

#[test]
fn a_scene_already_at_the_goal_needs_no_action() {
    let inst = PlanInstance::random(8, 3);
    let a = greedy_action(&inst.pref.mean, None, &inst.pref, &inst.d).unwrap();
    assert!(a[0].abs() < 1e-12 && a[1].abs() < 1e-12, "{a:?}");
    let placed = action_to_field(&[a], &[1.0; 4], 2, 2, None);
    assert!(placed.field.accels().iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
}
