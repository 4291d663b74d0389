//! Acceptance report: one line per criterion, at the stated tolerances.
//!
//! Criteria 1–5 are computed here and asserted, except the τ = 0.1 part of
//! criterion 3, which is reported only. Criteria 6–8 need a trained
//! desk-scale model; they are reported from result files when the paths are
//! given through the environment and are otherwise listed as not run:
//!
//! - `OBAI_EVAL_REPORT`: `report.json` of `obai eval --observe 4` on the main model
//! - `OBAI_ABLATION_REPORT`: the same for the static-image ablation
//! - `OBAI_IMAGINATION_REPORT`: `imagination.json` of `obai plan --scenes 200`

mod common;

use std::time::Instant;

use common::checks::{self, Outcome};

fn line(n: usize, name: &str, o: &Outcome, secs: f64) -> bool {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} [{verdict}] {name}: {} ({secs:.1} s)", o.detail);
    o.pass
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn gradient_suite() -> Outcome {
    let layers = checks::layer_suite();
    let worst_layer = layers.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let (net, store) = common::tiny_network(3);
    let video = common::env_video(2, 8, 2, 17);
    let composite = common::composite_gradcheck(&net, &store, &video, 6);
    let names: Vec<&str> = layers.iter().map(|(n, _)| n.as_str()).collect();
    Outcome::new(
        worst_layer < 1e-4 && composite.passes(1e-4),
        format!(
            "layers [{}] max rel err {worst_layer:.1e}; composite β-ELBO ({} coordinates, 8×8, K=2, latent 4) {:.1e}",
            names.join(", "),
            composite.checked,
            composite.max_rel_err
        ),
    )
}

fn read_json(var: &str) -> Option<serde_json::Value> {
    let path = std::env::var(var).ok()?;
    let text = std::fs::read_to_string(&path).ok()?;
    serde_json::from_str(&text).ok()
}

fn report_desk() {
    let main = read_json("OBAI_EVAL_REPORT");
    let ablation = read_json("OBAI_ABLATION_REPORT");
    let imagination = read_json("OBAI_IMAGINATION_REPORT");
    let f = |v: &serde_json::Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);

    match (&main, &ablation) {
        (Some(m), Some(a)) => {
            let pass = f(m, "fari") >= 0.70 && f(m, "mse") <= 5e-3 && f(m, "ari") > f(a, "ari");
            println!(
                "criterion 6 [{}] desk-scale learning: FARI {:.3} (≥ 0.70), MSE {:.2e} (≤ 5e-3), ARI {:.3} vs ablation {:.3} ({} videos)",
                if pass { "PASS" } else { "FAIL" },
                f(m, "fari"),
                f(m, "mse"),
                f(m, "ari"),
                f(a, "ari"),
                f(m, "videos"),
            );
        }
        _ => println!("criterion 6 [NOT RUN] desk-scale learning: set OBAI_EVAL_REPORT and OBAI_ABLATION_REPORT"),
    }
    match &main {
        Some(m) if m["rollout_win_rate"].is_number() => {
            let rate = f(m, "rollout_win_rate");
            println!(
                "criterion 7 [{}] prediction: rollout beats persist-last-frame on {:.1}% of videos (≥ 80%)",
                if rate >= 0.8 { "PASS" } else { "FAIL" },
                100.0 * rate
            );
        }
        _ => println!("criterion 7 [NOT RUN] prediction: set OBAI_EVAL_REPORT (evaluated with --observe)"),
    }
    match &imagination {
        Some(i) => {
            let rate = f(i, "rate");
            println!(
                "criterion 8 [{}] goal-directed imagination: {:.1}% of {} scenes moved closer (≥ 90%)",
                if rate >= 0.9 { "PASS" } else { "FAIL" },
                100.0 * rate,
                f(i, "scenes")
            );
        }
        None => println!("criterion 8 [NOT RUN] goal-directed imagination: set OBAI_IMAGINATION_REPORT"),
    }
}

#[test]
fn acceptance_report() {
    let mut ok = true;

    let (o, s) = timed(|| checks::linear_motion(1000).and(checks::constructed_action_sums()));
    ok &= line(1, "environment exactness", &o, s);

    let (o, s) = timed(gradient_suite);
    ok &= line(2, "gradient suite (f64, rel err < 1e-4)", &o, s);

    // The τ = 0.1 comparison is reported but not asserted: the relaxed
    // estimator carries a temperature bias of a few percent there (its
    // convergence as τ → 0 is asserted instead).
    let t = Instant::now();
    let asserted = checks::gumbel_consistency().and(checks::jensen(100));
    ok &= asserted.pass;
    let o = checks::gumbel_vs_enumeration().and(asserted);
    line(3, "Gumbel-Softmax estimator", &o, t.elapsed().as_secs_f64());

    let (o, s) = timed(|| checks::planner_oracle(100).and(checks::planner_identity(100)));
    ok &= line(4, "planner oracle equivalence", &o, s);

    let (o, s) = timed(|| checks::preference_oracle(20, 1_000_000).and(checks::preference_weight_scale(20)));
    ok &= line(5, "preference fitting", &o, s);

    report_desk();
    assert!(ok, "an acceptance criterion failed; see the report above");
}
