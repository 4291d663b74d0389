//! Criterion-level checks shared by the topic tests and the acceptance
//! report. Each returns an [`Outcome`] instead of panicking so the report
//! can print every line before failing.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use obai::loss::{enumerated_action_loglik, jensen_pair, sampled_action_loglik, GumbelConfig};
use obai::planner::{feef, greedy_action, FeefBlock, Policy};
use obai::preference::{fit_preference, Preference, PreferenceSample, VELOCITY_SD};
use obai::model::DiagNormal;
use obai_env::{object_action_from_field, render, sample_scene, step, ActionField, SceneConfig};
use obai_nn::gradcheck::GradCheck;
use obai_nn::{Conv2d, ConvTranspose2d, Graph, Init, Linear, LstmCell, NnError, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    /// Both must pass; details are joined.
    pub fn and(self, other: Outcome) -> Outcome {
        Outcome::new(self.pass && other.pass, format!("{}; {}", self.detail, other.detail))
    }
}

// ---------------------------------------------------------------- environment

/// Zero action fields: positions follow `p₀ + t·v₀` for 10 steps, with the
/// real renderer supplying the masks.
pub fn linear_motion(scenes: u64) -> Outcome {
    let cfg = SceneConfig::for_frame(32, 32, 3);
    let zero = ActionField::zeros(32, 32);
    let mut worst: f64 = 0.0;
    for seed in 0..scenes {
        let s0 = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let mut s = s0.clone();
        for t in 1..=10 {
            let mask = render(&s).mask;
            s = step(&s, &zero, &mask);
            for (o, o0) in s.objects.iter().zip(&s0.objects) {
                for d in 0..2 {
                    worst = worst.max((o.position[d] - (o0.position[d] + t as f64 * o0.velocity[d])).abs());
                }
            }
        }
    }
    Outcome::new(worst <= 1e-5, format!("{scenes} scenes × 10 steps, max deviation {worst:.1e} px"))
}

/// Per-object action sums on hand-built masks and fields.
pub fn constructed_action_sums() -> Outcome {
    // 4×4 frame; object 1 (label 1) owns pixels 0,1,4; object 2 owns 10,11,15.
    let mut mask = vec![0; 16];
    for p in [0, 1, 4] {
        mask[p] = 1;
    }
    for p in [10, 11, 15] {
        mask[p] = 2;
    }
    let mut f = ActionField::zeros(4, 4);
    f.set(0, [1.0, 2.0]);
    f.set(4, [-0.5, 0.25]);
    f.set(11, [3.0, -1.0]);
    f.set(15, [0.125, 0.125]);
    f.set(7, [9.0, 9.0]); // background: belongs to nobody
    let cases = [
        (object_action_from_field(&f, &mask, 0), [0.5, 2.25]),
        (object_action_from_field(&f, &mask, 1), [3.125, -0.875]),
    ];
    // An object whose every pixel is hidden receives nothing.
    let hidden = object_action_from_field(&f, &mask, 2);
    let pass = cases.iter().all(|(got, want)| got == want) && hidden == [0.0, 0.0];
    Outcome::new(pass, format!("constructed sums exact: {pass}"))
}

// ------------------------------------------------------------------- gradients

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = g.constant(random(g.shape(y), seed, 1.0));
    let p = g.mul(y, w);
    g.sum(p)
}

fn layer_check(
    name: &str,
    store: &ParamStore<f64>,
    f: impl Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var, NnError>,
) -> (String, f64) {
    let r = GradCheck::default().params(store, f).unwrap();
    (name.to_string(), r.max_rel_err)
}

/// Max relative finite-difference error of each layer type used by the
/// model, in f64.
pub fn layer_suite() -> Vec<(String, f64)> {
    let init = Init::new(7);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    s.insert("x", random(&[3, 5], 1, 1.0)).unwrap();
    let lin = Linear::new("lin", 5, 4);
    lin.register(&mut s, &init).unwrap();
    out.push(layer_check("linear+elu", &s, |s, g| {
        let x = g.param(s, "x")?;
        let y = lin.forward(g, s, x)?;
        let y = g.elu(y);
        Ok(probe(g, y, 2))
    }));

    let mut s = ParamStore::new();
    s.insert("x", random(&[2, 3, 8, 8], 3, 1.0)).unwrap();
    let conv = Conv2d::new("conv", 3, 4, 3, 2, 1);
    conv.register(&mut s, &init).unwrap();
    out.push(layer_check("conv2d", &s, |s, g| {
        let x = g.param(s, "x")?;
        let y = conv.forward(g, s, x)?;
        Ok(probe(g, y, 4))
    }));

    let mut s = ParamStore::new();
    s.insert("x", random(&[2, 3, 4, 4], 5, 1.0)).unwrap();
    let deconv = ConvTranspose2d::new("deconv", 3, 2, 5, 1, 2);
    deconv.register(&mut s, &init).unwrap();
    out.push(layer_check("conv-transpose", &s, |s, g| {
        let x = g.param(s, "x")?;
        let y = deconv.forward(g, s, x)?;
        Ok(probe(g, y, 6))
    }));

    let mut s = ParamStore::new();
    s.insert("x", random(&[3, 4], 8, 1.0)).unwrap();
    let cell = LstmCell::new("lstm", 4, 5);
    cell.register(&mut s, &init).unwrap();
    out.push(layer_check("lstm", &s, |s, g| {
        let x = g.param(s, "x")?;
        let st = cell.zero_state(g, 3);
        let st = cell.forward(g, s, x, st)?;
        let st = cell.forward(g, s, x, st)?;
        let a = probe(g, st.h, 9);
        let b = probe(g, st.c, 10);
        Ok(g.add(a, b))
    }));

    let mut s = ParamStore::new();
    s.insert("x", random(&[2, 3, 5, 4], 11, 2.0)).unwrap();
    out.push(layer_check("softmax/log-softmax/pool", &s, |s, g| {
        let x = g.param(s, "x")?;
        let a = g.softmax(x, 1);
        let b = g.log_softmax(x, 1);
        let c = g.adaptive_avg_pool(x, 2, 2);
        let d = g.softplus(x);
        let pa = probe(g, a, 12);
        let pb = probe(g, b, 13);
        let pc = probe(g, c, 14);
        let pd = probe(g, d, 15);
        let ab = g.add(pa, pb);
        let cd = g.add(pc, pd);
        Ok(g.add(ab, cd))
    }));
    out
}

// ---------------------------------------------------------------- Gumbel / Jensen

/// A random enumerable instance: `P` pixels, `K` slots.
pub struct EnumInstance {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<Vec<f64>>,
    pub field: Vec<[f64; 2]>,
    pub act_mean: Vec<[f64; 2]>,
    pub act_var: Vec<[f64; 2]>,
}

impl EnumInstance {
    pub fn random(height: usize, width: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = height * width;
        Self {
            height,
            width,
            logits: (0..p).map(|_| (0..k).map(|_| rng.random_range(-2.0..2.0)).collect()).collect(),
            field: (0..p)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect(),
            act_mean: (0..k).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
            act_var: (0..k).map(|_| [rng.random_range(0.01..0.2), rng.random_range(0.01..0.2)]).collect(),
        }
    }

    pub fn slots(&self) -> usize {
        self.act_mean.len()
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.logits
            .iter()
            .map(|row| {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    /// Mean of the Gumbel-Softmax estimator over `batches × per_batch`
    /// joint draws, with its standard error over batches.
    pub fn sampled(&self, tau: f64, sigma_psi: f64, batches: usize, per_batch: usize, seed: u64) -> (f64, f64) {
        let k = self.slots();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gumbel = GumbelConfig { tau, n_samples: per_batch };
        let mut vals = Vec::with_capacity(batches);
        for _ in 0..batches {
            let mut g = Graph::<f64>::new();
            let am = g.constant(Tensor::new(&[k, 2], self.act_mean.iter().flatten().copied().collect()).unwrap());
            // Variance parameters are softplus⁻¹ of the standard deviations.
            let vp: Vec<f64> = self
                .act_var
                .iter()
                .flatten()
                .map(|v| {
                    let sd = v.sqrt();
                    sd + (-(-sd).exp_m1()).ln()
                })
                .collect();
            let av = g.constant(Tensor::new(&[k, 2], vp).unwrap());
            let lg: Vec<f64> = (0..k).flat_map(|j| self.logits.iter().map(move |row| row[j])).collect();
            let logits = g.constant(Tensor::new(&[k, 1, self.height, self.width], lg).unwrap());
            let fv: Vec<f64> = (0..2).flat_map(|c| self.field.iter().map(move |f| f[c])).collect();
            let field = g.constant(Tensor::new(&[1, 2, self.height, self.width], fv).unwrap());
            let v = sampled_action_loglik(&mut g, am, av, logits, field, sigma_psi, &gumbel, &mut rng).unwrap();
            vals.push(g.value(v).item());
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    pub fn enumerated(&self, sigma_psi: f64) -> f64 {
        enumerated_action_loglik(&self.act_mean, &self.act_var, &self.probs(), &self.field, sigma_psi).unwrap()
    }
}

const GUMBEL_SHAPES: [(usize, usize, usize, u64); 6] = [(2, 2, 2, 0), (3, 4, 3, 1), (2, 3, 2, 2), (3, 3, 3, 3), (2, 6, 2, 4), (1, 5, 3, 5)];

/// Relative gap `(estimate − exact) / |exact|` of the Gumbel-Softmax
/// estimator (2·10⁴ draws) on enumerable instances of up to 12 pixels and
/// 3 slots.
pub fn gumbel_gaps(tau: f64) -> Vec<f64> {
    let sigma_psi = 0.3;
    GUMBEL_SHAPES
        .iter()
        .map(|&(h, w, k, seed)| {
            let inst = EnumInstance::random(h, w, k, seed);
            let exact = inst.enumerated(sigma_psi);
            let (est, _) = inst.sampled(tau, sigma_psi, 40, 500, seed ^ 0xabc);
            (est - exact) / exact.abs()
        })
        .collect()
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// The estimator at τ = 0.1 against enumeration, within 1%.
pub fn gumbel_vs_enumeration() -> Outcome {
    let gaps = gumbel_gaps(0.1);
    let worst = max_abs(&gaps);
    let shown: Vec<String> = gaps.iter().map(|g| format!("{:+.1}%", 100.0 * g)).collect();
    Outcome::new(
        worst < 0.01,
        format!("τ=0.1 gaps [{}] on {} instances (limit 1%)", shown.join(" "), gaps.len()),
    )
}

/// The relaxation bias vanishes as τ → 0: within 1% at τ = 10⁻³.
pub fn gumbel_consistency() -> Outcome {
    let worst = max_abs(&gumbel_gaps(1e-3));
    Outcome::new(worst < 0.01, format!("τ=1e-3 max gap {:.2}%", 100.0 * worst))
}

/// `lhs ≤ rhs` on random soft assignments; equality at one-hot ones.
pub fn jensen(instances: u64) -> Outcome {
    let mut violations = 0;
    let mut worst_eq: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=3);
        // 3¹² assignments per instance would dominate the runtime.
        let p = rng.random_range(1..=if k == 3 { 8 } else { 12 });
        let inst = EnumInstance::random(1, p, k, seed + 1000);
        let probs = inst.probs();
        let (lhs, rhs) = jensen_pair(&inst.act_mean, &probs, &inst.field, 0.3).unwrap();
        if lhs > rhs + 1e-12 * rhs.abs().max(1.0) {
            violations += 1;
        }
        let hard: Vec<Vec<f64>> = probs
            .iter()
            .map(|row| {
                let j = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                (0..k).map(|i| f64::from(u8::from(i == j))).collect()
            })
            .collect();
        let (l0, r0) = jensen_pair(&inst.act_mean, &hard, &inst.field, 0.3).unwrap();
        worst_eq = worst_eq.max((l0 - r0).abs());
    }
    Outcome::new(
        violations == 0 && worst_eq <= 1e-9,
        format!("{instances} instances, {violations} violations, one-hot gap {worst_eq:.1e}"),
    )
}

// --------------------------------------------------------------------- planner

pub struct PlanInstance {
    pub d: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pref: Preference,
}

pub fn preference(mean: Vec<f64>, sd: Vec<f64>) -> Preference {
    Preference {
        mean,
        sd,
        velocity_sd: VELOCITY_SD,
        samples: 1,
        source: String::new(),
        goal: None,
    }
}

impl PlanInstance {
    pub fn random(latent: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |lo: f64, hi: f64, n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let d = v(-1.0, 1.0, 2 * latent);
        let mu_s = v(-2.0, 2.0, latent);
        let velocity = v(-0.5, 0.5, latent);
        let mean = v(-2.0, 2.0, latent);
        let sd = v(0.3, 2.0, latent);
        Self {
            d,
            mu_s,
            velocity,
            pref: preference(mean, sd),
        }
    }

    /// One-step weighted objective `(μ + D a − μ̃)ᵀ L (μ + D a − μ̃)`, with
    /// `μ` the position mean optionally advanced by the velocity.
    pub fn objective(&self, a: [f64; 2], with_velocity: bool) -> f64 {
        let prec = self.pref.precision();
        (0..self.mu_s.len())
            .map(|i| {
                let v = if with_velocity { self.velocity[i] } else { 0.0 };
                let r = self.mu_s[i] + v + self.d[2 * i] * a[0] + self.d[2 * i + 1] * a[1] - self.pref.mean[i];
                prec[i] * r * r
            })
            .sum()
    }

    pub fn beliefs(&self) -> DiagNormal {
        let l = self.mu_s.len();
        let mut mean = self.mu_s.clone();
        mean.extend(&self.velocity);
        DiagNormal { mean, var: vec![0.05; 2 * l] }
    }
}

struct Objective<F: Fn([f64; 2]) -> f64>(F);

impl<F: Fn([f64; 2]) -> f64> CostFunction for Objective<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, a: &Self::Param) -> Result<f64, argmin::core::Error> {
        Ok((self.0)([a[0], a[1]]))
    }
}

/// Derivative-free minimization of a 2-D objective from `start`.
pub fn nelder_mead(f: impl Fn([f64; 2]) -> f64, start: [f64; 2]) -> [f64; 2] {
    let simplex = vec![
        start.to_vec(),
        vec![start[0] + 1.0, start[1]],
        vec![start[0], start[1] + 1.0],
    ];
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-15).unwrap();
    let res = Executor::new(Objective(f), solver)
        .configure(|s| s.max_iters(5000))
        .run()
        .unwrap();
    let best = res.state.best_param.unwrap();
    [best[0], best[1]]
}

fn rel_err(a: [f64; 2], b: [f64; 2]) -> f64 {
    let diff = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let norm = (b[0].powi(2) + b[1].powi(2)).sqrt().max(1e-8);
    diff / norm
}

/// Closed-form greedy action against numerical minimization: of the
/// weighted objective (no velocity), and of the FEEF itself (velocity
/// compensated).
pub fn planner_oracle(instances: u64) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut worst_feef: f64 = 0.0;
    for seed in 0..instances {
        let inst = PlanInstance::random(16, seed);
        let closed = greedy_action(&inst.mu_s, None, &inst.pref, &inst.d).unwrap();
        let numeric = nelder_mead(|a| inst.objective(a, false), [0.0, 0.0]);
        worst = worst.max(rel_err(closed, numeric));

        let closed_v = greedy_action(&inst.mu_s, Some(&inst.velocity), &inst.pref, &inst.d).unwrap();
        let beliefs = [inst.beliefs()];
        let numeric_v = nelder_mead(
            |a| feef(&Policy::single(vec![a]), &beliefs, &inst.pref, &inst.d, 0.1, FeefBlock::Position, None).total,
            [0.0, 0.0],
        );
        worst_feef = worst_feef.max(rel_err(closed_v, numeric_v));
    }
    Outcome::new(
        worst < 1e-4 && worst_feef < 1e-4,
        format!("{instances} instances (L=16), max rel err {worst:.1e} objective, {worst_feef:.1e} FEEF"),
    )
}

/// `D = I`, `L = I`: the action is exactly `μ̃ − μ`.
pub fn planner_identity(instances: u64) -> Outcome {
    let mut exact = true;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let target = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let pref = preference(target.to_vec(), vec![1.0, 1.0]);
        let a = greedy_action(&mu, None, &pref, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        exact &= a == [target[0] - mu[0], target[1] - mu[1]];
    }
    Outcome::new(exact, format!("D=I, L=I exact on {instances} draws: {exact}"))
}

// ------------------------------------------------------------------ preference

pub fn random_samples(n: usize, dim: usize, seed: u64) -> Vec<PreferenceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| PreferenceSample {
            mean: (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
            sd: (0..dim).map(|_| rng.random_range(0.1..1.5)).collect(),
            weight: rng.random_range(0.0..1.0),
        })
        .collect()
}

/// Sample moments of the weighted Normal mixture from `draws` draws, with
/// standard errors of the mean and of the variance.
pub struct MixtureMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub se_mean: Vec<f64>,
    pub se_var: Vec<f64>,
}

pub fn mixture_moments(samples: &[PreferenceSample], draws: usize, seed: u64) -> MixtureMoments {
    let dim = samples[0].mean.len();
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let cdf: Vec<f64> = samples
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.weight / total;
            Some(*acc)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    // Shifted sums for numerical stability: accumulate x − c.
    let c: Vec<f64> = (0..dim).map(|i| samples.iter().map(|s| s.weight * s.mean[i]).sum::<f64>() / total).collect();
    let mut m = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    for _ in 0..draws {
        let u: f64 = rng.random();
        let j = cdf.partition_point(|&x| x < u).min(samples.len() - 1);
        for i in 0..dim {
            let x = samples[j].mean[i] + samples[j].sd[i] * std.sample(&mut rng) - c[i];
            let mut p = x;
            for mk in m.iter_mut() {
                mk[i] += p;
                p *= x;
            }
        }
    }
    let n = draws as f64;
    let mut out = MixtureMoments {
        mean: vec![0.0; dim],
        var: vec![0.0; dim],
        se_mean: vec![0.0; dim],
        se_var: vec![0.0; dim],
    };
    for i in 0..dim {
        let (r1, r2, r3, r4) = (m[0][i] / n, m[1][i] / n, m[2][i] / n, m[3][i] / n);
        let var = r2 - r1 * r1;
        let mu4 = r4 - 4.0 * r1 * r3 + 6.0 * r1 * r1 * r2 - 3.0 * r1.powi(4);
        out.mean[i] = c[i] + r1;
        out.var[i] = var * n / (n - 1.0);
        out.se_mean[i] = (var / n).sqrt();
        out.se_var[i] = ((mu4 - var * var) / n).sqrt();
    }
    out
}

/// Moment matching against a Monte-Carlo oracle, within 3 standard errors.
pub fn preference_oracle(instances: u64, draws: usize) -> Outcome {
    let mut worst_z: f64 = 0.0;
    for seed in 0..instances {
        // Each dimension is fitted independently; two keep the number of
        // 3-SE comparisons (and so the family-wise false-alarm rate) modest.
        let samples = random_samples(5 + seed as usize % 20, 2, seed);
        let p = fit_preference(&samples).unwrap();
        let mc = mixture_moments(&samples, draws, seed ^ 0xfeed);
        for i in 0..2 {
            worst_z = worst_z.max((p.mean[i] - mc.mean[i]).abs() / mc.se_mean[i]);
            worst_z = worst_z.max((p.sd[i] * p.sd[i] - mc.var[i]).abs() / mc.se_var[i]);
        }
    }
    Outcome::new(
        worst_z <= 3.0,
        format!("{instances} instances × {draws} draws, max deviation {worst_z:.2} SE"),
    )
}

/// Scaling every weight by a power of two leaves the fit bit-identical.
pub fn preference_weight_scale(instances: u64) -> Outcome {
    let mut exact = true;
    for seed in 0..instances {
        let samples = random_samples(12, 3, seed + 500);
        let base = fit_preference(&samples).unwrap();
        for scale in [0.25, 8.0, 1024.0] {
            let scaled: Vec<PreferenceSample> = samples
                .iter()
                .map(|s| PreferenceSample {
                    weight: s.weight * scale,
                    ..s.clone()
                })
                .collect();
            let p = fit_preference(&scaled).unwrap();
            exact &= p.mean == base.mean && p.sd == base.sd;
        }
    }
    Outcome::new(exact, format!("weight-scale invariance exact: {exact}"))
}
