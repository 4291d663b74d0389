//! `obai`: generate datasets, train, evaluate, predict, learn preferences
//! and plan, writing reports and figures into an output directory.

mod figures;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use obai::config::{apply_kv, to_kv};
use obai::eval::{evaluate, predict_rollout, EvalOptions};
use obai::inference::InferenceOptions;
use obai::planner::{imagination_trial, plan, PlanOptions};
use obai::preference::{collect_samples, fit_preference, CollectConfig, Preference, SampleMode, TruePreference};
use obai::train::{Trainer, TrainConfig};
use obai::{ModelConfig, ObaiError, Video};
use obai_env::{generate_dataset, render, sample_scene, video_seed, Dataset, DatasetConfig, EnvError, SceneConfig};
use obai_nn::params::fnv1a;
use obai_nn::{NnError, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "obai", version, about = "Object-based active inference on sprite videos")]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving datasets, runs, reports and figures.
    #[arg(long, global = true, default_value = "obai-out")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores; 1 = serial).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run numerics in f64 instead of f32.
    #[arg(long, global = true)]
    float64_shadow: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a video dataset.
    Gen(GenArgs),
    /// Train a model; the run directory is named by the config hash.
    Train(TrainArgs),
    /// Segmentation, reconstruction and prediction metrics on held-out data.
    Eval(EvalArgs),
    /// Observe part of a video and extrapolate the rest.
    Predict(PredictArgs),
    /// Learn a latent preference from a position preference.
    LearnPref(LearnPrefArgs),
    /// Infer a scene, choose greedy actions toward a preference, imagine the result.
    Plan(PlanArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Frame side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Objects start at rest.
    #[arg(long = "static")]
    static_objects: bool,
    /// Dataset directory name inside the output directory.
    #[arg(long, default_value = "data")]
    name: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Flat `key = value` file overriding model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Train the static-image ablation (single frames, no dynamics/action terms).
    #[arg(long)]
    ablation: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    limit: usize,
    /// Observe this many frames and predict the rest (0 = no rollout).
    #[arg(long, default_value_t = 0)]
    observe: usize,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// Write decomposition PNGs (input, reconstruction, segmentation, slots) for the first N videos.
    #[arg(long, default_value_t = 4)]
    export_png: usize,
    #[arg(long, default_value = "eval")]
    name: String,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = 4)]
    observe: usize,
    #[arg(long, default_value_t = 2)]
    steps: usize,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// Also write per-iteration beliefs and losses as JSON.
    #[arg(long)]
    dump_inference: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Importance,
    Direct,
}

#[derive(Args, Debug)]
struct LearnPrefArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Position preference in pixels: `m,sd` or `mx,my,sd`.
    #[arg(long)]
    ptrue: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Importance)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    #[arg(long, default_value = "preference.json")]
    name: String,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pref: PathBuf,
    /// RGB PNG matching the model frame size; a static scene is sampled
    /// from the seed when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    /// Aim at μ̃ − μ_s − μ_s' (accounts for current velocity).
    #[arg(long)]
    velocity_compensated: bool,
    #[arg(long, default_value_t = 0.2)]
    tau: f64,
    /// Instead of one plan, sample this many static scenes and report how
    /// often every object's imagined mask centroid moves toward the goal.
    #[arg(long)]
    scenes: Option<usize>,
    /// Goal position `x,y` in pixels; defaults to the preference's goal.
    #[arg(long)]
    goal: Option<String>,
    #[arg(long, default_value = "plan")]
    name: String,
}

/// Exit codes: 2 configuration, 3 data, 4 numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ObaiError>() {
            return match e {
                ObaiError::Config(_) => 2,
                ObaiError::Numerical(_) => 4,
                ObaiError::Env(EnvError::Config(_)) => 2,
                ObaiError::Env(_) | ObaiError::Io { .. } => 3,
                ObaiError::Nn(NnError::Checkpoint { .. } | NnError::Io { .. }) => 3,
                ObaiError::Nn(_) => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<EnvError>() {
            return if matches!(e, EnvError::Config(_)) { 2 } else { 3 };
        }
        if cause.downcast_ref::<NnError>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) if cli.float64_shadow => cmd_train::<f64>(cli, a),
        Command::Train(a) => cmd_train::<f32>(cli, a),
        Command::Eval(a) if cli.float64_shadow => cmd_eval::<f64>(cli, a),
        Command::Eval(a) => cmd_eval::<f32>(cli, a),
        Command::Predict(a) if cli.float64_shadow => cmd_predict::<f64>(cli, a),
        Command::Predict(a) => cmd_predict::<f32>(cli, a),
        Command::LearnPref(a) if cli.float64_shadow => cmd_learn_pref::<f64>(cli, a),
        Command::LearnPref(a) => cmd_learn_pref::<f32>(cli, a),
        Command::Plan(a) if cli.float64_shadow => cmd_plan::<f64>(cli, a),
        Command::Plan(a) => cmd_plan::<f32>(cli, a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| ObaiError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(())
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        n_videos: a.n,
        frames: a.frames,
        height: a.size,
        width: a.size,
        n_objects: a.objects,
        seed: cli.seed,
        static_objects: a.static_objects,
    };
    let dir = cli.out_dir.join(&a.name);
    let m = generate_dataset(&cfg, &dir).map_err(ObaiError::from)?;
    write_text(&dir.join("config.txt"), &to_kv(&cfg))?;
    println!("wrote {} videos to {}", m.files.len(), dir.display());
    Ok(())
}

/// Model and training settings resolved from defaults, file and overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    #[serde(flatten)]
    model: ModelConfig,
    #[serde(flatten)]
    train: TrainConfig,
}

fn resolve_run_config(cli: &Cli, a: &TrainArgs, data: &Dataset) -> Result<RunConfig> {
    let dc = &data.manifest.config;
    let mut base = RunConfig {
        model: ModelConfig::standard(dc.height, dc.width, dc.n_objects + 1),
        train: TrainConfig {
            seed: cli.seed,
            ..TrainConfig::default()
        },
    };
    base.train.static_ablation = a.ablation;
    let mut text = String::new();
    if let Some(path) = &a.config {
        text = fs::read_to_string(path).map_err(|e| ObaiError::Io {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        text.push('\n');
    }
    for s in &a.set {
        text.push_str(s);
        text.push('\n');
    }
    let cfg: RunConfig = apply_kv(&base, &text)?;
    if (cfg.model.height, cfg.model.width) != (dc.height, dc.width) {
        return Err(ObaiError::Config(format!(
            "model frame {}×{} does not match the data ({}×{})",
            cfg.model.height, cfg.model.width, dc.height, dc.width
        ))
        .into());
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn cmd_train<T: Real>(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let data = Dataset::open(&a.data).map_err(ObaiError::from)?;
    let val = a
        .val_data
        .as_deref()
        .map(Dataset::open)
        .transpose()
        .map_err(ObaiError::from)?;
    let cfg = resolve_run_config(cli, a, &data)?;
    let kv = to_kv(&cfg);
    let run_dir = cli.out_dir.join(format!("run-{:016x}", fnv1a(kv.as_bytes())));
    let ck = run_dir.join("checkpoint");
    let mut trainer = if a.resume {
        let t = Trainer::<T>::load(&ck).with_context(|| format!("resuming from {}", ck.display()))?;
        log::info!("resumed at step {} (epoch {})", t.state.step, t.state.epoch);
        t
    } else {
        if run_dir.join("train.csv").exists() {
            fs::remove_file(run_dir.join("train.csv")).ok();
            fs::remove_file(run_dir.join("val.csv")).ok();
        }
        Trainer::<T>::new(&cfg.model, &cfg.train)?
    };
    write_text(&run_dir.join("config.txt"), &kv)?;
    println!("run directory {}", run_dir.display());
    let summary = trainer.run(&data, val.as_ref(), &run_dir)?;
    println!(
        "trained {} steps over {} epochs; checkpoint {}",
        summary.steps,
        summary.epochs,
        summary.checkpoint.display()
    );
    if let Some(l) = &summary.last {
        println!("last step loss {:.3} recon-mse {:.3e}", l.loss, l.recon_mse);
    }
    Ok(())
}

fn load_trainer<T: Real>(path: &Path) -> Result<Trainer<T>> {
    Trainer::<T>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_eval<T: Real>(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let t = load_trainer::<T>(&a.checkpoint)?;
    let data = Dataset::open(&a.data).map_err(ObaiError::from)?;
    let opts = EvalOptions {
        seed: cli.seed,
        tau: a.tau,
        observe: a.observe,
        limit: a.limit,
    };
    let report = evaluate(&t.net, &t.params, &data, &opts)?;
    let dir = cli.out_dir.join(&a.name);
    write_json(&dir.join("report.json"), &report)?;
    let mut csv = String::from("video,ari,fari,mse,rollout_mse,persist_mse\n");
    for v in &report.per_video {
        let mean = |x: &[f64]| if x.is_empty() { f64::NAN } else { x.iter().sum::<f64>() / x.len() as f64 };
        csv.push_str(&format!(
            "{},{:.6},{},{:.6e},{:.6e},{:.6e}\n",
            v.index,
            v.ari,
            v.fari.map_or("nan".into(), |f| format!("{f:.6}")),
            v.mse,
            mean(&v.rollout_mse),
            mean(&v.persist_mse)
        ));
    }
    write_text(&dir.join("per_video.csv"), &csv)?;
    for i in 0..a.export_png.min(report.videos) {
        let video = Video::<T>::from_record(&data.load(i).map_err(ObaiError::from)?);
        let mut rng = ChaCha8Rng::seed_from_u64(obai_env::video_seed(cli.seed, i as u64));
        let out = t.net.infer(&t.params, &video, &mut rng, &InferenceOptions::new(a.tau))?;
        let dec = t.net.decode_beliefs(&t.params, &out.beliefs)?;
        figures::decomposition(&video, &dec, &dir.join(format!("decomposition_{i:04}.png")))?;
    }
    println!(
        "videos {}  ARI {:.4}  FARI {:.4}  MSE {:.4e}",
        report.videos, report.ari, report.fari, report.mse
    );
    if let Some(w) = report.rollout_win_rate {
        println!(
            "rollout MSE per step {:?}  persist baseline {:?}  win rate {:.3}",
            report.prediction_mse, report.persist_mse, w
        );
    }
    Ok(())
}

fn cmd_predict<T: Real>(cli: &Cli, a: &PredictArgs) -> Result<()> {
    let t = load_trainer::<T>(&a.checkpoint)?;
    let data = Dataset::open(&a.data).map_err(ObaiError::from)?;
    let video = Video::<T>::from_record(&data.load(a.index).map_err(ObaiError::from)?);
    if a.observe == 0 || a.observe > video.len() {
        return Err(ObaiError::Config(format!("--observe must be in 1..={}", video.len())).into());
    }
    let seen = video.window(0, a.observe);
    let mut rng = ChaCha8Rng::seed_from_u64(obai_env::video_seed(cli.seed, a.index as u64));
    let mut opts = InferenceOptions::new(a.tau);
    opts.record_trajectory = a.dump_inference;
    let out = t.net.infer(&t.params, &seen, &mut rng, &opts)?;
    let recon = t.net.decode_beliefs(&t.params, &out.beliefs)?;
    let roll = predict_rollout(&t.net, &t.params, &out.beliefs, a.observe - 1, a.steps)?;
    let dir = cli.out_dir.join("predict");
    let path = dir.join(format!("prediction_{:04}.png", a.index));
    figures::prediction(&video, &recon, &roll[1..], &path)?;
    if a.dump_inference {
        let dump: Vec<_> = out
            .breakdowns
            .iter()
            .zip(&out.trajectory)
            .enumerate()
            .map(|(n, (b, q))| {
                serde_json::json!({
                    "iteration": n + 1,
                    "loss": b,
                    "state": q.state.to_f64_vec(),
                    "action": q.action.to_f64_vec(),
                })
            })
            .collect();
        write_json(&dir.join(format!("inference_{:04}.json", a.index)), &dump)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_learn_pref<T: Real>(cli: &Cli, a: &LearnPrefArgs) -> Result<()> {
    let t = load_trainer::<T>(&a.checkpoint)?;
    let ptrue: TruePreference = a.ptrue.parse()?;
    let m = &t.net.cfg;
    let scene = SceneConfig::for_frame(m.height, m.width, a.objects).static_objects();
    let cfg = CollectConfig {
        scene,
        n: a.n,
        seed: cli.seed,
        mode: match a.mode {
            ModeArg::Importance => SampleMode::Importance,
            ModeArg::Direct => SampleMode::Direct,
        },
        tau: a.tau,
    };
    let collected = collect_samples(&t.net, &t.params, &cfg, &ptrue)?;
    let mut pref = fit_preference(&collected.samples)?;
    pref.goal = Some(ptrue.mean);
    pref.source = format!(
        "position N(({}, {}), {}²), {} scenes, {:?} sampling, {} dropped",
        ptrue.mean[0], ptrue.mean[1], ptrue.sd, a.n, cfg.mode, collected.dropped
    );
    let path = cli.out_dir.join(&a.name);
    pref.save(&path)?;
    println!("preference from {} weighted slot beliefs written to {}", pref.samples, path.display());
    Ok(())
}

fn load_png_frame<T: Real>(path: &Path, h: usize, w: usize) -> Result<Video<T>> {
    let img = image::open(path)
        .map_err(|e| ObaiError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(ObaiError::Config(format!(
            "image is {}×{}, the model expects {h}×{w}",
            img.height(),
            img.width()
        ))
        .into());
    }
    let p = h * w;
    let mut frames = vec![T::zero(); 3 * p];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            frames[c * p + i] = T::from_f64(px[c] as f64 / 255.0);
        }
    }
    Ok(Video {
        frames: obai_nn::Tensor::new(&[1, 3, h, w], frames)?,
        fields: obai_nn::Tensor::zeros(&[1, 2, h, w]),
        masks: None,
    })
}

fn parse_goal(s: &str) -> Result<[f64; 2]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ObaiError::Config(format!("bad goal {s:?}: {e}")))?;
    match v[..] {
        [x, y] => Ok([x, y]),
        _ => Err(ObaiError::Config(format!("goal {s:?} needs two numbers")).into()),
    }
}

fn cmd_plan_scenes<T: Real>(cli: &Cli, a: &PlanArgs, t: &Trainer<T>, pref: &Preference, n: usize) -> Result<()> {
    let goal = match (&a.goal, pref.goal) {
        (Some(g), _) => parse_goal(g)?,
        (None, Some(g)) => g,
        (None, None) => bail_config("the preference has no goal; pass --goal x,y")?,
    };
    let m = &t.net.cfg;
    let scene_cfg = SceneConfig::for_frame(m.height, m.width, a.objects).static_objects();
    let opts = PlanOptions {
        velocity_compensated: a.velocity_compensated,
    };
    let trials: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cli.seed, j));
            let scene = sample_scene(&mut rng, &scene_cfg)?;
            let video = Video::<T>::from_rendered(&render(&scene));
            imagination_trial(&t.net, &t.params, &video, pref, goal, opts, a.tau, &mut rng)
        })
        .collect::<Result<_, ObaiError>>()?;
    let closer = trials.iter().filter(|r| r.moved_closer).count();
    let rate = closer as f64 / n.max(1) as f64;
    let dir = cli.out_dir.join(&a.name);
    write_json(
        &dir.join("imagination.json"),
        &serde_json::json!({
            "scenes": n,
            "goal": goal,
            "moved_closer": closer,
            "rate": rate,
            "trials": trials,
        }),
    )?;
    println!("{closer}/{n} scenes ({:.1}%) moved every object closer to ({}, {})", 100.0 * rate, goal[0], goal[1]);
    Ok(())
}

fn bail_config<X>(msg: &str) -> Result<X> {
    Err(ObaiError::Config(msg.into()).into())
}

fn cmd_plan<T: Real>(cli: &Cli, a: &PlanArgs) -> Result<()> {
    let t = load_trainer::<T>(&a.checkpoint)?;
    let pref = Preference::load(&a.pref)?;
    if let Some(n) = a.scenes {
        return cmd_plan_scenes(cli, a, &t, &pref, n);
    }
    let m = &t.net.cfg;
    let video = match &a.image {
        Some(p) => load_png_frame::<T>(p, m.height, m.width)?,
        None => {
            let scene_cfg = SceneConfig::for_frame(m.height, m.width, a.objects).static_objects();
            let scene = sample_scene(&mut ChaCha8Rng::seed_from_u64(cli.seed), &scene_cfg).map_err(ObaiError::from)?;
            Video::from_rendered(&render(&scene))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed ^ 0x9e37_79b9);
    let out = t.net.infer(&t.params, &video, &mut rng, &InferenceOptions::new(a.tau))?;
    let p = plan(
        &t.net,
        &t.params,
        &out.beliefs,
        0,
        &pref,
        PlanOptions {
            velocity_compensated: a.velocity_compensated,
        },
    )?;
    let dir = cli.out_dir.join(&a.name);
    figures::plan(&video, &p, &dir.join("plan.png"))?;
    write_json(
        &dir.join("plan.json"),
        &serde_json::json!({
            "actions": p.actions,
            "background_slot": p.background,
            "action_pixels": p.placement.pixels,
            "weak_slots": p.placement.weak,
            "feef_no_action": p.feef_before,
            "feef_planned": p.feef_after,
        }),
    )?;
    for (k, a) in p.actions.iter().enumerate() {
        if k != p.background {
            println!("slot {k}: â = ({:.3}, {:.3})", a[0], a[1]);
        }
    }
    println!("FEEF {:.3} → {:.3}; figure {}", p.feef_before, p.feef_after, dir.join("plan.png").display());
    if p.feef_after > p.feef_before {
        log::warn!("the planned action does not lower the expected free energy");
    }
    Ok(())
}
