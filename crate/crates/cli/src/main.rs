mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use issl_core::autodiff::GradCheckConfig;
use issl_core::dataset::{self, Sequence};
use issl_core::evaluation::{self, EvalSettings};
use issl_core::geometry::{CameraIntrinsics, DepthMap, RigidMotion};
use issl_core::model::TinyDepthNet;
use issl_core::selfsample::{self, MotionDistribution, SamplerConfig, SelfDepthSource};
use issl_core::synthdata::{self, presets, SceneSpec};
use issl_core::training::{self, EvalFrame, TrainState, Trainer, TrainingData};
use issl_core::warp::{self, Image, InstanceMask, ValidityMask};
use issl_core::{gradsuite, io};
use serde::Serialize;

use config::{RunConfig, RunRecord};

#[derive(Parser)]
#[command(
    name = "issl",
    version,
    about = "Self-supervised monocular depth with isometric self-sample consistency"
)]
struct Cli {
    /// Worker threads for data-parallel work (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Write self-samples of one image for inspection.
    Selfsample(SelfsampleArgs),
    /// Warp a source image into the target view.
    Warp(WarpArgs),
    /// Train the depth network on a sequence.
    Train(TrainArgs),
    /// Depth metrics of a prediction against ground truth.
    Eval(EvalArgs),
    /// Static/dynamic, shape/translation error decomposition.
    Decompose(DecomposeArgs),
    /// Finite-difference check of every differentiable op and the training objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Plane,
}

#[derive(Args)]
struct SynthArgs {
    /// SceneSpec JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scene: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value_t = 192)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 6)]
    frames: usize,
    /// Desk preset: add an object moving with the camera.
    #[arg(long)]
    moving: bool,
    /// Plane preset: plane depth in meters.
    #[arg(long, default_value_t = 10.0)]
    depth: f64,
    /// Plane preset: sideways camera step per frame in meters.
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfsampleArgs {
    #[arg(long)]
    image: PathBuf,
    /// Depth of `image` (PFM or 16-bit PNG).
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// SamplerConfig JSON; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_k: Option<usize>,
    #[arg(long)]
    epoch: Option<usize>,
    #[arg(long)]
    distribution: Option<Distribution>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distribution {
    Uniform,
    Gaussian,
}

#[derive(Args)]
struct WarpArgs {
    /// Source image.
    #[arg(long)]
    source: PathBuf,
    /// Target-view depth.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long)]
    intrinsics: PathBuf,
    /// Target-to-source motion `rx,ry,rz,tx,ty,tz` (axis-angle radians, meters).
    #[arg(long, allow_hyphen_values = true)]
    motion: String,
    /// Target image; when given the mean L1 residual over valid pixels is reported.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Output directory for `warped.png`, `valid.png` and `warp.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// RunConfig JSON.
    #[arg(long, conflicts_with = "rerun")]
    config: Option<PathBuf>,
    /// `run.json` of an earlier run to repeat.
    #[arg(long)]
    rerun: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    lambda3: Option<f64>,
    /// Continue from `state.json` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Validate the config and dataset, then exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalOptions {
    /// Ground-truth depth (PFM or 16-bit PNG).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    min_depth: Option<f64>,
    #[arg(long)]
    max_depth: Option<f64>,
    #[arg(long)]
    no_median_scaling: bool,
    /// Evaluation rectangle `x0,y0,x1,y1`.
    #[arg(long)]
    crop: Option<String>,
    /// Output `metrics.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictionArgs {
    /// Predicted depth (PFM or 16-bit PNG).
    #[arg(long, conflicts_with_all = ["checkpoint", "image"], required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "image")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    image: Option<PathBuf>,
    /// With a checkpoint: blend with the prediction of the mirrored image.
    #[arg(long, requires = "checkpoint")]
    post_process: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    prediction: PredictionArgs,
    #[command(flatten)]
    options: EvalOptions,
    /// Instance mask PNG; adds the static/dynamic decomposition.
    #[arg(long)]
    instances: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[command(flatten)]
    prediction: PredictionArgs,
    #[command(flatten)]
    options: EvalOptions,
    #[arg(long)]
    instances: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long)]
    tol: Option<f64>,
    /// Write every report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let degenerate = e.chain().any(|c| {
                c.downcast_ref::<issl_core::Error>()
                    .is_some_and(|e| e.is_degenerate())
            });
            ExitCode::from(if degenerate { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(issl_core::Error::invalid("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Selfsample(a) => selfsample(a),
        Command::Warp(a) => warp_cmd(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decompose(a) => decompose(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let spec: SceneSpec = match (&a.scene, a.preset) {
        (Some(path), _) => io::read_json(path)?,
        (None, Some(Preset::Desk)) => {
            presets::desk_scene(a.width, a.height, a.frames, a.moving, a.seed)
        }
        (None, Some(Preset::Plane)) => {
            presets::plane(a.width, a.height, a.depth, a.step, a.frames, a.seed)
        }
        (None, None) => unreachable!("clap requires one of --scene and --preset"),
    };
    let frames = synthdata::render_sequence(&spec)?;
    dataset::write_rendered(&a.out, &spec, &frames)?;
    let residual = synthdata::gt_warp_residual(&frames, &spec).ok();
    print_json(&serde_json::json!({
        "frames": frames.len(),
        "out": a.out,
        "gt_warp_residual": residual,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    Ok(CameraIntrinsics::from_json_file(path)?)
}

fn selfsample(a: SelfsampleArgs) -> Result<ExitCode> {
    let image = io::read_image(&a.image)?;
    let depth = io::read_depth(&a.depth)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let mut cfg: SamplerConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => SamplerConfig::default(),
    };
    if let Some(n) = a.n_k {
        cfg.n_k = n;
    }
    if let Some(d) = a.distribution {
        cfg.distribution = match d {
            Distribution::Uniform => MotionDistribution::Uniform,
            Distribution::Gaussian => MotionDistribution::Gaussian,
        };
    }
    let epoch = a.epoch.unwrap_or(0);
    let samples = selfsample::generate_batch(&image, &depth, &k, &cfg, epoch, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    #[derive(Serialize)]
    struct Entry {
        index: usize,
        motion: RigidMotion,
        valid_fraction: f64,
    }
    let mut entries = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        io::write_image(&s.image, &a.out.join(format!("sample_{i}.png")))?;
        io::write_pfm(&s.depth, &a.out.join(format!("sample_{i}_depth.pfm")))?;
        io::write_mask(&s.validity, &a.out.join(format!("sample_{i}_valid.png")))?;
        entries.push(Entry {
            index: i,
            motion: s.motion,
            valid_fraction: s.validity.fraction(),
        });
    }
    let summary = serde_json::json!({
        "epoch": epoch,
        "seed": a.seed,
        "theta_r": cfg.theta_r_at(epoch)?,
        "sampler": cfg,
        "depth_source": matches!(cfg.depth_source, SelfDepthSource::TransformedZ).then_some("transformed_z").unwrap_or("sampled"),
        "samples": entries,
    });
    io::write_json(&summary, &a.out.join("samples.json"))?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_numbers<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let values: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| issl_core::Error::invalid(format!("{what}: {e}")))?;
    values.try_into().map_err(|v: Vec<f64>| {
        issl_core::Error::invalid(format!(
            "{what}: expected {N} comma-separated numbers, got {}",
            v.len()
        ))
        .into()
    })
}

fn warp_cmd(a: WarpArgs) -> Result<ExitCode> {
    let source = io::read_image(&a.source)?;
    let depth = io::read_depth(&a.depth)?;
    let k = read_intrinsics(&a.intrinsics)?;
    let motion = RigidMotion::from_slice(&parse_numbers::<6>(&a.motion, "--motion")?)?;
    let view = warp::synthesize_view(&source, &depth, &motion, &k)?;
    let residual = a
        .target
        .as_ref()
        .map(|p| -> Result<f64> {
            let target = io::read_image(p)?;
            if !target.same_shape(&source) {
                bail!(issl_core::Error::shape(format!(
                    "{} differs in size from the source",
                    p.display()
                )));
            }
            mean_residual(&view.image, &target, &view.mask)
        })
        .transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    io::write_image(&view.image, &a.out.join("warped.png"))?;
    io::write_mask(&view.mask, &a.out.join("valid.png"))?;
    let summary = serde_json::json!({
        "motion": motion,
        "valid_fraction": view.mask.fraction(),
        "residual": residual,
    });
    io::write_json(&summary, &a.out.join("warp.json"))?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

/// Channel-averaged L1 difference over valid pixels.
fn mean_residual(a: &Image, b: &Image, mask: &ValidityMask) -> Result<f64> {
    let n = a.width() * a.height();
    let count = mask.count();
    if count == 0 {
        bail!(issl_core::Error::degenerate("no valid warped pixel"));
    }
    let mut sum = 0.0;
    for c in 0..a.channels() {
        for (i, (x, y)) in a.plane(c).iter().zip(b.plane(c)).enumerate() {
            if mask.is_valid(i % n) {
                sum += (x - y).abs();
            }
        }
    }
    Ok(sum / (count * a.channels()) as f64)
}

fn resolve_run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, &a.rerun) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunRecord::load(p)?.config,
        (None, None) => RunConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(d) = &a.eval_dataset {
        cfg.eval_dataset = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.steps_per_epoch {
        cfg.train.steps_per_epoch = s;
    }
    if let Some(l) = a.lambda3 {
        cfg.train.weights.lambda3 = l;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn eval_frames(seq: &Sequence) -> Result<Vec<EvalFrame>> {
    seq.frames
        .iter()
        .map(|f| {
            let depth = f.depth.clone().ok_or_else(|| {
                issl_core::Error::invalid(format!(
                    "evaluation frame {} in {} has no ground-truth depth",
                    f.index,
                    seq.dir.display()
                ))
            })?;
            Ok(EvalFrame {
                image: f.image.clone(),
                depth,
                instances: f.instances.clone(),
            })
        })
        .collect()
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = resolve_run_config(&a)?;
    let out = cfg.output_dir.clone().expect("validated");
    let mut seq = dataset::load_sequence(cfg.dataset.as_ref().expect("validated"))?;
    let eval_seq = match &cfg.eval_dataset {
        Some(p) => Some(dataset::load_sequence(p)?),
        None if cfg.holdout > 0 => {
            if cfg.holdout >= seq.frames.len() {
                bail!(issl_core::Error::invalid(format!(
                    "holdout {} leaves no training frames out of {}",
                    cfg.holdout,
                    seq.frames.len()
                )));
            }
            let held = seq.frames.split_off(seq.frames.len() - cfg.holdout);
            Some(Sequence {
                dir: seq.dir.clone(),
                intrinsics: seq.intrinsics,
                frames: held,
            })
        }
        None => None,
    };
    let eval = eval_seq
        .as_ref()
        .map(eval_frames)
        .transpose()?
        .unwrap_or_default();
    let data: TrainingData = seq.training_data(cfg.train.n_s)?;
    let trainer = Trainer::new(cfg.train, &data)?;
    if a.dry_run {
        print_json(&serde_json::json!({
            "valid": true,
            "training_tuples": data.tuples.len(),
            "eval_frames": eval.len(),
            "config": cfg,
        }))?;
        return Ok(ExitCode::SUCCESS);
    }

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    io::write_json(&RunRecord::new(cfg.clone()), &out.join("run.json"))?;
    let state_path = out.join("state.json");
    let metrics_path = out.join("metrics.json");
    let mut state = if a.resume && state_path.exists() {
        let s = TrainState::load(&state_path)?;
        if s.seed != cfg.train.seed {
            bail!(issl_core::Error::invalid(format!(
                "{} was trained with seed {}, the config says {}",
                state_path.display(),
                s.seed,
                cfg.train.seed
            )));
        }
        s
    } else {
        TrainState::new(&cfg.train, &data)?
    };
    let mut history: Vec<training::EpochMetrics> = if a.resume && metrics_path.exists() {
        io::read_json(&metrics_path)?
    } else {
        Vec::new()
    };
    trainer.fit(&mut state, &eval, &cfg.eval, |m, s| {
        history.push(m.clone());
        io::write_json(&history, &metrics_path)?;
        s.net.save(&out.join("model.ckpt"))?;
        s.save(&state_path)?;
        training::write_loss_csv(&s.history, &out.join("losses.csv"))
    })?;
    // also covers runs that had nothing left to train
    state.net.save(&out.join("model.ckpt"))?;
    state.save(&state_path)?;
    training::write_loss_csv(&state.history, &out.join("losses.csv"))?;
    io::write_json(&history, &metrics_path)?;
    print_json(&serde_json::json!({
        "epochs": state.epoch,
        "steps": state.step,
        "last": history.last(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn settings_from(o: &EvalOptions) -> Result<EvalSettings> {
    let mut s = EvalSettings::default();
    if let Some(v) = o.min_depth {
        s.min_depth = v;
    }
    if let Some(v) = o.max_depth {
        s.max_depth = v;
    }
    s.median_scaling = !o.no_median_scaling;
    if let Some(c) = &o.crop {
        s.crop = Some(parse_numbers::<4>(c, "--crop")?.map(|v| v as usize));
    }
    s.validate()?;
    Ok(s)
}

fn prediction(p: &PredictionArgs) -> Result<DepthMap> {
    if let Some(path) = &p.pred {
        return Ok(io::read_depth(path)?);
    }
    let net = TinyDepthNet::load(
        p.checkpoint
            .as_ref()
            .expect("clap requires a prediction source"),
    )?;
    let image = io::read_image(
        p.image
            .as_ref()
            .expect("clap pairs --checkpoint with --image"),
    )?;
    let pred = net.predict_depth(&image)?;
    if !p.post_process {
        return Ok(pred);
    }
    let flipped = net.predict_depth(&image.flip_horizontal())?;
    Ok(evaluation::post_process(&pred, &flipped)?)
}

fn write_output<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = out {
        io::write_json(value, p)?;
    }
    print_json(value)
}

fn read_instances(path: &Path) -> Result<InstanceMask> {
    Ok(io::read_instances(path)?)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let settings = settings_from(&a.options)?;
    let gt = io::read_depth(&a.options.gt)?;
    let pred = prediction(&a.prediction)?;
    let valid = ValidityMask::all(gt.width(), gt.height());
    let metrics = evaluation::compute_metrics(&pred, &gt, &valid, &settings)?;
    let decomposition = a
        .instances
        .as_ref()
        .map(|p| -> Result<_> {
            let inst = read_instances(p)?;
            Ok(evaluation::decompose_errors(
                &pred, &gt, &valid, &inst, &settings,
            )?)
        })
        .transpose()?;
    let report = serde_json::json!({
        "settings": settings,
        "metrics": metrics,
        "decomposition": decomposition,
    });
    write_output(&report, &a.options.out)?;
    Ok(ExitCode::SUCCESS)
}

fn decompose(a: DecomposeArgs) -> Result<ExitCode> {
    let settings = settings_from(&a.options)?;
    let gt = io::read_depth(&a.options.gt)?;
    let pred = prediction(&a.prediction)?;
    let inst = read_instances(&a.instances)?;
    let valid = ValidityMask::all(gt.width(), gt.height());
    let report = evaluation::decompose_errors(&pred, &gt, &valid, &inst, &settings)?;
    write_output(
        &serde_json::json!({
            "settings": settings,
            "decomposition": report,
        }),
        &a.options.out,
    )?;
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.seeds == 0 {
        bail!(issl_core::Error::invalid("--seeds must be positive"));
    }
    let mut cfg = GradCheckConfig::default();
    if let Some(t) = a.tol {
        cfg.tol = t;
    }
    let outcomes = gradsuite::run_all(0..a.seeds, &cfg)?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for check in gradsuite::all_checks() {
        let mine: Vec<_> = outcomes.iter().filter(|o| o.name == check.name).collect();
        let max = mine
            .iter()
            .map(|o| o.report.max_rel_error)
            .fold(0.0, f64::max);
        let ok = mine.iter().all(|o| o.report.passed);
        failed += usize::from(!ok);
        worst = worst.max(max);
        println!(
            "{:<28} max rel. error {:.3e}  {}",
            check.name,
            max,
            if ok { "ok" } else { "FAILED" }
        );
    }
    println!(
        "max rel. error {worst:.3e} over {} checks x {} seeds",
        outcomes.len() as u64 / a.seeds,
        a.seeds
    );
    if let Some(p) = &a.out {
        io::write_json(&outcomes, p)?;
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
