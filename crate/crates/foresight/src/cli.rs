//! The `foresight` binary: data generation, training, fine-tuning,
//! rollout prediction, decomposition inspection, and evaluation.
//!
//! Every run that produces files writes a `run_manifest.json` (command,
//! argv, resolved config, seed, format versions, output paths) before doing
//! any work, so a run is reproducible from the manifest alone.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::action::{plan_grasp, SemanticGrasp};
use crate::data::{
    export_trajectory, generate_synthetic, load_trajectory, load_trajectory_dir, sample_window,
    SceneConfig, Trajectory, TrajectoryFormat, TrajectoryMeta,
};
use crate::eval::{evaluate_protocol, windows_from_trajectories, EvalConfig, MetricSuite};
use crate::metrics::{RandomProjectionClipFeatures, RandomProjectionFeatures};
use crate::model::{build_model, Model, ModelConfig, RolloutMode};
use crate::training::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};

/// Environment variable holding the default data root for `--data-dir`.
pub const DATA_DIR_ENV: &str = "FORESIGHT_DATA_DIR";

/// Fixed seeds for the evaluation feature extractors, independent of the
/// protocol seed so scores stay comparable across evaluation runs.
const LPIPS_EXTRACTOR_SEED: u64 = 0xfea7_0001;
const FVD_EXTRACTOR_SEED: u64 = 0xfea7_0002;

#[derive(Parser)]
#[command(
    name = "foresight",
    version,
    about = "Stochastic action-conditioned video prediction for robot grasping"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic grasp trajectories.
    GenData(GenDataArgs),
    /// Train a model (optionally starting from a donor checkpoint).
    Train(TrainArgs),
    /// Run the sampling evaluation protocol against a test set.
    Eval(EvalArgs),
    /// Sample predicted futures from a context window and export them.
    Predict(PredictArgs),
    /// Decompose a semantic grasp into element actions and movements.
    Decompose(DecomposeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    n_traj: usize,
    /// Frames per trajectory.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 1.0)]
    grasp_success_prob: f64,
    #[arg(long)]
    out_dir: PathBuf,
    /// All trajectories share one layout and grasp plan.
    #[arg(long, default_value_t = false)]
    shared_layout: bool,
    #[arg(long, default_value_t = 3)]
    n_blocks: usize,
    /// Movement discretization step, meters.
    #[arg(long, default_value_t = 0.05)]
    max_step: f64,
    /// Container format to write: pandagrasp or robonet_hdf5.
    #[arg(long, default_value = "pandagrasp")]
    format: String,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config (see `RunConfigFile` in the library docs).
    #[arg(long)]
    config: PathBuf,
    /// Trajectory directory; defaults to $FORESIGHT_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Donor checkpoint: start from its parameters (fine-tuning).
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the config file seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config file step count.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trajectory directory; defaults to $FORESIGHT_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the JSON report (a .tsv twin lands next to it).
    #[arg(long)]
    report_out: PathBuf,
    #[arg(long, default_value_t = 2)]
    context: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
    #[arg(long, default_value_t = 256)]
    fvd_batch: usize,
    /// Container format of the test data.
    #[arg(long, default_value = "pandagrasp")]
    format: String,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input trajectory file providing context frames and actions.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "pandagrasp")]
    format: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// prior (sampled futures) or posterior (teacher-forced reconstruction).
    #[arg(long, default_value = "prior")]
    mode: String,
    #[arg(long, default_value_t = 2)]
    context: usize,
    #[arg(long, default_value_t = 10)]
    horizon: usize,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Grasp point, meters: x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    grasp: [f64; 3],
    /// Drop point, meters: x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    drop: [f64; 3],
    /// Hover plane height, meters.
    #[arg(long)]
    top: f64,
    #[arg(long, default_value_t = 0.05)]
    max_step: f64,
    /// Optional start pose x,y,z; defaults to hovering above the grasp.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    start: Option<[f64; 3]>,
    /// When set, also writes the plan and a run manifest there as JSON.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p
            .trim()
            .parse::<f64>()
            .map_err(|e| format!("bad coordinate `{p}`: {e}"))?;
    }
    Ok(out)
}

/// On-disk TOML run configuration for `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// Master seed for model init and training.
    pub seed: u64,
    /// Container format of the training data.
    pub data_format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct FormatVersions {
    container: i64,
    checkpoint: i64,
    report_schema: u32,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    seed: u64,
    crate_version: String,
    formats: FormatVersions,
    config: serde_json::Value,
    outputs: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    argv: &[String],
    seed: u64,
    config: serde_json::Value,
    outputs: Vec<String>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let manifest = RunManifest {
        command: command.to_string(),
        argv: argv.to_vec(),
        seed,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        formats: FormatVersions {
            container: crate::data::CONTAINER_FORMAT_VERSION,
            checkpoint: crate::training::CHECKPOINT_FORMAT_VERSION,
            report_schema: crate::eval::REPORT_SCHEMA_VERSION,
        },
        config,
        outputs,
    };
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    /// Bad usage or configuration: exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Runtime failure: exit code 1.
    #[error("{0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

macro_rules! runtime {
    ($e:expr) => {
        $e.map_err(|err| CliError::Runtime(err.to_string()))
    };
}

fn parse_format(s: &str) -> Result<TrajectoryFormat, CliError> {
    TrajectoryFormat::parse(s).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown format `{s}` (expected pandagrasp or robonet_hdf5)"
        ))
    })
}

fn data_dir_or_env(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "no --data-dir given and {DATA_DIR_ENV} is not set"
            ))
        })
}

/// Run the CLI on an argv (including the program name); returns the exit
/// code. `main` is a thin wrapper over this.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args, &argv),
        Command::Train(args) => train(args, &argv),
        Command::Eval(args) => eval(args, &argv),
        Command::Predict(args) => predict(args, &argv),
        Command::Decompose(args) => decompose(args, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn gen_data(args: GenDataArgs, argv: &[String]) -> Result<(), CliError> {
    let format = parse_format(&args.format)?;
    let cfg = SceneConfig {
        grasp_success_prob: args.grasp_success_prob,
        shared_layout: args.shared_layout,
        n_blocks: args.n_blocks,
        max_step: args.max_step,
        ..SceneConfig::default()
    };
    let outputs: Vec<String> = (0..args.n_traj)
        .map(|i| format!("traj_{i:05}.h5"))
        .collect();
    write_manifest(
        &args.out_dir,
        "gen-data",
        argv,
        args.seed,
        serde_json::json!({
            "n_traj": args.n_traj,
            "frames": args.frames,
            "format": args.format,
            "scene": {
                "n_blocks": cfg.n_blocks,
                "pixels_per_meter": cfg.pixels_per_meter,
                "grasp_success_prob": cfg.grasp_success_prob,
                "max_step": cfg.max_step,
                "top_height": cfg.top_height,
                "grasp_height": cfg.grasp_height,
                "shared_layout": cfg.shared_layout,
            },
        }),
        outputs.clone(),
    )?;
    let trajs = runtime!(generate_synthetic(
        args.seed,
        args.n_traj,
        args.frames,
        &cfg
    ))?;
    for (traj, name) in trajs.iter().zip(&outputs) {
        runtime!(export_trajectory(traj, &args.out_dir.join(name), format))?;
    }
    println!(
        "wrote {} trajectories ({} frames each) to {}",
        trajs.len(),
        args.frames,
        args.out_dir.display()
    );
    Ok(())
}

fn load_run_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg: RunConfigFile =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    if cfg.data_format.is_empty() {
        cfg.data_format = "pandagrasp".to_string();
    }
    cfg.model
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

fn train(args: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let mut cfg = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    cfg.train.seed = cfg.seed;
    let format = parse_format(&cfg.data_format)?;
    let data_dir = data_dir_or_env(args.data_dir)?;

    write_manifest(
        &args.out_dir,
        "train",
        argv,
        cfg.seed,
        serde_json::to_value(&cfg)?,
        vec!["checkpoint.h5".into(), "losses.csv".into()],
    )?;

    let data = runtime!(load_trajectory_dir(&data_dir, format))?;
    if data.is_empty() {
        return Err(CliError::Runtime(format!(
            "no trajectories in {}",
            data_dir.display()
        )));
    }

    let model = match &args.init_checkpoint {
        Some(path) => {
            let ckpt = runtime!(load_checkpoint(path))?;
            let model = runtime!(ckpt.to_model())?;
            println!(
                "fine-tuning from {} (checksum {:016x})",
                path.display(),
                model.checksum()
            );
            model
        }
        None => runtime!(build_model(&cfg.model, cfg.seed))?,
    };
    println!(
        "model: {} parameters, seed {}, {} steps",
        model.param_count(),
        cfg.seed,
        cfg.train.steps
    );

    let mut trainer = runtime!(Trainer::new(model, cfg.train.clone()))?;
    let (ckpt, report) = runtime!(trainer.fit_with(&data, Some(&args.out_dir), |step, loss| {
        println!(
            "step {step}: total {:.6} (recon {:.6}, kl {:.6})",
            loss.total, loss.recon_l1, loss.kl
        );
    }))?;

    let mut csv = String::from("step,recon_l1,kl,beta,total\n");
    for (step, loss) in &report.history {
        csv.push_str(&format!(
            "{step},{},{},{},{}\n",
            loss.recon_l1, loss.kl, loss.beta, loss.total
        ));
    }
    std::fs::write(args.out_dir.join("losses.csv"), csv)?;
    runtime!(save_checkpoint(&ckpt, &args.out_dir.join("checkpoint.h5")))?;
    println!(
        "checkpoint written to {}",
        args.out_dir.join("checkpoint.h5").display()
    );
    Ok(())
}

fn eval(args: EvalArgs, argv: &[String]) -> Result<(), CliError> {
    let format = parse_format(&args.format)?;
    let data_dir = data_dir_or_env(args.data_dir)?;
    let report_dir = args
        .report_out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();
    let eval_cfg = EvalConfig {
        context: args.context,
        horizon: args.horizon,
        n_samples: args.n_samples,
        fvd_batch: args.fvd_batch,
        seed: args.seed,
        ..EvalConfig::default()
    };
    write_manifest(
        &report_dir,
        "eval",
        argv,
        args.seed,
        serde_json::to_value(&eval_cfg)?,
        vec![args.report_out.display().to_string()],
    )?;

    let ckpt = runtime!(load_checkpoint(&args.checkpoint))?;
    let model = runtime!(ckpt.to_model())?;
    let data = runtime!(load_trajectory_dir(&data_dir, format))?;
    let windows = runtime!(windows_from_trajectories(
        &data,
        args.context,
        args.horizon
    ))?;

    let image_features = RandomProjectionFeatures::new(LPIPS_EXTRACTOR_SEED, 4, vec![64, 32]);
    let clip_features = RandomProjectionClipFeatures::new(FVD_EXTRACTOR_SEED, 4, 24);
    let suite = MetricSuite {
        lpips_weights: image_features.uniform_weights(),
        image_features: &image_features,
        clip_features: &clip_features,
    };
    let report = runtime!(evaluate_protocol(&model, &windows, &eval_cfg, &suite))?;
    runtime!(report.save(&args.report_out))?;
    println!(
        "examples {}  psnr best {:.3} avg {:.3}  ssim best {:.4} avg {:.4}  lpips best {:.4} avg {:.4}  fvd {}",
        report.n_examples,
        report.psnr.best.mean,
        report.psnr.average.mean,
        report.ssim.best.mean,
        report.ssim.average.mean,
        report.lpips.best.mean,
        report.lpips.average.mean,
        report
            .fvd
            .map(|f| format!("{:.4}±{:.4}", f.mean, f.stderr))
            .unwrap_or_else(|| "n/a".into()),
    );
    println!("report written to {}", args.report_out.display());
    Ok(())
}

fn predict(args: PredictArgs, argv: &[String]) -> Result<(), CliError> {
    let format = parse_format(&args.format)?;
    let mode = match args.mode.as_str() {
        "prior" => RolloutMode::Prior,
        "posterior" => RolloutMode::Posterior,
        other => {
            return Err(CliError::Usage(format!(
                "unknown mode `{other}` (expected prior or posterior)"
            )))
        }
    };
    let outputs: Vec<String> = (0..args.n_samples)
        .map(|s| format!("sample_{s:03}.h5"))
        .collect();
    write_manifest(
        &args.out_dir,
        "predict",
        argv,
        args.seed,
        serde_json::json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "input": args.input.display().to_string(),
            "mode": args.mode,
            "context": args.context,
            "horizon": args.horizon,
            "n_samples": args.n_samples,
        }),
        outputs.clone(),
    )?;

    let ckpt = runtime!(load_checkpoint(&args.checkpoint))?;
    let model: Model = runtime!(ckpt.to_model())?;
    let traj = runtime!(load_trajectory(&args.input, format))?;
    let window = runtime!(sample_window(&traj, args.context, args.horizon, 0))?;
    let samples = runtime!(model.rollout(
        &window.context.view(),
        &window.actions.view(),
        window.states.as_ref().map(|s| s.view()).as_ref(),
        mode,
        (mode == RolloutMode::Posterior).then_some(window.targets.view()).as_ref(),
        args.n_samples,
        args.seed,
    ))?;

    // each sample becomes a loadable trajectory container: predicted frames
    // plus the actions that span them
    let horizon = window.horizon();
    let actions = window
        .actions
        .slice(ndarray::s![args.context.., ..])
        .mapv(|v| v as f32);
    for (s, name) in outputs.iter().enumerate() {
        let frames =
            crate::data::f64_to_frames(&samples.index_axis(ndarray::Axis(0), s).to_owned());
        let out = Trajectory {
            frames,
            actions: actions.clone(),
            states: None,
            meta: TrajectoryMeta {
                source: "predicted".into(),
                camera: traj.meta.camera.clone(),
                stage_labels: traj
                    .meta
                    .stage_labels
                    .as_ref()
                    .map(|l| l[args.context..args.context + horizon].to_vec()),
            },
        };
        runtime!(export_trajectory(&out, &args.out_dir.join(name), format))?;
    }
    println!(
        "wrote {} predicted rollouts ({} frames each) to {}",
        args.n_samples,
        horizon,
        args.out_dir.display()
    );
    Ok(())
}

fn decompose(args: DecomposeArgs, argv: &[String]) -> Result<(), CliError> {
    let grasp = runtime!(SemanticGrasp::new(args.grasp, args.drop, args.top))?;
    let start = args
        .start
        .unwrap_or([args.grasp[0], args.grasp[1], args.top]);
    let plan = runtime!(plan_grasp(start, &grasp, args.max_step))?;

    println!("semantic grasp: pick {:?} -> drop {:?} (top {})", args.grasp, args.drop, args.top);
    println!("{} element actions:", plan.elements.len());
    let mut at = 0usize;
    for e in &plan.elements {
        let count = plan.kinds[at..].iter().take_while(|&&k| k == e.kind).count();
        println!(
            "  {:?} -> ({:.3}, {:.3}, {:.3})  gripper {:?}  {} movement(s)",
            e.kind, e.end[0], e.end[1], e.end[2], e.gripper_command, count
        );
        for m in &plan.movements[at..at + count] {
            println!(
                "    delta ({:+.4}, {:+.4}, {:+.4})  gripper {}",
                m.delta[0], m.delta[1], m.delta[2], m.gripper
            );
        }
        at += count;
    }
    println!("total movements: {}", plan.movements.len());

    if let Some(dir) = &args.out_dir {
        write_manifest(
            dir,
            "decompose",
            argv,
            0,
            serde_json::json!({
                "grasp": args.grasp,
                "drop": args.drop,
                "top": args.top,
                "max_step": args.max_step,
                "start": start,
            }),
            vec!["plan.json".into()],
        )?;
        let plan_json = serde_json::json!({
            "elements": plan
                .elements
                .iter()
                .map(|e| serde_json::json!({
                    "kind": format!("{:?}", e.kind),
                    "start": e.start,
                    "end": e.end,
                    "gripper": format!("{:?}", e.gripper_command),
                }))
                .collect::<Vec<_>>(),
            "movements": plan
                .movements
                .iter()
                .map(|m| m.to_action_vec())
                .collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join("plan.json"),
            serde_json::to_string_pretty(&plan_json)?,
        )?;
    }
    Ok(())
}
