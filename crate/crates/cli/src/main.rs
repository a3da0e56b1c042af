use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use taskclip_core::calibration::{calibrate_tasks, mean_threshold, thresholds_of};
use taskclip_core::data::{
    check_task_refs, load_predictions, load_scenes, load_tasks, load_thresholds, save_json,
    save_predictions, save_report, save_thresholds,
};
use taskclip_core::gradcheck::{check_all, gradcheck_config, GradCheckOptions};
use taskclip_core::pipeline::score_all;
use taskclip_core::training::{train_with, write_loss_csv};
use taskclip_core::*;

#[derive(Parser)]
#[command(name = "taskclip", version, about = "Task-conditioned object selection")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted task structure.
    Synth(SynthArgs),
    /// Train the recalibration stack and score head.
    Train(TrainArgs),
    /// Score scenes and write per-box decisions.
    Infer(InferArgs),
    /// Pick per-task thresholds by g-means on a labelled split.
    Calibrate(CalibrateArgs),
    /// Compute per-task AP and mAP for a predictions file.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of every block.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    scenes_per_task: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_words: Option<usize>,
    #[arg(long)]
    positive_rate: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    /// Published schedule: low learning rate, 20 epochs.
    Default,
    /// Elevated learning rate for small synthetic runs.
    Synthetic,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    score_dim: Option<usize>,
    #[arg(long)]
    adapter_hidden: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Training scenes (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Task files or directories of task files.
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Per-epoch loss CSV; defaults to loss.csv next to the checkpoint.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_shuffle: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value = "preds.jsonl")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Per-task thresholds; these win over `--threshold`.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Propagate positives to confident boxes of the same class.
    #[arg(long)]
    grouping: bool,
    #[arg(long, default_value_t = DEFAULT_GROUP_CONF)]
    group_conf: f64,
}

#[derive(Args, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labelled validation scenes.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[arg(long, default_value = "thresholds.json")]
    out: PathBuf,
    /// Full sweep, TPR/FPR and the mean threshold.
    #[arg(long)]
    details: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    preds: PathBuf,
    /// Labelled scenes the predictions were made on.
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, default_value_t = evaluation::DEFAULT_IOU_THRESHOLD)]
    iou: f64,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    boxes: usize,
    #[arg(long, default_value_t = 2)]
    global_tokens: usize,
}

enum Failure {
    Core(Error),
    Usage(String),
    GradCheck(Value),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) => match e {
                Error::Io { .. } => 3,
                Error::Parse { .. }
                | Error::Schema { .. }
                | Error::Checkpoint(_)
                | Error::Config(_)
                | Error::Input(_)
                | Error::Data(_) => 4,
                Error::NonFiniteLoss { .. } => 5,
                Error::Calibration(_) | Error::Evaluation(_) => 6,
                Error::Tensor(_) => 1,
            },
            Self::Usage(_) => 4,
            Self::GradCheck(_) => 7,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Core(e) => match e {
                Error::Io { .. } => "io",
                Error::Parse { .. } => "parse",
                Error::Schema { .. } => "schema",
                Error::Checkpoint(_) => "checkpoint",
                Error::Config(_) => "config",
                Error::Input(_) => "input",
                Error::Data(_) => "data",
                Error::NonFiniteLoss { .. } => "non_finite_loss",
                Error::Calibration(_) => "calibration",
                Error::Evaluation(_) => "evaluation",
                Error::Tensor(_) => "internal",
            },
            Self::Usage(_) => "config",
            Self::GradCheck(_) => "gradcheck",
        }
    }

    fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind(), "exit_code": self.exit_code() });
        match self {
            Self::Core(e) => v["message"] = json!(e.to_string()),
            Self::Usage(m) => v["message"] = json!(m),
            Self::GradCheck(detail) => {
                v["message"] = json!("gradient check failed");
                v["detail"] = detail.clone();
            }
        }
        v
    }
}

type Outcome = std::result::Result<Value, Failure>;

fn print_line(v: &Value) {
    println!("{}", serde_json::to_string(v).expect("json values always serialize"));
}

fn configure_threads() -> std::result::Result<Option<usize>, Failure> {
    let Ok(raw) = std::env::var("TASKCLIP_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("TASKCLIP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(Some(n))
}

fn cmd_synth(args: &SynthArgs) -> Outcome {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        seed: args.seed,
        n_tasks: args.n_tasks.unwrap_or(d.n_tasks),
        scenes_per_task: args.scenes_per_task.unwrap_or(d.scenes_per_task),
        embed_dim: args.embed_dim.unwrap_or(d.embed_dim),
        num_words: args.num_words.unwrap_or(d.num_words),
        positive_rate: args.positive_rate.unwrap_or(d.positive_rate),
        noise_std: args.noise_std.unwrap_or(d.noise_std),
        ..d
    };
    print_line(&json!({ "command": "synth", "out": args.out, "synth": cfg }));
    let files = generate(&cfg, &args.out)?;
    Ok(json!({
        "train": files.train,
        "val": files.val,
        "test": files.test,
        "tasks": files.tasks_dir,
    }))
}

fn load_inputs(scenes: &Path, tasks: &[PathBuf]) -> Result<(Vec<SceneRecord>, TaskSet)> {
    let scenes = load_scenes(scenes)?;
    let tasks = load_tasks(tasks)?;
    check_task_refs(&scenes, &tasks)?;
    Ok((scenes, tasks))
}

fn model_config(args: &ModelArgs, scenes: &[SceneRecord], tasks: &TaskSet) -> Result<ModelConfig> {
    let dim = scenes
        .iter()
        .find_map(|s| s.embed_dim())
        .ok_or_else(|| Error::Input("training split has no boxes".into()))?;
    let mut words = tasks.values().map(|t| t.num_words());
    let num_words = words.next().ok_or_else(|| Error::Input("no tasks given".into()))?;
    if words.any(|w| w != num_words) {
        return Err(Error::Input("all tasks must have the same number of attribute words".into()));
    }
    let d = ModelConfig::for_embed_dim(dim);
    Ok(ModelConfig {
        num_words,
        layers: args.layers.unwrap_or(d.layers),
        heads: args.heads.unwrap_or(d.heads),
        score_dim: args.score_dim.unwrap_or(d.score_dim),
        adapter_hidden: args.adapter_hidden.unwrap_or(d.adapter_hidden),
        ffn_dim: args.ffn_dim.unwrap_or(d.ffn_dim),
        alpha: args.alpha.unwrap_or(d.alpha),
        beta: args.beta.unwrap_or(d.beta),
        ..d
    })
}

fn cmd_train(args: &TrainArgs, verbose: bool) -> Outcome {
    let (scenes, tasks) = load_inputs(&args.train, &args.tasks)?;
    let cfg = model_config(&args.model, &scenes, &tasks)?;
    let base = match args.preset {
        Preset::Default => TrainConfig::default(),
        Preset::Synthetic => TrainConfig::synthetic(),
    };
    let tcfg = TrainConfig {
        epochs: args.epochs.unwrap_or(base.epochs),
        learning_rate: args.lr.unwrap_or(base.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(base.weight_decay),
        seed: args.seed.unwrap_or(base.seed),
        shuffle: base.shuffle && !args.no_shuffle,
        ..base
    };
    let loss_csv = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("loss.csv"));
    print_line(&json!({
        "command": "train",
        "train": args.train,
        "tasks": args.tasks,
        "out": args.out,
        "loss_csv": loss_csv,
        "preset": args.preset,
        "model": cfg,
        "training": tcfg,
    }));
    let out = train_with::<f32>(&scenes, &tasks, cfg, &tcfg, |epoch, loss| {
        if verbose {
            eprintln!("epoch {epoch}: mean loss {loss:.6}");
        }
    })?;
    save_checkpoint(&out.model, &out.meta, &args.out)?;
    write_loss_csv(&loss_csv, &out.loss_history)?;
    Ok(json!({
        "checkpoint": args.out,
        "loss_csv": loss_csv,
        "epochs": out.meta.epochs,
        "final_loss": out.meta.final_loss,
        "parameters": out.model.num_parameters(),
    }))
}

fn cmd_infer(args: &InferArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.model)?;
    let (scenes, tasks) = load_inputs(&args.scenes, &args.tasks)?;
    let task_thresholds = match &args.thresholds {
        Some(p) => load_thresholds(p)?,
        None => Thresholds::new(),
    };
    let opts = InferenceOptions {
        threshold: args.threshold,
        task_thresholds,
        grouping: GroupingConfig {
            enabled: args.grouping,
            beta_g: args.group_conf,
        },
    };
    print_line(&json!({
        "command": "infer",
        "model": args.model,
        "model_config": ckpt.model.config,
        "scenes": args.scenes,
        "tasks": args.tasks,
        "out": args.out,
        "threshold": opts.threshold,
        "task_thresholds": opts.task_thresholds,
        "grouping": opts.grouping,
    }));
    let preds = predict_all(&ckpt.model, &scenes, &tasks, &opts)?;
    save_predictions(&args.out, &preds)?;
    let boxes: usize = preds.iter().map(|p| p.boxes.len()).sum();
    let selected: usize = preds
        .iter()
        .flat_map(|p| &p.boxes)
        .filter(|b| b.decision == 1)
        .count();
    Ok(json!({ "predictions": args.out, "scenes": preds.len(), "boxes": boxes, "selected": selected }))
}

fn cmd_calibrate(args: &CalibrateArgs) -> Outcome {
    let ckpt = load_checkpoint(&args.model)?;
    let (scenes, tasks) = load_inputs(&args.scenes, &args.tasks)?;
    print_line(&json!({
        "command": "calibrate",
        "model": args.model,
        "model_config": ckpt.model.config,
        "scenes": args.scenes,
        "tasks": args.tasks,
        "out": args.out,
        "details": args.details,
    }));
    let scores = score_all(&ckpt.model, &scenes, &tasks)?;
    let results = calibrate_tasks(&scenes, &scores)?;
    let thresholds = thresholds_of(&results);
    save_thresholds(&args.out, &thresholds)?;
    let mean = mean_threshold(&thresholds);
    if let Some(path) = &args.details {
        save_json(path, &json!({ "tasks": results, "mean_threshold": mean }))?;
    }
    Ok(json!({ "thresholds": thresholds, "mean_threshold": mean }))
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    print_line(&json!({
        "command": "eval",
        "preds": args.preds,
        "scenes": args.scenes,
        "out": args.out,
        "iou": args.iou,
    }));
    let preds = load_predictions(&args.preds)?;
    let scenes = load_scenes(&args.scenes)?;
    let report = evaluate(&preds, &scenes, args.iou)?;
    save_report(&args.out, &report)?;
    Ok(serde_json::to_value(&report).expect("reports always serialize"))
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Outcome {
    let cfg = gradcheck_config();
    let opts = GradCheckOptions {
        seed: args.seed,
        boxes: args.boxes,
        global_tokens: args.global_tokens,
        ..GradCheckOptions::default()
    };
    print_line(&json!({
        "command": "gradcheck",
        "model": cfg,
        "boxes": opts.boxes,
        "global_tokens": opts.global_tokens,
        "seed": opts.seed,
        "step": opts.step,
    }));
    let checks = check_all(&cfg, &opts)?;
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed());
    let summary = json!({ "passed": passed, "worst_rel_error": worst, "blocks": checks });
    if passed {
        Ok(summary)
    } else {
        Err(Failure::GradCheck(summary))
    }
}

fn run(cli: &Cli) -> Outcome {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, cli.verbose),
        Command::Infer(a) => cmd_infer(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(result) => {
            print_line(&json!({ "result": result }));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f.to_json()).expect("json values always serialize"));
            ExitCode::from(f.exit_code())
        }
    }
}
