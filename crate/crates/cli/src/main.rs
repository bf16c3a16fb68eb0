//! `ctxcrf`: learn context statistics, train a scene prior, rescore detector
//! proposals, evaluate, sweep weights, and generate synthetic benchmarks.
//!
//! Every subcommand prints exactly one JSON status line to stdout; human
//! diagnostics go to stderr. Exit codes: 0 success, 1 validation error,
//! 2 I/O error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxcrf_cli::commands::{
    cmd_evaluate, cmd_learn_pairwise, cmd_rescore, cmd_sweep, cmd_synth, cmd_train_scene,
    CliError, EvaluateOpts, LearnPairwiseOpts, RescoreOpts, SweepOpts, SynthOpts, TrainSceneOpts,
};
use ctxcrf_core::crf::UpdateRule;
use ctxcrf_core::eval::Interpolation;

fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

#[derive(Parser)]
#[command(
    name = "ctxcrf",
    version,
    about = "Contextual rescoring of object detection proposals"
)]
struct Cli {
    /// Worker threads for rescore and sweep; outputs are byte-identical at
    /// any value
    #[arg(long, global = true, default_value_t = default_threads())]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn pairwise co-occurrence statistics from annotations
    LearnPairwise(LearnPairwiseArgs),
    /// Train the logistic scene prior on scene features
    TrainScene(TrainSceneArgs),
    /// Rescore detections by mean-field inference over the context field
    Rescore(RescoreArgs),
    /// Score detections against ground truth with VOC-style AP
    Evaluate(EvaluateArgs),
    /// Grid-search the pairwise and scene weights, writing mAP per point
    Sweep(SweepArgs),
    /// Generate a seeded synthetic benchmark dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct LearnPairwiseArgs {
    /// Annotations JSONL file
    #[arg(long)]
    annotations: PathBuf,
    /// Comma-separated foreground category names, in score-column order
    #[arg(long)]
    categories: String,
    /// Additive smoothing added to every foreground cell per relation
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Output path of the pairwise model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSceneArgs {
    /// Scene features JSONL file
    #[arg(long)]
    features: PathBuf,
    /// Annotations JSONL file; its header must carry the category list
    #[arg(long)]
    annotations: PathBuf,
    /// L2 regularization strength on the weights
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// Full-batch gradient descent epochs
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Output path of the scene-prior model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpdateRuleArg {
    /// Sum neighbor beliefs over every label
    All,
    /// Omit the receiving candidate label from each neighbor sum
    ExcludeSelf,
}

impl From<UpdateRuleArg> for UpdateRule {
    fn from(arg: UpdateRuleArg) -> Self {
        match arg {
            UpdateRuleArg::All => UpdateRule::AllLabels,
            UpdateRuleArg::ExcludeSelf => UpdateRule::ExcludeSelf,
        }
    }
}

#[derive(Args)]
struct RescoreArgs {
    /// Input detections JSONL file
    #[arg(long)]
    detections: PathBuf,
    /// Pairwise model JSON from learn-pairwise
    #[arg(long)]
    pairwise: PathBuf,
    /// Scene-prior model JSON from train-scene
    #[arg(long)]
    scene_prior: PathBuf,
    /// Scene features JSONL file
    #[arg(long)]
    features: PathBuf,
    /// Pairwise term weight
    #[arg(long)]
    omega_p: f64,
    /// Scene-prior term weight
    #[arg(long)]
    omega_g: f64,
    /// Mean-field iteration cap
    #[arg(long, default_value_t = 20)]
    iters: usize,
    /// Stop once the largest marginal change falls below this
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Weight of the previous iterate in each committed update
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    /// Neighbor label aggregation rule
    #[arg(long, value_enum, default_value_t = UpdateRuleArg::All)]
    update_rule: UpdateRuleArg,
    /// At most this many proposals per image exchange messages
    #[arg(long, default_value_t = 300)]
    max_proposals: usize,
    /// Output path of the rescored detections JSONL
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InterpArg {
    /// Eleven-point interpolated average precision
    #[value(name = "11pt")]
    ElevenPoint,
    /// Area under the monotone precision envelope
    All,
}

impl From<InterpArg> for Interpolation {
    fn from(arg: InterpArg) -> Self {
        match arg {
            InterpArg::ElevenPoint => Interpolation::ElevenPoint,
            InterpArg::All => Interpolation::AllPoints,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Detections JSONL file
    #[arg(long)]
    detections: PathBuf,
    /// Annotations JSONL file
    #[arg(long)]
    annotations: PathBuf,
    /// IoU threshold for a detection to match a ground-truth box
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Average precision interpolation
    #[arg(long, value_enum, default_value_t = InterpArg::ElevenPoint)]
    interp: InterpArg,
    /// Minimum per-label score for a proposal to count as a detection
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    /// Output path of the evaluation report JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Detections JSONL file
    #[arg(long)]
    detections: PathBuf,
    /// Annotations JSONL file
    #[arg(long)]
    annotations: PathBuf,
    /// Pairwise model JSON
    #[arg(long)]
    pairwise: PathBuf,
    /// Scene-prior model JSON
    #[arg(long)]
    scene_prior: PathBuf,
    /// Scene features JSONL file
    #[arg(long)]
    features: PathBuf,
    /// Pairwise weight grid as a:b:step, endpoints inclusive
    #[arg(long)]
    omega_p_grid: String,
    /// Scene weight grid as a:b:step, endpoints inclusive
    #[arg(long)]
    omega_g_grid: String,
    /// Output path of the sweep CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic benchmark config JSON
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving detections, annotations, features, and manifest
    #[arg(long)]
    out_dir: PathBuf,
}

fn dispatch(command: Command) -> Result<serde_json::Value, CliError> {
    match command {
        Command::LearnPairwise(a) => cmd_learn_pairwise(&LearnPairwiseOpts {
            annotations: a.annotations,
            categories: a.categories,
            alpha: a.alpha,
            out: a.out,
        }),
        Command::TrainScene(a) => cmd_train_scene(&TrainSceneOpts {
            features: a.features,
            annotations: a.annotations,
            lambda: a.lambda,
            epochs: a.epochs,
            lr: a.lr,
            out: a.out,
        }),
        Command::Rescore(a) => cmd_rescore(&RescoreOpts {
            detections: a.detections,
            pairwise: a.pairwise,
            scene_prior: a.scene_prior,
            features: a.features,
            omega_p: a.omega_p,
            omega_g: a.omega_g,
            iters: a.iters,
            tol: a.tol,
            damping: a.damping,
            update_rule: a.update_rule.into(),
            max_proposals: a.max_proposals,
            out: a.out,
        }),
        Command::Evaluate(a) => cmd_evaluate(&EvaluateOpts {
            detections: a.detections,
            annotations: a.annotations,
            iou: a.iou,
            interp: a.interp.into(),
            threshold: a.threshold,
            out: a.out,
        }),
        Command::Sweep(a) => cmd_sweep(&SweepOpts {
            detections: a.detections,
            annotations: a.annotations,
            pairwise: a.pairwise,
            scene_prior: a.scene_prior,
            features: a.features,
            omega_p_grid: a.omega_p_grid,
            omega_g_grid: a.omega_g_grid,
            out: a.out,
        }),
        Command::Synth(a) => cmd_synth(&SynthOpts {
            config: a.config,
            out_dir: a.out_dir,
        }),
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version are successes; usage mistakes exit 1
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    if let Err(err) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: could not size the thread pool: {err}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(status) => {
            println!("{status}");
            0
        }
        Err(err) => {
            eprintln!("error: {err}");
            println!(
                "{}",
                serde_json::json!({ "status": "error", "error": err.to_string() })
            );
            err.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
