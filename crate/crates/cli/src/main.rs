//! `thermdet` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 input or schema error,
//! 3 verification failure.

mod plot;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use thermdet::evaluation::{evaluate_with, parse_detections, parse_ground_truth, EvalMode};
use thermdet::geometry::BoxCxcywh;
use thermdet::losses::{LossWeights, DEFAULT_TEMPERATURE};
use thermdet::matching::{brute_force, hungarian, CostMatrix, ORACLE_MAX_TARGETS};
use thermdet::synthdata::{gen_box_pairs, gen_detection_scene, gen_paired_views, SceneSpec, CLASS_NAMES, N_CLASSES};
use thermdet::trainer::{
    refine_boxes, train_contrastive, train_set_prediction, LrSchedule, TrainConfig, TrainLog,
};
use thermdet::verify::{gradcheck, LossKind, GRADCHECK_TOL};
use thermdet::Execution;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io { path: PathBuf, message: String },
    Schema(String),
    Input(String),
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Schema(_) | CliError::Input(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io { path, message } => write!(f, "io error: {}: {message}", path.display()),
            CliError::Schema(m) => write!(f, "schema error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Verification(m) => write!(f, "verification failure: {m}"),
        }
    }
}

impl From<thermdet::Error> for CliError {
    fn from(e: thermdet::Error) -> Self {
        use thermdet::Error as E;
        match e {
            E::Schema(m) => CliError::Schema(m),
            E::InvalidConfig(_) | E::InvalidSpec(_) | E::InvalidTemperature(_) | E::InvalidThreshold(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_owned(), message: e.to_string() })
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Io { path: path.to_owned(), message: e.to_string() })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

/// Writes to `out` if given, else prints.
fn emit(out: Option<&Path>, contents: &str) -> CliResult<()> {
    match out {
        Some(p) => write(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "thermdet", version, about = "Contrastive, set-prediction and detection-metric toolkit")]
struct Cli {
    /// Run every batch workload on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score COCO-format detections against ground truth.
    Eval(EvalArgs),
    /// Solve a minimum-cost assignment read from a CSV cost matrix.
    Match(MatchArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic paired views or detection scenes.
    Synth(SynthArgs),
    /// Run a training demonstration and log step, loss and metric.
    Train {
        #[command(subcommand)]
        task: TrainTask,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Ground truth: {images, annotations, categories}.
    #[arg(long)]
    gt: PathBuf,
    /// Detections: [{image_id, category_id, bbox, score}].
    #[arg(long)]
    det: PathBuf,
    /// Single IoU threshold.
    #[arg(long, default_value_t = 0.5, conflicts_with = "sweep")]
    iou: f64,
    /// Average over thresholds 0.50:0.05:0.95.
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// CSV with one row per query and one column per target, no header.
    #[arg(long)]
    cost: PathBuf,
    /// Also solve by exhaustive search and fail on any cost mismatch.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum)]
    loss: LossArg,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, env = "THERMDET_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GRADCHECK_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Ciou,
    Contrastive,
    Hungarian,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ciou => LossKind::Ciou,
            LossArg::Contrastive => LossKind::Contrastive,
            LossArg::Hungarian => LossKind::Hungarian,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Pairs,
    Scenes,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, env = "THERMDET_SEED", default_value_t = 0)]
    seed: u64,
    /// Paired scenes to draw (pairs).
    #[arg(long, default_value_t = 64)]
    n_scenes: usize,
    /// Latent and view dimension (pairs).
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// View noise scale (pairs).
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Fraction of view-map rows shared by both views (pairs).
    #[arg(long, default_value_t = 0.0)]
    shared_fraction: f64,
    /// Objects per scene (scenes).
    #[arg(long, default_value_t = 3)]
    objects: usize,
    /// Number of scenes; scene i uses seed + i (scenes).
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CommonTrain {
    /// Defaults: 500 (contrastive), 2000 (boxes), 5000 (setpred).
    #[arg(long)]
    steps: Option<usize>,
    /// Defaults: 0.05 (contrastive), 0.01 (boxes, setpred).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    schedule: ScheduleArg,
    #[arg(long, env = "THERMDET_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long, default_value_t = LossWeights::default().lambda_iou)]
    lambda_iou: f64,
    #[arg(long, default_value_t = LossWeights::default().lambda_l1)]
    lambda_l1: f64,
    /// Metrics CSV (step,loss,metric); printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss and metric curves as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Constant,
    Cosine,
}

#[derive(Subcommand, Debug)]
enum TrainTask {
    /// Linear encoder on paired views; metric is top-1 retrieval accuracy.
    Contrastive {
        #[command(flatten)]
        common: CommonTrain,
        #[arg(long, default_value_t = 64)]
        n_scenes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
        tau: f64,
        #[arg(long, default_value_t = thermdet::trainer::DEFAULT_PROJECTION_DIM)]
        projection_dim: usize,
    },
    /// Direct box refinement; metric is mean IoU.
    Boxes {
        #[command(flatten)]
        common: CommonTrain,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Direct query fitting on one scene; metric is mAP at IoU 0.5.
    Setpred {
        #[command(flatten)]
        common: CommonTrain,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 8)]
        queries: usize,
        #[arg(long, default_value_t = TrainConfig::set_prediction().class_lr_scale)]
        class_lr_scale: f64,
    },
}

fn run_eval(a: &EvalArgs, exec: Execution) -> CliResult<()> {
    let gts = parse_ground_truth(&read(&a.gt)?)
        .map_err(|e| CliError::Schema(format!("{}: {}", a.gt.display(), strip_schema(e))))?;
    let dets = parse_detections(&read(&a.det)?)
        .map_err(|e| CliError::Schema(format!("{}: {}", a.det.display(), strip_schema(e))))?;
    let mode = if a.sweep { EvalMode::Sweep } else { EvalMode::Single(a.iou) };
    let report = evaluate_with(&dets, &gts, mode, exec)?;
    emit(a.out.as_deref(), &to_json(&report))
}

fn strip_schema(e: thermdet::Error) -> String {
    match e {
        thermdet::Error::Schema(m) => m,
        other => other.to_string(),
    }
}

fn read_cost_csv(path: &Path) -> CliResult<CostMatrix> {
    let text = read(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().map_err(|_| {
                    CliError::Schema(format!("{}: row {} column {}: '{field}' is not a number", path.display(), r + 1, c + 1))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Schema(format!("{}: empty cost matrix", path.display())));
    }
    CostMatrix::from_rows(&rows).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct MatchReport {
    pairs: Vec<thermdet::matching::Pair>,
    total_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_total_cost: Option<f64>,
}

fn run_match(a: &MatchArgs) -> CliResult<()> {
    let costs = read_cost_csv(&a.cost)?;
    let best = hungarian(&costs)?;
    let mut report = MatchReport { pairs: best.pairs.clone(), total_cost: best.total_cost, oracle_total_cost: None };
    if a.oracle {
        if costs.n_targets() > ORACLE_MAX_TARGETS {
            return Err(CliError::Usage(format!(
                "--oracle supports at most {ORACLE_MAX_TARGETS} targets, matrix has {}",
                costs.n_targets()
            )));
        }
        let slow = brute_force(&costs)?;
        report.oracle_total_cost = Some(slow.total_cost);
        if slow.total_cost != best.total_cost {
            emit(a.out.as_deref(), &to_json(&report))?;
            return Err(CliError::Verification(format!(
                "hungarian cost {} differs from exhaustive minimum {}",
                best.total_cost, slow.total_cost
            )));
        }
    }
    emit(a.out.as_deref(), &to_json(&report))
}

fn run_gradcheck(a: &GradcheckArgs, exec: Execution) -> CliResult<()> {
    let summary = gradcheck(a.loss.into(), a.trials, a.seed, a.tol, exec)?;
    let json = to_json(&summary);
    if let Some(p) = &a.out {
        write(p, &json)?;
    }
    print!("{json}");
    if summary.passed() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} of {} {} trials exceed tolerance {:e} (max relative error {:e})",
            summary.failures.len(),
            summary.trials,
            summary.loss,
            summary.tol,
            summary.max_rel_err
        )))
    }
}

#[derive(Serialize)]
struct PairsOutput {
    spec: SceneSpec,
    scenes: Vec<thermdet::synthdata::PairedScene>,
}

#[derive(Serialize)]
struct ScenesOutput {
    seed: u64,
    class_names: [&'static str; N_CLASSES],
    scenes: Vec<thermdet::synthdata::DetectionScene>,
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let json = match a.kind {
        SynthKind::Pairs => {
            let spec = SceneSpec {
                n_scenes: a.n_scenes,
                latent_dim: a.dim,
                view_noise_sigma: a.sigma,
                seed: a.seed,
                shared_fraction: a.shared_fraction,
            };
            to_json(&PairsOutput { spec, scenes: gen_paired_views(&spec)? })
        }
        SynthKind::Scenes => {
            let scenes = (0..a.count as u64)
                .map(|i| gen_detection_scene(a.objects, a.seed.wrapping_add(i)))
                .collect::<Result<Vec<_>, _>>()?;
            to_json(&ScenesOutput { seed: a.seed, class_names: CLASS_NAMES, scenes })
        }
    };
    emit(a.out.as_deref(), &json)
}

fn train_config(c: &CommonTrain, preset: TrainConfig, exec: Execution) -> TrainConfig {
    TrainConfig {
        steps: c.steps.unwrap_or(preset.steps),
        learning_rate: c.lr.unwrap_or(preset.learning_rate),
        schedule: match c.schedule {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        },
        seed: c.seed,
        log_every: c.log_every.unwrap_or(preset.log_every),
        weights: LossWeights { lambda_iou: c.lambda_iou, lambda_l1: c.lambda_l1, ..LossWeights::default() },
        exec,
        ..preset
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    task: &'a str,
    steps: usize,
    final_loss: f64,
    final_metric: f64,
    metric: &'a str,
}

fn run_train(task: &TrainTask, exec: Execution) -> CliResult<()> {
    let (name, metric, common, log): (&str, &str, &CommonTrain, TrainLog) = match task {
        TrainTask::Contrastive { common, n_scenes, dim, sigma, tau, projection_dim } => {
            let spec = SceneSpec {
                n_scenes: *n_scenes,
                latent_dim: *dim,
                view_noise_sigma: *sigma,
                seed: common.seed,
                ..SceneSpec::default()
            };
            let data = gen_paired_views(&spec)?;
            let cfg = TrainConfig {
                temperature: *tau,
                projection_dim: *projection_dim,
                ..train_config(common, TrainConfig::contrastive(), exec)
            };
            ("contrastive", "retrieval_top1", common, train_contrastive(&data, &cfg)?.1)
        }
        TrainTask::Boxes { common, trials } => {
            let pairs = gen_box_pairs(*trials, common.seed);
            let init: Vec<BoxCxcywh> = pairs.iter().map(|p| p.0).collect();
            let targets: Vec<BoxCxcywh> = pairs.iter().map(|p| p.1).collect();
            let cfg = train_config(common, TrainConfig::boxes(), exec);
            ("boxes", "mean_iou", common, refine_boxes(&init, &targets, &cfg)?.1)
        }
        TrainTask::Setpred { common, objects, queries, class_lr_scale } => {
            let scene = gen_detection_scene(*objects, common.seed)?;
            let cfg = TrainConfig {
                class_lr_scale: *class_lr_scale,
                ..train_config(common, TrainConfig::set_prediction(), exec)
            };
            ("setpred", "map_50", common, train_set_prediction(&scene, N_CLASSES, *queries, &cfg)?.1)
        }
    };
    let last = *log.last().expect("step 0 is always logged");
    if let Some(p) = &common.plot {
        write(p, &plot::render(&log, &format!("{name} training"), metric))?;
    }
    match &common.out {
        Some(p) => {
            write(p, &log.to_csv())?;
            print!(
                "{}",
                to_json(&TrainSummary { task: name, steps: last.step, final_loss: last.loss, final_metric: last.metric, metric })
            );
            Ok(())
        }
        None => emit(None, &log.to_csv()),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match &cli.command {
        Command::Eval(a) => run_eval(a, exec),
        Command::Match(a) => run_match(a),
        Command::Gradcheck(a) => run_gradcheck(a, exec),
        Command::Synth(a) => run_synth(a),
        Command::Train { task } => run_train(task, exec),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("usage error: {}", rendered.strip_prefix("error: ").unwrap_or(&rendered));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
