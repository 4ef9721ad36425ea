//! `abe`: activation-based early stopping from the command line.
//!
//! Exit codes: 0 success, 2 bad input (flags, missing or malformed files,
//! inconsistent data), 1 internal failure (including failure to write
//! outputs). Every output file is written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abe_core::divergence::{stopping_time_with, DivergenceOptions, DivergenceReport, IntervalUnit};
use abe_core::eval::{evaluate, stop_at_extremum, AccuracyCurve, CurveKind};
use abe_core::fsutil::write_atomic;
use abe_core::snapshot::{load_run, read_snapshot, SOURCE_VALID_TAG, TARGET_TAG};
use abe_core::synth::scenario::{generate_scenario, ScenarioSpec};
use abe_core::synth::toy::{toy_train, Nonlinearity, ToyError, ToyTrainSpec};
use abe_core::trajectory::{build_trajectory, fmt_f64};
use abe_core::{compute_moments, Execution, Moment};
use clap::{Args, Parser, Subcommand, ValueEnum};

const FORMATS: &str = "\
Formats:
  manifest   JSON: run_id, checkpoints (strictly increasing), layers [{id, features}],
             populations [{tag, files [{checkpoint, path}]}], optional meta.
             Paths are relative to the manifest. Tags source_valid and target are required.
  snapshot   ASNAP binary, little-endian: magic \"ABES\", u32 version (1), u64 checkpoint,
             u8 population, u32 layer count, then per layer u32 id, u32 N, u32 D and
             N*D f32 values, row-major.
  curve      CSV with header checkpoint,value; one row per checkpoint.
  report     JSON DivergenceReport: critical_layer, critical_moment (m1..m4), t_hat,
             t_valid_star, diverged, best_score, scores (best window per slice).
  trajectory CSV with header checkpoint,layer,m1,m2,m3,m4.

Environment:
  ABE_THREADS  caps worker threads (0 = one per core).";

#[derive(Parser)]
#[command(name = "abe", version, about = "Activation-based early stopping", after_help = FORMATS)]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, env = "ABE_THREADS", default_value_t = 0, global = true)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the critical slice and stopping checkpoint for one run.
    Analyze(AnalyzeArgs),
    /// Score a report against a target accuracy curve.
    Evaluate(EvaluateArgs),
    /// Print per-layer aggregated moments of one snapshot as CSV.
    Moments {
        /// ASNAP file.
        snapshot: PathBuf,
    },
    /// Generate fixture runs.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Rank,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    /// Accuracy-like, higher is better.
    Maximize,
    /// Loss-like, lower is better.
    Minimize,
}

impl From<KindArg> for CurveKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Maximize => CurveKind::Maximize,
            KindArg::Minimize => CurveKind::Minimize,
        }
    }
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("t_valid_source").required(true).args(["valid_curve", "t_valid"]))]
struct AnalyzeArgs {
    /// Run manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Validation curve CSV; its extremum gives t*_valid.
    #[arg(long)]
    valid_curve: Option<PathBuf>,
    /// Explicit t*_valid checkpoint.
    #[arg(long)]
    t_valid: Option<u64>,
    /// Whether the validation curve is maximised or minimised.
    #[arg(long, value_enum, default_value = "maximize")]
    curve_kind: KindArg,
    /// How window length is measured: checkpoint steps or raw index difference.
    #[arg(long, value_enum, default_value = "rank")]
    interval_unit: UnitArg,
    /// Report path; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write trajectory_source_valid.csv and trajectory_target.csv
    /// next to the report (or into the current directory).
    #[arg(long)]
    emit_trajectories: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Report JSON written by `abe analyze`.
    #[arg(long)]
    report: PathBuf,
    /// Target accuracy curve CSV.
    #[arg(long)]
    target_curve: PathBuf,
    #[arg(long, value_enum, default_value = "maximize")]
    curve_kind: KindArg,
    /// Summary path; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Planted-divergence scenario realised as snapshots.
    Scenario(ScenarioArgs),
    /// Train the toy network and record its snapshots.
    Toytrain(ToyArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "scenario")]
    run_id: String,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    planted_layer: Option<usize>,
    /// m1, m2, m3 or m4.
    #[arg(long)]
    planted_moment: Option<Moment>,
    #[arg(long)]
    breakpoint: Option<u64>,
    /// Noise deviation as a fraction of each slice's |slope|.
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NonlinearityArg {
    Tanh,
    Relu,
}

#[derive(Args)]
struct ToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "toytrain")]
    run_id: String,
    #[arg(long)]
    input_dim: Option<usize>,
    /// Comma-separated hidden layer widths.
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    n_classes: Option<usize>,
    /// Target blob translation in blob deviations.
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    n_target_unlabelled: Option<usize>,
    #[arg(long, value_enum)]
    nonlinearity: Option<NonlinearityArg>,
    #[arg(long)]
    class_separation: Option<f64>,
    #[arg(long)]
    blob_std: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    valid_per_class: Option<usize>,
    #[arg(long)]
    n_source_tracked: Option<usize>,
    #[arg(long)]
    target_shots: Option<usize>,
    #[arg(long)]
    target_queries_per_class: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Internal(String),
}

type CliResult<T> = Result<T, CliError>;

fn input(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Input(format!("{context}: {e}"))
}

fn err_str<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(|e| CliError::Internal(format!("writing {}: {e}", path.display())))
}

fn emit(output: Option<&Path>, text: &str) -> CliResult<()> {
    match output {
        Some(p) => write_output(p, text.as_bytes()),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Internal(format!("writing standard output: {e}"))),
    }
}

fn analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let manifest = args.manifest.display();
    let run = load_run(&args.manifest).map_err(err_str).map_err(input(format_args!("--manifest {manifest}")))?;
    for tag in [SOURCE_VALID_TAG, TARGET_TAG] {
        if !run.has_population(tag) {
            return Err(CliError::Input(format!("--manifest {manifest}: population {tag:?} is missing")));
        }
    }
    let t_valid = match (&args.valid_curve, args.t_valid) {
        (Some(path), _) => {
            let curve = AccuracyCurve::load(path, args.curve_kind.into())
                .map_err(err_str)
                .map_err(input(format_args!("--valid-curve {}", path.display())))?;
            stop_at_extremum(&curve).map_err(err_str).map_err(input(format_args!("--valid-curve {}", path.display())))?
        }
        (None, Some(t)) => t,
        (None, None) => unreachable!("clap enforces one t_valid source"),
    };
    let exec = Execution::Parallel;
    let source = build_trajectory(&run, SOURCE_VALID_TAG, exec)
        .map_err(err_str)
        .map_err(input(format_args!("--manifest {manifest}")))?;
    let target =
        build_trajectory(&run, TARGET_TAG, exec).map_err(err_str).map_err(input(format_args!("--manifest {manifest}")))?;
    let opts = DivergenceOptions {
        interval_unit: match args.interval_unit {
            UnitArg::Rank => IntervalUnit::Rank,
            UnitArg::Raw => IntervalUnit::Raw,
        },
        execution: exec,
    };
    let flag = if args.valid_curve.is_some() { "--valid-curve" } else { "--t-valid" };
    let report = stopping_time_with(&target, &source, t_valid, &opts)
        .map_err(err_str)
        .map_err(input(format_args!("{flag} (t*_valid = {t_valid})")))?;

    if args.emit_trajectories {
        let dir = match args.output.as_deref().and_then(Path::parent) {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        for traj in [&source, &target] {
            let path = dir.join(format!("trajectory_{}.csv", traj.population()));
            write_output(&path, traj.to_csv_string().as_bytes())?;
        }
    }
    emit(args.output.as_deref(), &report.to_json())
}

fn evaluate_cmd(args: &EvaluateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.report)
        .map_err(err_str)
        .map_err(input(format_args!("--report {}", args.report.display())))?;
    let report: DivergenceReport = serde_json::from_str(&text)
        .map_err(err_str)
        .map_err(input(format_args!("--report {}", args.report.display())))?;
    let curve = AccuracyCurve::load(&args.target_curve, args.curve_kind.into())
        .map_err(err_str)
        .map_err(input(format_args!("--target-curve {}", args.target_curve.display())))?;
    let summary = evaluate(&report, &curve)
        .map_err(err_str)
        .map_err(input(format_args!("--target-curve {}", args.target_curve.display())))?;
    emit(args.output.as_deref(), &summary.to_json())
}

fn moments(path: &Path) -> CliResult<()> {
    let snap = read_snapshot(path).map_err(err_str).map_err(input(path.display()))?;
    let mut out = String::from("layer,m1,m2,m3,m4\n");
    for layer in &snap.layers {
        let m = compute_moments(layer).as_array();
        out.push_str(&layer.layer_id.to_string());
        for v in m {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    emit(None, &out)
}

fn synth_scenario(args: &ScenarioArgs) -> CliResult<()> {
    let d = ScenarioSpec::default();
    let spec = ScenarioSpec {
        layers: args.layers.unwrap_or(d.layers),
        checkpoints: args.checkpoints.unwrap_or(d.checkpoints),
        planted_layer: args.planted_layer.unwrap_or(d.planted_layer),
        planted_moment: args.planted_moment.unwrap_or(d.planted_moment),
        breakpoint: args.breakpoint.unwrap_or(d.breakpoint),
        noise_sigma: args.noise_sigma.unwrap_or(d.noise_sigma),
        seed: args.seed,
        ..d
    };
    let scenario = generate_scenario(&spec).map_err(|e| CliError::Input(e.to_string()))?;
    scenario
        .write_to(&args.out, &args.run_id)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", args.out.display())))?;
    Ok(())
}

fn synth_toy(args: &ToyArgs) -> CliResult<()> {
    let d = ToyTrainSpec::default();
    let spec = ToyTrainSpec {
        input_dim: args.input_dim.unwrap_or(d.input_dim),
        hidden_dims: args.hidden_dims.clone().unwrap_or(d.hidden_dims),
        n_classes: args.n_classes.unwrap_or(d.n_classes),
        shift: args.shift.unwrap_or(d.shift),
        epochs: args.epochs.unwrap_or(d.epochs),
        learning_rate: args.learning_rate.unwrap_or(d.learning_rate),
        weight_decay: args.weight_decay.unwrap_or(d.weight_decay),
        init_scale: args.init_scale.unwrap_or(d.init_scale),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        n_target_unlabelled: args.n_target_unlabelled.unwrap_or(d.n_target_unlabelled),
        seed: args.seed,
        nonlinearity: match args.nonlinearity {
            Some(NonlinearityArg::Tanh) => Nonlinearity::Tanh,
            Some(NonlinearityArg::Relu) => Nonlinearity::Relu,
            None => d.nonlinearity,
        },
        class_separation: args.class_separation.unwrap_or(d.class_separation),
        blob_std: args.blob_std.unwrap_or(d.blob_std),
        train_per_class: args.train_per_class.unwrap_or(d.train_per_class),
        valid_per_class: args.valid_per_class.unwrap_or(d.valid_per_class),
        n_source_tracked: args.n_source_tracked.unwrap_or(d.n_source_tracked),
        target_shots: args.target_shots.unwrap_or(d.target_shots),
        target_queries_per_class: args.target_queries_per_class.unwrap_or(d.target_queries_per_class),
    };
    let run = toy_train(&spec).map_err(|e| match e {
        ToyError::Invalid(_) => CliError::Input(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    })?;
    run.write_to(&args.out, &args.run_id)
        .map_err(|e| CliError::Internal(format!("writing {}: {e}", args.out.display())))?;
    Ok(())
}

fn configure_threads(threads: usize) -> CliResult<()> {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Moments { snapshot } => moments(snapshot),
        Command::Synth(SynthCommand::Scenario(a)) => synth_scenario(a),
        Command::Synth(SynthCommand::Toytrain(a)) => synth_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
