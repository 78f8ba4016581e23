//! Command-line front end: generate layered workloads, compile schedules
//! through the optimization pipeline, simulate them, and print comparison
//! reports.
//!
//! Exit codes: 0 success, 2 validation or parse failure, 3 memory
//! infeasibility.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use shardplan::model::{
    load_cluster, load_model, load_pipeline, load_schedule, model_from_graph, parse_size,
    save_model, save_schedule, ModelError, PipelineFile, ScheduleBundle,
};
use shardplan::pipeline::{run_pipeline, PassKind, PipelineConfig, PipelineError, StageReport};
use shardplan::sim::{memory_trace_csv, simulate, timeline_csv, SimOptions};
use shardplan::workload::{generate, WorkloadSpec};
use shardplan::{validate, NodeKind};

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "shardplan",
    version,
    about = "Schedule compiler and simulator for fully sharded training graphs",
    long_about = "Compiles computation-graph schedules through memory-aware optimization \
                  passes (shard, prefetch, unshard, offload) and verifies them with a \
                  deterministic three-stream simulator.\n\nExit codes: 0 success, \
                  2 validation/parse failure, 3 memory infeasibility."
)]
struct Cli {
    /// Emit machine-readable JSON diagnostics on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a layered forward/backward workload model.
    Gen(GenArgs),
    /// Run optimization passes over a model and write the compiled schedule.
    Compile(CompileArgs),
    /// Simulate a compiled schedule (or a raw model) and dump traces.
    Simulate(SimulateArgs),
    /// Print a comparison table from a compile run's stage reports.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 4)]
    layers: u32,
    /// Forward compute per layer, microseconds.
    #[arg(long, default_value_t = 10_000)]
    compute_us: u64,
    /// Backward compute per layer, microseconds.
    #[arg(long, default_value_t = 10_000)]
    backward_us: u64,
    /// Per-layer parameter size; accepts unit suffixes (KB/MB/GB, powers of 1024).
    #[arg(long, default_value = "1MB")]
    param_bytes: String,
    /// Activation bytes retained per forward layer.
    #[arg(long, default_value = "100KB")]
    activation_bytes: String,
    /// Scratch bytes held while a compute node runs.
    #[arg(long, default_value = "0")]
    transient_bytes: String,
    #[arg(long, default_value_t = 1)]
    accum_steps: u32,
    /// Optimizer state size as a multiple of total parameter bytes.
    #[arg(long, default_value_t = 2.0)]
    opt_multiplier: f64,
    /// Number of optimizer-state fragments.
    #[arg(long, default_value_t = 32)]
    fragments: u32,
    #[arg(long, default_value_t = 1_000)]
    optimizer_step_us: u64,
    /// Output model path (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CompileArgs {
    /// Model file(s); with several, each compiles into its own subdirectory.
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    /// Cluster + cost configuration (JSON or TOML).
    #[arg(long)]
    cluster: PathBuf,
    /// Pipeline configuration file (JSON or TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated pass list out of shard,prefetch,unshard,offload.
    #[arg(long)]
    passes: Option<String>,
    /// Re-check the prefetch memory bound at every crossed operator.
    #[arg(long)]
    strict: bool,
    /// Simulated training iterations before the offload group.
    #[arg(long)]
    warmup: Option<u32>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for multiple models (requires the parallel build).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Compiled schedule bundle from `compile`.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Raw model file, simulated in file order (ignored when --schedule is given).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    cluster: PathBuf,
    /// Treat optimizer state as resident at iteration start.
    #[arg(long)]
    optimizer_resident: bool,
    /// Output directory for report.json, timeline.csv, memory_trace.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// stage_reports.json produced by `compile`.
    #[arg(long)]
    reports: PathBuf,
    /// Where to write the table as JSON (defaults next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    exit: u8,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    fn infeasible(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_INFEASIBLE,
            message: message.into(),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::validation(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_infeasible() {
            Failure::infeasible(e.to_string())
        } else {
            Failure::validation(e.to_string())
        }
    }
}

fn emit_diag(json: bool, level: &str, message: &str) {
    if json {
        eprintln!(
            "{}",
            serde_json::json!({"level": level, "message": message})
        );
    } else {
        eprintln!("{level}: {message}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Compile(args) => cmd_compile(args, json),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            emit_diag(json, "error", &f.message);
            ExitCode::from(f.exit)
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), Failure> {
    let spec = WorkloadSpec {
        layers: args.layers,
        compute_us: args.compute_us,
        backward_us: args.backward_us,
        param_bytes: parse_size(&args.param_bytes).map_err(Failure::validation)?,
        param_bytes_per_layer: None,
        activation_bytes: parse_size(&args.activation_bytes).map_err(Failure::validation)?,
        transient_bytes: parse_size(&args.transient_bytes).map_err(Failure::validation)?,
        accumulation_steps: args.accum_steps,
        optimizer_multiplier: args.opt_multiplier,
        fragment_count: args.fragments,
        optimizer_step_us: args.optimizer_step_us,
        shard_count: 1, // model files carry no shard count; it binds at load
    };
    if spec.layers == 0 {
        return Err(Failure::validation("--layers must be >= 1"));
    }
    let (graph, schedule) = generate(&spec);
    let model = model_from_graph(&graph, &schedule)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::validation(format!("{}: {e}", dir.display())))?;
        }
    }
    save_model(&model, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn parse_passes(s: &str) -> Result<Vec<PassKind>, Failure> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<PassKind>().map_err(Failure::validation))
        .collect()
}

fn cmd_compile(args: CompileArgs, json: bool) -> Result<(), Failure> {
    let file = match &args.config {
        Some(path) => load_pipeline(path)?,
        None => PipelineFile::default(),
    };
    let passes = match &args.passes {
        Some(flag) => parse_passes(flag)?,
        None => parse_passes(&file.passes.join(","))?,
    };
    if passes.is_empty() {
        return Err(Failure::validation("empty pass list"));
    }
    let (cluster, cost) = load_cluster(&args.cluster)?;
    let config = PipelineConfig {
        passes,
        warmup_iterations: args.warmup.unwrap_or(file.warmup_iterations),
        strict_prefetch: args.strict || file.strict_prefetch,
    };
    let logs = LogNames {
        prefetch: file.prefetch_log,
        unshard: file.unshard_log,
        offload: file.offload_log,
    };

    let multiple = args.model.len() > 1;
    let jobs: Vec<(PathBuf, PathBuf)> = args
        .model
        .iter()
        .map(|m| {
            let out_dir = if multiple {
                let stem = m
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".to_string());
                args.out.join(stem)
            } else {
                args.out.clone()
            };
            (m.clone(), out_dir)
        })
        .collect();

    let run_one = |(model_path, out_dir): (PathBuf, PathBuf)| -> Result<String, Failure> {
        compile_one(&model_path, &out_dir, &cluster, &cost, &config, &logs, json)
            .map(|()| format!("compiled {} -> {}", model_path.display(), out_dir.display()))
            .map_err(|f| Failure {
                exit: f.exit,
                message: format!("{}: {}", model_path.display(), f.message),
            })
    };

    let results = run_jobs(jobs, args.jobs, json, run_one);
    let mut failed: Option<Failure> = None;
    for r in results {
        match r {
            Ok(line) => println!("{line}"),
            Err(f) => {
                emit_diag(json, "error", &f.message);
                let worst = match &failed {
                    Some(prev) => prev.exit.max(f.exit),
                    None => f.exit,
                };
                failed = Some(Failure {
                    exit: worst,
                    message: f.message,
                });
            }
        }
    }
    match failed {
        Some(f) => Err(Failure {
            exit: f.exit,
            message: "one or more models failed".into(),
        }),
        None => Ok(()),
    }
}

#[cfg(feature = "parallel")]
fn run_jobs<F>(
    jobs: Vec<(PathBuf, PathBuf)>,
    threads: Option<usize>,
    json: bool,
    run_one: F,
) -> Vec<Result<String, Failure>>
where
    F: Fn((PathBuf, PathBuf)) -> Result<String, Failure> + Send + Sync,
{
    let _ = json;
    match threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool construction");
            pool.install(|| shardplan::par::map_grid(jobs, run_one))
        }
        _ => shardplan::par::map_grid(jobs, run_one),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<F>(
    jobs: Vec<(PathBuf, PathBuf)>,
    threads: Option<usize>,
    json: bool,
    run_one: F,
) -> Vec<Result<String, Failure>>
where
    F: Fn((PathBuf, PathBuf)) -> Result<String, Failure> + Send + Sync,
{
    if threads.is_some() {
        emit_diag(
            json,
            "warning",
            "--jobs ignored: built without the parallel feature",
        );
    }
    jobs.into_iter().map(run_one).collect()
}

struct LogNames {
    prefetch: String,
    unshard: String,
    offload: String,
}

#[allow(clippy::too_many_arguments)]
fn compile_one(
    model_path: &Path,
    out_dir: &Path,
    cluster: &shardplan::ClusterConfig,
    cost: &shardplan::CostModel,
    config: &PipelineConfig,
    logs: &LogNames,
    json: bool,
) -> Result<(), Failure> {
    let (graph, schedule) = load_model(model_path, cluster.device_count)?;
    let violations = validate(&graph, &schedule);
    if !violations.is_empty() {
        let mut msg = format!("{} schedule violation(s):", violations.len());
        for v in violations.iter().take(10) {
            let _ = write!(msg, "\n  {v}");
        }
        return Err(Failure::validation(msg));
    }

    let outcome = run_pipeline(&graph, &schedule, cluster, cost, config)?;
    for w in &outcome.warnings {
        emit_diag(json, "warning", w);
    }

    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::validation(format!("{}: {e}", out_dir.display())))?;
    let bundle = ScheduleBundle {
        graph: outcome.graph.clone(),
        schedule: outcome.schedule.clone(),
    };
    save_schedule(&bundle, &out_dir.join("schedule.json"))?;
    write_json(&out_dir.join("stage_reports.json"), &outcome.stages)?;
    write_jsonl(&out_dir.join(&logs.prefetch), &outcome.prefetch_decisions)?;
    write_jsonl(&out_dir.join(&logs.unshard), &outcome.unshard_decisions)?;
    write_jsonl(&out_dir.join(&logs.offload), &outcome.offload_decisions)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), Failure> {
    let mut text = String::new();
    for item in items {
        text.push_str(
            &serde_json::to_string(item).map_err(|e| Failure::validation(e.to_string()))?,
        );
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let (cluster, cost) = load_cluster(&args.cluster)?;
    let (graph, schedule) = match (&args.schedule, &args.model) {
        (Some(s), _) => {
            let bundle = load_schedule(s)?;
            (bundle.graph, bundle.schedule)
        }
        (None, Some(m)) => load_model(m, cluster.device_count)?,
        (None, None) => {
            return Err(Failure::validation("provide --schedule or --model"));
        }
    };
    let violations = validate(&graph, &schedule);
    if !violations.is_empty() {
        return Err(Failure::validation(format!(
            "{} schedule violation(s), first: {}",
            violations.len(),
            violations[0]
        )));
    }
    let opts = SimOptions {
        optimizer_resident: args.optimizer_resident,
    };
    let report = simulate(&graph, &schedule, &cost, &cluster, opts)
        .map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::validation(format!("{}: {e}", args.out.display())))?;
    write_json(&args.out.join("report.json"), &report)?;
    std::fs::write(args.out.join("timeline.csv"), timeline_csv(&report))
        .map_err(|e| Failure::validation(e.to_string()))?;
    std::fs::write(args.out.join("memory_trace.csv"), memory_trace_csv(&report))
        .map_err(|e| Failure::validation(e.to_string()))?;
    println!(
        "iteration_time_us={} peak_memory_bytes={} overlap={:.3}",
        report.iteration_time_us, report.peak_memory_bytes, report.overlap_fraction
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct ReportRow {
    stage: String,
    optimizer_resident: bool,
    iteration_time_us: u64,
    peak_memory_bytes: u64,
    gather_count: usize,
    collective_bytes: u64,
    overlap_fraction: f64,
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.reports)
        .map_err(|e| Failure::validation(format!("{}: {e}", args.reports.display())))?;
    let stages: Vec<StageReport> =
        serde_json::from_str(&text).map_err(|e| Failure::validation(e.to_string()))?;
    let rows: Vec<ReportRow> = stages
        .iter()
        .map(|s| ReportRow {
            stage: s.stage.clone(),
            optimizer_resident: s.optimizer_resident,
            iteration_time_us: s.report.iteration_time_us,
            peak_memory_bytes: s.report.peak_memory_bytes,
            gather_count: s
                .report
                .timeline
                .iter()
                .filter(|e| e.kind == NodeKind::AllGather)
                .count(),
            collective_bytes: s.report.total_collective_bytes,
            overlap_fraction: s.report.overlap_fraction,
        })
        .collect();

    println!(
        "{:<18} {:>16} {:>16} {:>9} {:>18} {:>9}",
        "stage", "iter_time_us", "peak_bytes", "gathers", "collective_bytes", "overlap"
    );
    for r in &rows {
        println!(
            "{:<18} {:>16} {:>16} {:>9} {:>18} {:>9.3}",
            r.stage,
            r.iteration_time_us,
            r.peak_memory_bytes,
            r.gather_count,
            r.collective_bytes,
            r.overlap_fraction
        );
    }
    let out = args
        .out
        .unwrap_or_else(|| args.reports.with_file_name("report.json"));
    write_json(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
