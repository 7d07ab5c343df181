//! Benchmark harness: runs problem suites and writes one record per solve.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rlbfgsb::geometry::random_rotation;
use rlbfgsb::problems::{
    bss_problem, cpc_problem, load_class_csv, synth_cpc, Benchmark, BenchmarkProblem, CpcInstance, SynthBss,
};
use rlbfgsb::{solve, Counting, Problem, ProductPoint, SolverOptions, Termination};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rlbfgsb-bench", version, about = "Run rlbfgsb benchmark suites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve every problem in a suite and write the results.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Suite {
    Euclidean,
    Bss,
    Cpc,
    All,
}

impl Suite {
    fn as_str(self) -> &'static str {
        match self {
            Suite::Euclidean => "euclidean",
            Suite::Bss => "bss",
            Suite::Cpc => "cpc",
            Suite::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Suite to run.
    #[arg(value_enum)]
    pub suite: Option<Suite>,
    /// Suite to run (alternative to the positional argument).
    #[arg(long = "suite", value_enum, id = "suite_flag", conflicts_with = "suite")]
    pub suite_flag: Option<Suite>,
    /// L-BFGS memory size.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub mu: u64,
    /// Projected-gradient norm tolerance.
    #[arg(long = "pg-tol", default_value_t = 1e-6)]
    pub pg_tol: f64,
    #[arg(long = "max-iters", default_value_t = 1000)]
    pub max_iters: usize,
    /// Random instances per synthetic suite.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    /// Base seed; instance i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Class-labelled CSV to use for the CPC suite instead of synthetic data.
    #[arg(long, requires = "class_column")]
    pub csv: Option<PathBuf>,
    /// Name of the class column in `--csv`.
    #[arg(long = "class-column", alias = "class")]
    pub class_column: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// Leave `time_ms` empty so repeated runs produce identical output.
    #[arg(long)]
    pub omit_timing: bool,
}

/// One solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub problem: String,
    pub seed: u64,
    pub time_ms: Option<f64>,
    pub objective_calls: usize,
    pub gradient_calls: usize,
    pub objective_value: f64,
    pub pg_norm: f64,
    pub violation: f64,
    pub termination: String,
}

/// Mean or 95% half-width row over the records of one suite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub problem: String,
    pub seed: Option<u64>,
    pub time_ms: Option<f64>,
    pub objective_calls: Option<f64>,
    pub gradient_calls: Option<f64>,
    pub objective_value: Option<f64>,
    pub pg_norm: Option<f64>,
    pub violation: Option<f64>,
    pub termination: Option<String>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Row<'a> {
    Run(&'a RunRecord),
    Aggregate(&'a AggregateRow),
}

#[derive(Debug)]
pub struct RunError(pub String);

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

enum Task {
    Euclidean(Benchmark),
    Bss(u64),
    CpcSynthetic(u64),
    CpcData(Arc<CpcInstance>, String),
}

impl Task {
    fn suite(&self) -> Suite {
        match self {
            Task::Euclidean(_) => Suite::Euclidean,
            Task::Bss(_) => Suite::Bss,
            Task::CpcSynthetic(_) | Task::CpcData(..) => Suite::Cpc,
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(args) => run_command(&args),
    }
}

fn run_command(args: &RunArgs) -> i32 {
    let Some(suite) = args.suite.or(args.suite_flag) else {
        eprintln!("error: a suite is required (euclidean, bss, cpc or all)");
        return EXIT_USAGE;
    };
    if args.csv.is_some() && !matches!(suite, Suite::Cpc | Suite::All) {
        eprintln!("error: --csv only applies to the cpc suite");
        return EXIT_USAGE;
    }
    if !(args.pg_tol > 0.0) {
        eprintln!("error: --pg-tol must be positive");
        return EXIT_USAGE;
    }
    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => match File::create(path) {
            Ok(f) => Box::new(io::BufWriter::new(f)),
            Err(e) => {
                eprintln!("error: cannot write {}: {e}", path.display());
                return EXIT_RUN_FAILURE;
            }
        },
        None => Box::new(io::stdout().lock()),
    };
    let outcome = run_suite(suite, args).and_then(|(records, aggregates)| {
        write_output(&mut sink, args.format, &records, &aggregates)?;
        Ok(records)
    });
    match outcome {
        Ok(records) => {
            let failed: Vec<_> = records
                .iter()
                .filter(|r| r.termination == Termination::LineSearchFailure.as_str())
                .collect();
            for r in &failed {
                eprintln!("line search failed: {} (seed {})", r.problem, r.seed);
            }
            if failed.is_empty() {
                EXIT_OK
            } else {
                EXIT_RUN_FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUN_FAILURE
        }
    }
}

fn solver_options(args: &RunArgs, suite: Suite) -> SolverOptions {
    SolverOptions {
        memory_capacity: args.mu as usize,
        pg_tolerance: args.pg_tol,
        max_iterations: args.max_iters,
        // the synthetic problems flatten out slowly; let the gradient test decide
        cost_change_factor: if suite == Suite::Euclidean { SolverOptions::default().cost_change_factor } else { 0.0 },
        ..Default::default()
    }
}

/// Runs `suite` and returns the sorted records and per-suite aggregate rows.
pub fn run_suite(suite: Suite, args: &RunArgs) -> Result<(Vec<RunRecord>, Vec<AggregateRow>), RunError> {
    let suites: Vec<Suite> = match suite {
        Suite::All => vec![Suite::Euclidean, Suite::Bss, Suite::Cpc],
        s => vec![s],
    };
    let mut tasks = Vec::new();
    for &s in &suites {
        match s {
            Suite::Euclidean => tasks.extend(Benchmark::ALL.iter().map(|&b| Task::Euclidean(b))),
            Suite::Bss => tasks.extend((0..args.instances).map(|i| Task::Bss(args.seed + i))),
            Suite::Cpc => match &args.csv {
                Some(path) => {
                    let column = args.class_column.as_deref().unwrap_or_default();
                    let inst = load_class_csv(path, column, None).map_err(|e| RunError(e.to_string()))?;
                    let name = path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned());
                    tasks.push(Task::CpcData(Arc::new(inst), name));
                }
                None => tasks.extend((0..args.instances).map(|i| Task::CpcSynthetic(args.seed + i))),
            },
            Suite::All => unreachable!(),
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs as usize)
        .build()
        .map_err(|e| RunError(e.to_string()))?;
    let results: Vec<(Suite, RunRecord)> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| run_task(t, args).map(|r| (t.suite(), r)))
            .collect::<Result<_, _>>()
    })?;
    let mut aggregates = Vec::new();
    for &s in &suites {
        let group: Vec<&RunRecord> = results.iter().filter(|(g, _)| *g == s).map(|(_, r)| r).collect();
        let prefix = if suites.len() > 1 { format!("{}:", s.as_str()) } else { String::new() };
        aggregates.extend(aggregate(&group, &prefix));
    }
    let mut records: Vec<RunRecord> = results.into_iter().map(|(_, r)| r).collect();
    records.sort_by(|a, b| a.problem.cmp(&b.problem).then(a.seed.cmp(&b.seed)));
    Ok((records, aggregates))
}

fn run_task(task: &Task, args: &RunArgs) -> Result<RunRecord, RunError> {
    let err = |e: rlbfgsb::Error| RunError(e.to_string());
    let opts = solver_options(args, task.suite());
    match task {
        Task::Euclidean(kind) => {
            let prob = BenchmarkProblem::new(*kind);
            let p0 = prob.start_point();
            measure(prob, p0, &opts, args.seed, args.omit_timing)
        }
        Task::Bss(seed) => {
            let inst = SynthBss { seed: *seed, ..Default::default() }.generate().map_err(err)?;
            let prob = bss_problem(inst);
            let p0 = prob.start_point(&mut ChaCha8Rng::seed_from_u64(*seed));
            measure(prob, p0, &opts, *seed, args.omit_timing)
        }
        Task::CpcSynthetic(seed) => {
            let q = random_rotation(4, &mut ChaCha8Rng::seed_from_u64(*seed));
            let prob = cpc_problem(synth_cpc(4, 3, 50, *seed, Some(q)).map_err(err)?);
            let p0 = prob.start_point();
            measure(prob, p0, &opts, *seed, args.omit_timing)
        }
        Task::CpcData(inst, name) => {
            let prob = cpc_problem(CpcInstance::clone(inst)).with_name(name.clone());
            let p0 = prob.start_point();
            measure(prob, p0, &opts, args.seed, args.omit_timing)
        }
    }
}

/// Times `solve` alone; call counts come from a counting wrapper.
fn measure<P: Problem>(
    prob: P,
    p0: ProductPoint,
    opts: &SolverOptions,
    seed: u64,
    omit_timing: bool,
) -> Result<RunRecord, RunError> {
    let counted = Counting::new(prob);
    let start = Instant::now();
    let res = solve(&counted, p0, opts).map_err(|e| RunError(format!("{}: {e}", counted.name())))?;
    let elapsed = start.elapsed();
    Ok(RunRecord {
        problem: counted.name().to_string(),
        seed,
        time_ms: (!omit_timing).then_some(elapsed.as_secs_f64() * 1e3),
        objective_calls: counted.cost_calls(),
        gradient_calls: counted.gradient_calls(),
        objective_value: res.cost,
        pg_norm: res.pg_norm,
        violation: counted.geometry().bounds().violation(&res.point.euclidean),
        termination: res.termination.as_str().to_string(),
    })
}

/// Sample mean and normal-approximation 95% half-width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

fn aggregate(records: &[&RunRecord], prefix: &str) -> Vec<AggregateRow> {
    if records.is_empty() {
        return Vec::new();
    }
    let column = |f: &dyn Fn(&RunRecord) -> f64| mean_ci95(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
    let time = records
        .iter()
        .map(|r| r.time_ms)
        .collect::<Option<Vec<f64>>>()
        .map(|t| mean_ci95(&t));
    let objective = column(&|r| r.objective_value);
    let mean = AggregateRow {
        problem: format!("{prefix}aggregate_mean"),
        seed: None,
        time_ms: time.map(|t| t.0),
        objective_calls: Some(column(&|r| r.objective_calls as f64).0),
        gradient_calls: Some(column(&|r| r.gradient_calls as f64).0),
        objective_value: Some(objective.0),
        pg_norm: Some(column(&|r| r.pg_norm).0),
        violation: Some(records.iter().map(|r| r.violation).fold(0.0, f64::max)),
        termination: None,
    };
    let ci = AggregateRow {
        problem: format!("{prefix}aggregate_ci95"),
        seed: None,
        time_ms: time.map(|t| t.1),
        objective_calls: None,
        gradient_calls: None,
        objective_value: Some(objective.1),
        pg_norm: None,
        violation: None,
        termination: None,
    };
    vec![mean, ci]
}

/// Writes records followed by aggregate rows as CSV or a JSON array.
pub fn write_output<W: Write>(
    out: W,
    format: Format,
    records: &[RunRecord],
    aggregates: &[AggregateRow],
) -> Result<(), RunError> {
    let io_err = |e: &dyn std::fmt::Display| RunError(format!("writing output: {e}"));
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            if records.is_empty() {
                w.write_record(HEADER).map_err(|e| io_err(&e))?;
            }
            for r in records {
                w.serialize(r).map_err(|e| io_err(&e))?;
            }
            for a in aggregates {
                w.serialize(a).map_err(|e| io_err(&e))?;
            }
            w.flush().map_err(|e| io_err(&e))
        }
        Format::Json => {
            let rows: Vec<Row> = records.iter().map(Row::Run).chain(aggregates.iter().map(Row::Aggregate)).collect();
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, &rows).map_err(|e| io_err(&e))?;
            writeln!(out).and_then(|_| out.flush()).map_err(|e| io_err(&e))
        }
    }
}

pub const HEADER: [&str; 9] = [
    "problem",
    "seed",
    "time_ms",
    "objective_calls",
    "gradient_calls",
    "objective_value",
    "pg_norm",
    "violation",
    "termination",
];
