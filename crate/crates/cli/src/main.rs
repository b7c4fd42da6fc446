//! `dynbatch` command-line harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 verification failure.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynbatch::bench::{
    memory_model_row, run_iep_bench, run_moe_bench, IepBenchConfig, MoeBenchConfig,
    BENCH_CSV_HEADER, MOE_CSV_HEADER,
};
use dynbatch::moe::MoeConfig;
use dynbatch::program::ProgramFile;
use dynbatch::schedule::{build_schedule, count_expensive_calls, verify_schedule, Strategy};
use dynbatch::verify::{run_verify, Fault, VerifyConfig};
use dynbatch::workloads::WorkloadKind;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;

#[derive(Parser)]
#[command(
    name = "dynbatch",
    version,
    about = "Dynamic batching schedulers: benchmarks and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep batch sizes over program workloads and compare schedulers.
    BenchIep(BenchIepArgs),
    /// Sweep the expert count of a sparsely gated MoE layer.
    BenchMoe(BenchMoeArgs),
    /// Run the seeded property suite.
    Verify(VerifyArgs),
    /// Print the MoE parameter/activation memory model.
    MemoryModel(MemoryModelArgs),
    /// Build a schedule for a JSON program file and dump it as JSON.
    Schedule(ScheduleArgs),
}

#[derive(Args)]
struct BenchIepArgs {
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,8,64,512")]
    b: Vec<usize>,
    /// Function vocabulary size.
    #[arg(long, default_value_t = 40)]
    p: usize,
    /// Program length for chain-heavy / random-dag shapes: `N` or `MIN-MAX`.
    #[arg(long, default_value = "8-25")]
    s: String,
    /// Levels of balanced trees.
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value = "chain-heavy")]
    shape: WorkloadKind,
    #[arg(long, default_value_t = 0.1)]
    branch_prob: f64,
    /// Feature width of every module.
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, value_delimiter = ',', default_value = "naive,standard,improved")]
    schedulers: Vec<Strategy>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, env = "DYNBATCH_SEED", default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Write the full results and per-run traces as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchMoeArgs {
    /// Comma-separated expert counts.
    #[arg(long, value_delimiter = ',', default_value = "4,16,64,256")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 256)]
    b: usize,
    /// Input/output width of the layer.
    #[arg(long, default_value_t = 256)]
    dim: usize,
    /// Hidden width of each expert.
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, env = "DYNBATCH_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, env = "DYNBATCH_SEED", default_value_t = 0)]
    seed: u64,
    /// Examples per batch.
    #[arg(long, default_value_t = 32)]
    b: usize,
    #[arg(long, default_value_t = 12)]
    p: usize,
    /// Maximum program length.
    #[arg(long, default_value_t = 25)]
    max_len: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    /// Check seeds on all cores.
    #[arg(long)]
    parallel: bool,
    /// Deliberately break a scheduler to test the suite.
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct MemoryModelArgs {
    #[arg(long, value_delimiter = ',', default_value = "10000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 2048)]
    h: usize,
    #[arg(long, default_value_t = 2048)]
    d: usize,
    #[arg(long, default_value_t = 1e6)]
    m: f64,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Program file: {"vocab": [...], "programs": [[...], ...]}.
    input: PathBuf,
    #[arg(long, default_value = "improved")]
    strategy: Strategy,
    /// Module width (not stored in the program file).
    #[arg(long, default_value_t = 8)]
    width: usize,
}

enum Failure {
    Usage(String),
    Verify(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn parse_length(s: &str) -> Result<(usize, usize), Failure> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Failure::Usage(format!("invalid length '{s}'")))
    };
    let (lo, hi) = match s.split_once('-') {
        Some((lo, hi)) => (parse(lo)?, parse(hi)?),
        None => {
            let v = parse(s)?;
            (v, v)
        }
    };
    if lo == 0 || lo > hi {
        return Err(Failure::Usage(format!("invalid length range '{s}'")));
    }
    Ok((lo, hi))
}

fn csv_sink(path: &Option<PathBuf>) -> Result<csv::Writer<Box<dyn Write>>, Failure> {
    let out: Box<dyn Write> = match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout()),
    };
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out))
}

fn bench_iep(args: BenchIepArgs) -> Result<(), Failure> {
    let (min_len, max_len) = parse_length(&args.s)?;
    if args.b.is_empty() || args.schedulers.is_empty() {
        return Err(Failure::Usage(
            "need at least one batch size and scheduler".into(),
        ));
    }
    let cfg = IepBenchConfig {
        batch_sizes: args.b,
        p: args.p,
        shape: args.shape,
        min_len,
        max_len,
        depth: args.depth,
        branch_prob: args.branch_prob,
        width: args.width,
        schedulers: args.schedulers,
        reps: args.reps,
        seed: args.seed,
    };
    let report = run_iep_bench(&cfg)?;
    let mut w = csv_sink(&args.output)?;
    w.write_record(BENCH_CSV_HEADER)?;
    for row in report.rows() {
        w.serialize(row)?;
    }
    w.flush()?;
    if let Some(path) = args.trace {
        serde_json::to_writer_pretty(File::create(path)?, &report)?;
    }
    if !report.violations.is_empty() {
        let lines: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{} at b={}: {}", v.strategy, v.b, v.detail))
            .collect();
        return Err(Failure::Verify(lines.join("\n")));
    }
    Ok(())
}

fn bench_moe(args: BenchMoeArgs) -> Result<(), Failure> {
    if args.n.iter().any(|&n| n < args.k) {
        return Err(Failure::Usage(format!(
            "every n must be at least k = {}",
            args.k
        )));
    }
    let cfg = MoeBenchConfig {
        n_values: args.n,
        k: args.k,
        b: args.b,
        data_dim: args.dim,
        hidden: args.hidden,
        reps: args.reps,
        seed: args.seed,
    };
    let report = run_moe_bench(&cfg)?;
    let mut w = csv_sink(&args.output)?;
    w.write_record(MOE_CSV_HEADER)?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    if let Some(path) = args.trace {
        serde_json::to_writer_pretty(File::create(path)?, &report)?;
    }
    if !report.violations.is_empty() {
        return Err(Failure::Verify(report.violations.join("\n")));
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<(), Failure> {
    let cfg = VerifyConfig {
        seeds: args.seeds,
        base_seed: args.seed,
        b: args.b,
        p: args.p,
        max_len: args.max_len,
        width: args.width,
        parallel: args.parallel,
        fault: args.inject_fault,
    };
    if cfg.p < 3 || cfg.max_len == 0 {
        return Err(Failure::Usage("need p >= 3 and max-len >= 1".into()));
    }
    let report = run_verify(&cfg);
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    for (check, runs) in &report.checks {
        let failed = report.failures.iter().filter(|f| &f.check == check).count();
        let status = if failed == 0 { "PASS" } else { "FAIL" };
        println!("{status} {check} ({runs} runs, {failed} failed)");
    }
    println!(
        "{} seed(s), {} failure(s)",
        report.cases,
        report.failures.len()
    );
    if report.passed() {
        Ok(())
    } else {
        let lines: Vec<String> = report.failures.iter().map(ToString::to_string).collect();
        Err(Failure::Verify(lines.join("\n")))
    }
}

fn memory_model(args: MemoryModelArgs) -> Result<(), Failure> {
    let mut stdout = io::stdout().lock();
    writeln!(
        stdout,
        "{:>10} {:>6} {:>6} {:>6} {:>10} {:>16} {:>16} {:>10}",
        "n", "k", "h", "d", "m", "param_count", "activation_count", "ratio"
    )?;
    for &n in &args.n {
        let cfg = MoeConfig {
            n,
            k: args.k,
            b: 1,
            data_dim: args.d,
            hidden: args.h,
            m: args.m,
        };
        cfg.validate()?;
        let row = memory_model_row(&cfg);
        writeln!(
            stdout,
            "{:>10} {:>6} {:>6} {:>6} {:>10.3e} {:>16} {:>16.4e} {:>10.4}",
            row.n,
            row.k,
            row.hidden,
            row.data_dim,
            row.m,
            row.param_count,
            row.activation_count,
            row.memory_ratio
        )?;
    }
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<(), Failure> {
    let file: ProgramFile = serde_json::from_reader(File::open(&args.input)?)?;
    let vocab = file.to_vocab(args.width)?;
    let batch = file.to_batch(&vocab)?;
    let schedule = build_schedule(args.strategy, &batch)?;
    let report = verify_schedule(&schedule, &batch);
    if !report.is_valid() {
        return Err(Failure::Verify(format!("{:?}", report.violations)));
    }
    println!("{}", schedule.to_json());
    eprintln!(
        "{} steps, {} expensive calls",
        schedule.steps.len(),
        count_expensive_calls(&schedule, &vocab)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::BenchIep(args) => bench_iep(args),
        Command::BenchMoe(args) => bench_moe(args),
        Command::Verify(args) => verify(args),
        Command::MemoryModel(args) => memory_model(args),
        Command::Schedule(args) => schedule(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("verification failed:\n{msg}");
            ExitCode::from(EXIT_VERIFY)
        }
    }
}
