//! Scheduler and MoE throughput sweeps.
//!
//! Speedups are ratios of module wall time (time inside expert/module calls),
//! leaving out the gather/scatter stacking time, which is reported in its own
//! column. Each configuration runs one discarded warm-up followed by `reps`
//! timed repetitions; strategies are interleaved within a repetition and the
//! reported speedup is the median of per-repetition ratios.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{ExecError, ExecutionTrace, Executor, TensorBatch};
use crate::max_relative_error;
use crate::moe::{moe_forward_batched, moe_forward_naive, MoeConfig, MoeError, MoeExperts};
use crate::schedule::{build_schedule, count_expensive_calls, BatchStats, ScheduleError, Strategy};
use crate::workloads::{gen_moe, gen_program_batch, WorkloadError, WorkloadKind, WorkloadSpec};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

/// Equivalence tolerance between batched and naive outputs.
pub const OUTPUT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Dispersion {
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "dispersion of an empty sample");
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Self {
            min: sorted[0],
            median,
            max: sorted[sorted.len() - 1],
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// One row of the IEP-style sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scheduler: String,
    pub b: usize,
    pub p: usize,
    pub s_max: usize,
    pub d_max: usize,
    pub calls: usize,
    pub module_ms: f64,
    pub stack_ms: f64,
    pub total_ms: f64,
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: [&str; 10] = [
    "scheduler",
    "b",
    "p",
    "s_max",
    "d_max",
    "calls",
    "module_ms",
    "stack_ms",
    "total_ms",
    "speedup",
];

/// Full measurement for one (strategy, workload) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub workload: WorkloadSpec,
    pub strategy: Strategy,
    pub stats: BatchStats,
    pub expensive_calls: usize,
    pub module_ms: Dispersion,
    pub stacking_ms: Dispersion,
    pub total_ms: Dispersion,
    pub speedup_vs_naive: Dispersion,
    pub repetitions: usize,
}

impl BenchResult {
    pub fn row(&self) -> BenchRow {
        BenchRow {
            scheduler: self.strategy.to_string(),
            b: self.stats.b,
            p: self.stats.p,
            s_max: self.stats.s_max,
            d_max: self.stats.d_max,
            calls: self.expensive_calls,
            module_ms: self.module_ms.median,
            stack_ms: self.stacking_ms.median,
            total_ms: self.total_ms.median,
            speedup: self.speedup_vs_naive.median,
        }
    }
}

/// A complexity bound or equivalence check that failed during a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub strategy: Strategy,
    pub b: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IepBenchConfig {
    pub batch_sizes: Vec<usize>,
    pub p: usize,
    pub shape: WorkloadKind,
    pub min_len: usize,
    pub max_len: usize,
    pub depth: usize,
    pub branch_prob: f64,
    pub width: usize,
    pub schedulers: Vec<Strategy>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for IepBenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 8, 64, 512],
            p: 40,
            shape: WorkloadKind::ChainHeavy,
            min_len: 8,
            max_len: 25,
            depth: 5,
            branch_prob: 0.1,
            width: 64,
            schedulers: vec![Strategy::Naive, Strategy::Standard, Strategy::Improved],
            reps: 5,
            seed: 0,
        }
    }
}

impl IepBenchConfig {
    pub fn workload(&self, b: usize) -> WorkloadSpec {
        let spec = match self.shape {
            WorkloadKind::BalancedTree => {
                WorkloadSpec::balanced_tree(b, self.p, self.depth, self.width, self.seed)
            }
            WorkloadKind::RandomDag => {
                WorkloadSpec::random_dag(b, self.p, self.max_len, self.width, self.seed)
            }
            _ => WorkloadSpec::chain_heavy(
                b,
                self.p,
                self.min_len,
                self.max_len,
                self.width,
                self.seed,
            ),
        };
        spec.with_branch_prob(self.branch_prob)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IepBenchReport {
    pub results: Vec<BenchResult>,
    pub violations: Vec<BoundViolation>,
    /// Trace of the last timed repetition per (b, strategy), in result order.
    pub traces: Vec<ExecutionTrace>,
}

impl IepBenchReport {
    pub fn rows(&self) -> Vec<BenchRow> {
        self.results.iter().map(BenchResult::row).collect()
    }
}

/// Runs every requested scheduler at every batch size. Naive always runs,
/// because it is the speedup baseline and the output oracle.
pub fn run_iep_bench(cfg: &IepBenchConfig) -> Result<IepBenchReport, BenchError> {
    if cfg.reps == 0 {
        return Err(BenchError::Config("reps must be at least 1".into()));
    }
    if cfg.shape == WorkloadKind::Moe {
        return Err(BenchError::Config(
            "use the moe sweep for moe workloads".into(),
        ));
    }
    let mut report = IepBenchReport::default();
    let mut strategies = vec![Strategy::Naive];
    strategies.extend(cfg.schedulers.iter().filter(|s| **s != Strategy::Naive));

    for &b in &cfg.batch_sizes {
        let spec = cfg.workload(b);
        let batch = gen_program_batch(&spec)?;
        let stats = BatchStats::of(&batch.programs, &batch.vocab)?;
        let executor = Executor::new(batch.vocab.clone(), spec.seed);
        let schedules = strategies
            .iter()
            .map(|&s| build_schedule(s, &batch.programs))
            .collect::<Result<Vec<_>, _>>()?;

        let mut violate = |strategy, detail: String| {
            report.violations.push(BoundViolation {
                strategy,
                b,
                detail,
            })
        };
        let calls: Vec<usize> = schedules
            .iter()
            .map(|s| count_expensive_calls(s, &batch.vocab))
            .collect();
        for (&strategy, &c) in strategies.iter().zip(&calls) {
            let (bound, label) = match strategy {
                Strategy::Naive => (stats.expensive_nodes, "expensive-node census"),
                Strategy::Standard => (stats.p.min(stats.b) * stats.s_max, "min(p,b)*s_max"),
                Strategy::Improved | Strategy::Online => {
                    (stats.p * (stats.d_max + 1), "p*(d_max+1)")
                }
            };
            let ok = if strategy == Strategy::Naive {
                c == bound
            } else {
                c <= bound
            };
            if !ok {
                violate(strategy, format!("calls {c} vs {label} = {bound}"));
            }
        }

        // Warm-up run doubles as the equivalence check.
        let mut reference: Option<TensorBatch> = None;
        for (&strategy, schedule) in strategies.iter().zip(&schedules) {
            let (out, _) = executor.execute(schedule, &batch.programs, &batch.inputs)?;
            match &reference {
                None => reference = Some(out),
                Some(naive) => {
                    let err = max_relative_error(naive.data(), out.data());
                    if err > OUTPUT_REL_TOL {
                        violate(
                            strategy,
                            format!("outputs differ from naive: rel err {err:e}"),
                        );
                    }
                }
            }
        }

        let mut module = vec![Vec::new(); strategies.len()];
        let mut stacking = vec![Vec::new(); strategies.len()];
        let mut total = vec![Vec::new(); strategies.len()];
        let mut last = vec![ExecutionTrace::default(); strategies.len()];
        for _ in 0..cfg.reps {
            for (i, schedule) in schedules.iter().enumerate() {
                let (_, trace) = executor.execute(schedule, &batch.programs, &batch.inputs)?;
                module[i].push(ms(trace.module_time));
                stacking[i].push(ms(trace.stacking_time));
                total[i].push(ms(trace.total_time));
                last[i] = trace;
            }
        }
        for (i, &strategy) in strategies.iter().enumerate() {
            if !cfg.schedulers.contains(&strategy) {
                continue;
            }
            let speedups: Vec<f64> = module[0]
                .iter()
                .zip(&module[i])
                .map(|(naive, this)| naive / this.max(f64::MIN_POSITIVE))
                .collect();
            report.results.push(BenchResult {
                workload: spec.clone(),
                strategy,
                stats,
                expensive_calls: calls[i],
                module_ms: Dispersion::of(&module[i]),
                stacking_ms: Dispersion::of(&stacking[i]),
                total_ms: Dispersion::of(&total[i]),
                speedup_vs_naive: Dispersion::of(&speedups),
                repetitions: cfg.reps,
            });
            report.traces.push(last[i].clone());
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBenchConfig {
    pub n_values: Vec<usize>,
    pub k: usize,
    pub b: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for MoeBenchConfig {
    fn default() -> Self {
        Self {
            n_values: vec![4, 16, 64, 256],
            k: 4,
            b: 256,
            data_dim: 256,
            hidden: 256,
            reps: 5,
            seed: 0,
        }
    }
}

/// One row of the MoE sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeBenchRow {
    pub mode: String,
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub calls: usize,
    pub module_ms: f64,
    pub stack_ms: f64,
    pub total_ms: f64,
    /// Module-time ratio naive / batched for the whole layer.
    pub speedup: f64,
    /// Ratio of mean time per expert call, naive / batched.
    pub per_call_speedup: f64,
}

pub const MOE_CSV_HEADER: [&str; 10] = [
    "mode",
    "n",
    "k",
    "b",
    "calls",
    "module_ms",
    "stack_ms",
    "total_ms",
    "speedup",
    "per_call_speedup",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MoeBenchReport {
    pub rows: Vec<MoeBenchRow>,
    /// Layer speedup dispersion per swept `n`, in sweep order.
    pub speedups: Vec<(usize, Dispersion)>,
    pub violations: Vec<String>,
}

/// Sweeps the expert count at fixed batch size.
pub fn run_moe_bench(cfg: &MoeBenchConfig) -> Result<MoeBenchReport, BenchError> {
    if cfg.reps == 0 {
        return Err(BenchError::Config("reps must be at least 1".into()));
    }
    let mut report = MoeBenchReport::default();
    for &n in &cfg.n_values {
        let config = MoeConfig {
            n,
            k: cfg.k,
            b: cfg.b,
            data_dim: cfg.data_dim,
            hidden: cfg.hidden,
            m: 1.0,
        };
        let workload = gen_moe(&WorkloadSpec::moe(config, cfg.seed))?;
        let experts = MoeExperts::seeded(n, cfg.data_dim, cfg.hidden, cfg.seed);
        let (inputs, gates) = (&workload.inputs, &workload.gates);

        let (naive_out, naive_trace) = moe_forward_naive(inputs, &experts, gates)?;
        let (batched_out, batched_trace) = moe_forward_batched(inputs, &experts, gates)?;
        let err = max_relative_error(naive_out.data(), batched_out.data());
        if err > OUTPUT_REL_TOL {
            report.violations.push(format!(
                "n={n}: batched output differs from naive, rel err {err:e}"
            ));
        }
        if naive_trace.expensive_calls != cfg.k * cfg.b {
            report.violations.push(format!(
                "n={n}: naive made {} calls, expected k*b = {}",
                naive_trace.expensive_calls,
                cfg.k * cfg.b
            ));
        }
        if batched_trace.expensive_calls != gates.active_experts()
            || batched_trace.expensive_calls > n
        {
            report.violations.push(format!(
                "n={n}: batched made {} calls for {} active experts",
                batched_trace.expensive_calls,
                gates.active_experts()
            ));
        }

        let mut naive = (Vec::new(), Vec::new(), Vec::new());
        let mut batched = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..cfg.reps {
            let (_, t) = moe_forward_naive(inputs, &experts, gates)?;
            naive.0.push(ms(t.module_time));
            naive.1.push(ms(t.stacking_time));
            naive.2.push(ms(t.total_time));
            let (_, t) = moe_forward_batched(inputs, &experts, gates)?;
            batched.0.push(ms(t.module_time));
            batched.1.push(ms(t.stacking_time));
            batched.2.push(ms(t.total_time));
        }
        let speedups: Vec<f64> = naive
            .0
            .iter()
            .zip(&batched.0)
            .map(|(a, b)| a / b.max(f64::MIN_POSITIVE))
            .collect();
        let speedup = Dispersion::of(&speedups);
        let naive_calls = naive_trace.expensive_calls;
        let batched_calls = batched_trace.expensive_calls;
        let naive_module = Dispersion::of(&naive.0).median;
        let batched_module = Dispersion::of(&batched.0).median;
        let per_call = (naive_module / naive_calls as f64)
            / (batched_module / batched_calls as f64).max(f64::MIN_POSITIVE);

        report.rows.push(MoeBenchRow {
            mode: "naive".into(),
            n,
            k: cfg.k,
            b: cfg.b,
            calls: naive_calls,
            module_ms: naive_module,
            stack_ms: Dispersion::of(&naive.1).median,
            total_ms: Dispersion::of(&naive.2).median,
            speedup: 1.0,
            per_call_speedup: 1.0,
        });
        report.rows.push(MoeBenchRow {
            mode: "batched".into(),
            n,
            k: cfg.k,
            b: cfg.b,
            calls: batched_calls,
            module_ms: batched_module,
            stack_ms: Dispersion::of(&batched.1).median,
            total_ms: Dispersion::of(&batched.2).median,
            speedup: speedup.median,
            per_call_speedup: per_call,
        });
        report.speedups.push((n, speedup));
    }
    Ok(report)
}

/// One line of the memory-model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryModelRow {
    pub n: usize,
    pub k: usize,
    pub hidden: usize,
    pub data_dim: usize,
    pub m: f64,
    pub param_count: u64,
    pub activation_count: f64,
    pub memory_ratio: f64,
}

pub fn memory_model_row(cfg: &MoeConfig) -> MemoryModelRow {
    MemoryModelRow {
        n: cfg.n,
        k: cfg.k,
        hidden: cfg.hidden,
        data_dim: cfg.data_dim,
        m: cfg.m,
        param_count: crate::moe::param_count(cfg),
        activation_count: crate::moe::activation_count(cfg),
        memory_ratio: crate::moe::memory_ratio(cfg),
    }
}
