//! Dynamic batching for per-example module graphs.
//!
//! Each example in a minibatch carries its own [`program::Program`], a tree or
//! DAG of calls into a shared vocabulary of modules. Executing programs one by
//! one costs one module call per node; the schedulers in [`schedule`] regroup
//! the nodes of a whole batch so each module runs once per step over a stacked
//! batch of rows. [`executor`] runs the schedules on a small deterministic f64
//! backend, [`moe`] applies the same idea to a sparsely gated
//! mixture-of-experts layer, and [`bench`] / [`verify`] measure and check it.

pub mod bench;
pub mod executor;
pub mod moe;
pub mod program;
pub mod schedule;
pub mod verify;
pub mod workloads;

pub use executor::{
    apply_module, gather_rows, scatter_rows, ExecError, ExecutionTrace, Executor, ModuleImpl,
    TensorBatch, ValueStore,
};
pub use program::{
    build_program_from_prefix, max_root_distance_labels, postorder_flatten, validate, CostClass,
    DepthLabels, FunctionVocab, ModuleSpec, Program,
};
pub use schedule::{
    build_schedule, count_expensive_calls, schedule_improved, schedule_naive, schedule_online,
    schedule_online_batch, schedule_standard, verify_schedule, BatchStats, CallGroup, NodeRef,
    Schedule, Strategy,
};

/// Largest element-wise relative difference, `|a - b| / max(|a|, |b|)`, with
/// exactly equal elements (including two zeros) contributing 0. Length
/// mismatches and NaNs count as infinite error.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y {
                0.0
            } else if x.is_nan() || y.is_nan() {
                f64::INFINITY
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::max_relative_error;

    #[test]
    fn relative_error() {
        assert_eq!(max_relative_error(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert_eq!(max_relative_error(&[1.0], &[1.0, 2.0]), f64::INFINITY);
        assert_eq!(max_relative_error(&[f64::NAN], &[1.0]), f64::INFINITY);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
    }
}
