//! Batched execution of schedules on a small dense f64 backend.
//!
//! Every dot product is reduced in ascending index order, one row at a time,
//! so a row computed inside a 1000-row call is bit-identical to the same row
//! computed alone. That is what lets the naive schedule act as an exact oracle
//! for the batched ones.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{FunctionVocab, ModuleSpec, Program};
use crate::schedule::{CallGroup, NodeRef, Schedule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("operand {0} has not been materialized")]
    MissingOperand(NodeRef),
    #[error("value for {0} written twice")]
    Overwrite(NodeRef),
    #[error("{0} is not a node of this batch")]
    UnknownNode(NodeRef),
    #[error("function {0} is not in the vocabulary")]
    UnknownFunction(usize),
    #[error("function {function_id} expects {expected} operand(s), got {found}")]
    ArityMismatch {
        function_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("row count mismatch: expected {expected}, found {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("non-finite value produced by function {function_id}")]
    NonFiniteValue { function_id: usize },
    #[error("function {0} is an input provider and has no dense form")]
    InputProvider(usize),
}

/// Row-major `rows x width` matrix of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBatch {
    rows: usize,
    width: usize,
    data: Vec<f64>,
}

impl TensorBatch {
    pub fn zeros(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            data: vec![0.0; rows * width],
        }
    }

    pub fn from_vec(rows: usize, width: usize, data: Vec<f64>) -> Result<Self, ExecError> {
        if data.len() != rows * width {
            return Err(ExecError::RowCountMismatch {
                expected: rows * width,
                found: data.len(),
            });
        }
        Ok(Self { rows, width, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(width: usize, rows: &[R]) -> Result<Self, ExecError> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(ExecError::WidthMismatch {
                    expected: width,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            width,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const LANES: usize = 8;

/// `out[r][j] = act(sum_k w[j][k] * x[r][k] + bias[j])` with `k` ascending.
///
/// Full blocks of eight rows are transposed so each row occupies one lane and
/// the inner loop vectorizes across rows; leftover rows go through a scalar
/// path, four at a time where possible. Every row keeps its own accumulator either way, so the per-row
/// reduction order (and therefore the result) never depends on the batch.
pub(crate) fn dense(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    out_dim: usize,
    relu: bool,
) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(weights.len(), out_dim * in_dim);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime just above.
            return unsafe { dense_avx2(x, rows, in_dim, weights, bias, out_dim, relu) };
        }
    }
    dense_generic(x, rows, in_dim, weights, bias, out_dim, relu)
}

/// Same code as [`dense_generic`] compiled with wider vectors. Multiplies and
/// adds stay separate instructions, so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dense_avx2(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    out_dim: usize,
    relu: bool,
) -> Vec<f64> {
    dense_generic(x, rows, in_dim, weights, bias, out_dim, relu)
}

#[inline(always)]
fn dense_generic(
    x: &[f64],
    rows: usize,
    in_dim: usize,
    weights: &[f64],
    bias: Option<&[f64]>,
    out_dim: usize,
    relu: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * out_dim];
    let finish = |acc: f64, j: usize| {
        let v = match bias {
            Some(b) => acc + b[j],
            None => acc,
        };
        // NaN must survive the rectifier so the finiteness check sees it.
        if relu && v < 0.0 {
            0.0
        } else {
            v
        }
    };

    let full = rows - rows % LANES;
    let mut xt = vec![0.0; in_dim * LANES];
    for r0 in (0..full).step_by(LANES) {
        for l in 0..LANES {
            let xr = &x[(r0 + l) * in_dim..(r0 + l + 1) * in_dim];
            for (k, &v) in xr.iter().enumerate() {
                xt[k * LANES + l] = v;
            }
        }
        let mut j = 0;
        while j + 2 <= out_dim {
            let w0 = &weights[j * in_dim..(j + 1) * in_dim];
            let w1 = &weights[(j + 1) * in_dim..(j + 2) * in_dim];
            let mut acc0 = [0.0f64; LANES];
            let mut acc1 = [0.0f64; LANES];
            for ((xk, &a), &b) in xt.chunks_exact(LANES).zip(w0).zip(w1) {
                let xk: &[f64; LANES] = xk.try_into().expect("lane chunk");
                for l in 0..LANES {
                    acc0[l] += a * xk[l];
                    acc1[l] += b * xk[l];
                }
            }
            for l in 0..LANES {
                out[(r0 + l) * out_dim + j] = finish(acc0[l], j);
                out[(r0 + l) * out_dim + j + 1] = finish(acc1[l], j + 1);
            }
            j += 2;
        }
        if j < out_dim {
            let w0 = &weights[j * in_dim..(j + 1) * in_dim];
            let mut acc0 = [0.0f64; LANES];
            for (xk, &a) in xt.chunks_exact(LANES).zip(w0) {
                let xk: &[f64; LANES] = xk.try_into().expect("lane chunk");
                for l in 0..LANES {
                    acc0[l] += a * xk[l];
                }
            }
            for l in 0..LANES {
                out[(r0 + l) * out_dim + j] = finish(acc0[l], j);
            }
        }
    }

    for j in 0..out_dim {
        let w = &weights[j * in_dim..(j + 1) * in_dim];
        let mut r = full;
        while r + 4 <= rows {
            let x0 = &x[r * in_dim..(r + 1) * in_dim];
            let x1 = &x[(r + 1) * in_dim..(r + 2) * in_dim];
            let x2 = &x[(r + 2) * in_dim..(r + 3) * in_dim];
            let x3 = &x[(r + 3) * in_dim..(r + 4) * in_dim];
            let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..in_dim {
                let wk = w[k];
                a0 += wk * x0[k];
                a1 += wk * x1[k];
                a2 += wk * x2[k];
                a3 += wk * x3[k];
            }
            out[r * out_dim + j] = finish(a0, j);
            out[(r + 1) * out_dim + j] = finish(a1, j);
            out[(r + 2) * out_dim + j] = finish(a2, j);
            out[(r + 3) * out_dim + j] = finish(a3, j);
            r += 4;
        }
        for r in r..rows {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            let mut acc = 0.0;
            for k in 0..in_dim {
                acc += w[k] * xr[k];
            }
            out[r * out_dim + j] = finish(acc, j);
        }
    }
    out
}

/// Seeded uniform init in `[-0.5, 0.5] / sqrt(fan_in)`.
pub(crate) fn seeded_uniform(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len)
        .map(|_| rng.gen_range(-0.5..=0.5) * scale)
        .collect()
}

/// Concrete weights for one vocabulary entry.
///
/// Unary modules are `width -> width` dense + ReLU; binary modules concatenate
/// their operands into `2 * width` features first. Arity-0 modules carry no
/// weights; the executor serves them from the example's input row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleImpl {
    spec: ModuleSpec,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ModuleImpl {
    /// Parameters are drawn from ChaCha8 stream `function_id` of `seed`, so each
    /// module is reproducible on its own.
    pub fn seeded(spec: ModuleSpec, seed: u64) -> Self {
        let fan_in = spec.arity * spec.in_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(spec.function_id as u64);
        let weights = seeded_uniform(&mut rng, spec.out_width * fan_in, fan_in);
        let bias = if spec.arity == 0 {
            Vec::new()
        } else {
            seeded_uniform(&mut rng, spec.out_width, fan_in)
        };
        Self {
            spec,
            weights,
            bias,
        }
    }

    /// Builds a module from explicit parameters. `weights` is `out_width x
    /// (arity * in_width)` row-major.
    pub fn from_parameters(
        spec: ModuleSpec,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, ExecError> {
        let fan_in = spec.arity * spec.in_width;
        if weights.len() != spec.out_width * fan_in {
            return Err(ExecError::WidthMismatch {
                expected: spec.out_width * fan_in,
                found: weights.len(),
            });
        }
        let expected_bias = if spec.arity == 0 { 0 } else { spec.out_width };
        if bias.len() != expected_bias {
            return Err(ExecError::WidthMismatch {
                expected: expected_bias,
                found: bias.len(),
            });
        }
        Ok(Self {
            spec,
            weights,
            bias,
        })
    }

    pub fn spec(&self) -> &ModuleSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
}

/// Applies a module once to a stacked batch of operand rows.
pub fn apply_module(
    module: &ModuleImpl,
    operands: &[&TensorBatch],
) -> Result<TensorBatch, ExecError> {
    let spec = &module.spec;
    if spec.arity == 0 {
        return Err(ExecError::InputProvider(spec.function_id));
    }
    if operands.len() != spec.arity {
        return Err(ExecError::ArityMismatch {
            function_id: spec.function_id,
            expected: spec.arity,
            found: operands.len(),
        });
    }
    let rows = operands[0].rows;
    for op in operands {
        if op.width != spec.in_width {
            return Err(ExecError::WidthMismatch {
                expected: spec.in_width,
                found: op.width,
            });
        }
        if op.rows != rows {
            return Err(ExecError::RowCountMismatch {
                expected: rows,
                found: op.rows,
            });
        }
    }
    let fan_in = spec.arity * spec.in_width;
    let data = if spec.arity == 1 {
        dense(
            &operands[0].data,
            rows,
            fan_in,
            &module.weights,
            Some(&module.bias),
            spec.out_width,
            true,
        )
    } else {
        let mut cat = Vec::with_capacity(rows * fan_in);
        for r in 0..rows {
            for op in operands {
                cat.extend_from_slice(op.row(r));
            }
        }
        dense(
            &cat,
            rows,
            fan_in,
            &module.weights,
            Some(&module.bias),
            spec.out_width,
            true,
        )
    };
    Ok(TensorBatch {
        rows,
        width: spec.out_width,
        data,
    })
}

/// Single-assignment storage for node values of a batch.
#[derive(Debug, Clone)]
pub struct ValueStore {
    width: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
    filled: Vec<bool>,
}

impl ValueStore {
    pub fn for_batch(batch: &[Program], width: usize) -> Self {
        Self::with_shape(batch.iter().map(Program::len), width)
    }

    /// One slot per node, given the node count of each example.
    pub fn with_shape(nodes_per_example: impl IntoIterator<Item = usize>, width: usize) -> Self {
        let mut offsets = vec![0];
        for n in nodes_per_example {
            offsets.push(offsets.last().unwrap() + n);
        }
        let total = *offsets.last().unwrap();
        Self {
            width,
            offsets,
            data: vec![0.0; total * width],
            filled: vec![false; total],
        }
    }

    fn slot(&self, r: NodeRef) -> Option<usize> {
        let start = *self.offsets.get(r.example)?;
        let end = *self.offsets.get(r.example + 1)?;
        (r.node < end - start).then_some(start + r.node)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: NodeRef) -> Option<&[f64]> {
        let slot = self.slot(r)?;
        self.filled[slot].then(|| &self.data[slot * self.width..(slot + 1) * self.width])
    }

    pub fn contains(&self, r: NodeRef) -> bool {
        self.get(r).is_some()
    }

    pub fn insert(&mut self, r: NodeRef, row: &[f64]) -> Result<(), ExecError> {
        if row.len() != self.width {
            return Err(ExecError::WidthMismatch {
                expected: self.width,
                found: row.len(),
            });
        }
        let slot = self.slot(r).ok_or(ExecError::UnknownNode(r))?;
        if self.filled[slot] {
            return Err(ExecError::Overwrite(r));
        }
        self.filled[slot] = true;
        self.data[slot * self.width..(slot + 1) * self.width].copy_from_slice(row);
        Ok(())
    }

    /// Number of materialized values.
    pub fn filled(&self) -> usize {
        self.filled.iter().filter(|f| **f).count()
    }

    pub fn capacity(&self) -> usize {
        self.filled.len()
    }
}

/// Stacks the values of `refs` into one batch, in order.
pub fn gather_rows(store: &ValueStore, refs: &[NodeRef]) -> Result<TensorBatch, ExecError> {
    let mut data = Vec::with_capacity(refs.len() * store.width);
    for &r in refs {
        data.extend_from_slice(store.get(r).ok_or(ExecError::MissingOperand(r))?);
    }
    Ok(TensorBatch {
        rows: refs.len(),
        width: store.width,
        data,
    })
}

/// Writes row `i` of `values` to `refs[i]`.
pub fn scatter_rows(
    store: &mut ValueStore,
    refs: &[NodeRef],
    values: &TensorBatch,
) -> Result<(), ExecError> {
    if values.rows != refs.len() {
        return Err(ExecError::RowCountMismatch {
            expected: refs.len(),
            found: values.rows,
        });
    }
    for (i, &r) in refs.iter().enumerate() {
        store.insert(r, values.row(i))?;
    }
    Ok(())
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)? / 1e3))
    }

    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};
        use std::time::Duration;

        pub fn serialize<S: Serializer>(v: &[Duration], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for d in v {
                seq.serialize_element(&(d.as_secs_f64() * 1e3))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Duration>, D::Error> {
            Ok(Vec::<f64>::deserialize(d)?
                .into_iter()
                .map(|ms| Duration::from_secs_f64(ms / 1e3))
                .collect())
        }
    }
}

/// Call counts and timings of one execution. Durations serialize as
/// milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub expensive_calls: usize,
    pub per_function_calls: BTreeMap<usize, usize>,
    #[serde(with = "duration_ms::vec")]
    pub per_step_wall_time: Vec<Duration>,
    pub peak_group_rows: usize,
    /// Time inside module application only.
    #[serde(with = "duration_ms")]
    pub module_time: Duration,
    /// Time spent gathering and scattering rows.
    #[serde(with = "duration_ms")]
    pub stacking_time: Duration,
    #[serde(with = "duration_ms")]
    pub total_time: Duration,
}

impl ExecutionTrace {
    pub(crate) fn record_call(&mut self, function_id: usize, expensive: bool, rows: usize) {
        *self.per_function_calls.entry(function_id).or_default() += 1;
        if expensive {
            self.expensive_calls += 1;
        }
        self.peak_group_rows = self.peak_group_rows.max(rows);
    }
}

struct GroupOutput<'g> {
    group: &'g CallGroup,
    values: TensorBatch,
    module_time: Duration,
    stacking_time: Duration,
}

/// Runs schedules for one vocabulary with seeded module weights.
#[derive(Debug, Clone)]
pub struct Executor {
    vocab: FunctionVocab,
    modules: Vec<ModuleImpl>,
    parallel: bool,
}

impl Executor {
    pub fn new(vocab: FunctionVocab, seed: u64) -> Self {
        let modules = vocab
            .specs()
            .iter()
            .map(|spec| ModuleImpl::seeded(spec.clone(), seed))
            .collect();
        Self {
            vocab,
            modules,
            parallel: false,
        }
    }

    /// Runs the call groups of each step on the rayon pool. Results are
    /// identical to sequential execution.
    pub fn parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn vocab(&self) -> &FunctionVocab {
        &self.vocab
    }

    pub fn module(&self, function_id: usize) -> Option<&ModuleImpl> {
        self.modules.get(function_id)
    }

    /// Executes `schedule` and returns each example's root value (row `e` for
    /// example `e`) with the trace.
    pub fn execute(
        &self,
        schedule: &Schedule,
        batch: &[Program],
        inputs: &TensorBatch,
    ) -> Result<(TensorBatch, ExecutionTrace), ExecError> {
        let mut store = ValueStore::for_batch(batch, self.vocab.width());
        let trace = self.execute_into(schedule, batch, inputs, &mut store)?;
        let width = self.vocab.width();
        let mut outputs = TensorBatch::zeros(batch.len(), width);
        for (example, program) in batch.iter().enumerate() {
            let root = NodeRef::new(example, program.root());
            let value = store.get(root).ok_or(ExecError::MissingOperand(root))?;
            outputs.row_mut(example).copy_from_slice(value);
        }
        Ok((outputs, trace))
    }

    /// Executes into a caller-owned store so the materialized values can be
    /// inspected afterwards.
    pub fn execute_into(
        &self,
        schedule: &Schedule,
        batch: &[Program],
        inputs: &TensorBatch,
        store: &mut ValueStore,
    ) -> Result<ExecutionTrace, ExecError> {
        let width = self.vocab.width();
        if inputs.rows != batch.len() {
            return Err(ExecError::RowCountMismatch {
                expected: batch.len(),
                found: inputs.rows,
            });
        }
        if inputs.width != width {
            return Err(ExecError::WidthMismatch {
                expected: width,
                found: inputs.width,
            });
        }
        let mut trace = ExecutionTrace::default();
        let start = Instant::now();
        for step in &schedule.steps {
            let step_start = Instant::now();
            let outputs: Vec<Result<GroupOutput, ExecError>> = if self.parallel {
                step.par_iter()
                    .map(|g| self.run_group(g, batch, inputs, store))
                    .collect()
            } else {
                step.iter()
                    .map(|g| self.run_group(g, batch, inputs, store))
                    .collect()
            };
            for out in outputs {
                let out = out?;
                let scatter_start = Instant::now();
                scatter_rows(store, &out.group.members, &out.values)?;
                trace.stacking_time += out.stacking_time + scatter_start.elapsed();
                trace.module_time += out.module_time;
                let spec = &self.modules[out.group.function_id].spec;
                if spec.arity > 0 {
                    trace.record_call(spec.function_id, spec.is_expensive(), out.values.rows);
                } else {
                    *trace
                        .per_function_calls
                        .entry(spec.function_id)
                        .or_default() += 1;
                }
            }
            trace.per_step_wall_time.push(step_start.elapsed());
        }
        trace.total_time = start.elapsed();
        Ok(trace)
    }

    fn run_group<'g>(
        &self,
        group: &'g CallGroup,
        batch: &[Program],
        inputs: &TensorBatch,
        store: &ValueStore,
    ) -> Result<GroupOutput<'g>, ExecError> {
        let module = self
            .modules
            .get(group.function_id)
            .ok_or(ExecError::UnknownFunction(group.function_id))?;
        let arity = module.spec.arity;
        let node_of = |r: NodeRef| {
            batch
                .get(r.example)
                .and_then(|p| p.nodes().get(r.node))
                .ok_or(ExecError::UnknownNode(r))
        };

        let stack_start = Instant::now();
        if arity == 0 {
            let mut values = TensorBatch::zeros(group.members.len(), inputs.width);
            for (i, &r) in group.members.iter().enumerate() {
                node_of(r)?;
                values.row_mut(i).copy_from_slice(inputs.row(r.example));
            }
            return Ok(GroupOutput {
                group,
                values,
                module_time: Duration::ZERO,
                stacking_time: stack_start.elapsed(),
            });
        }

        let mut operands = Vec::with_capacity(arity);
        let mut refs = Vec::with_capacity(group.members.len());
        for slot in 0..arity {
            refs.clear();
            for &r in &group.members {
                let node = node_of(r)?;
                let child = *node.children.get(slot).ok_or(ExecError::ArityMismatch {
                    function_id: group.function_id,
                    expected: arity,
                    found: node.children.len(),
                })?;
                refs.push(NodeRef::new(r.example, child));
            }
            operands.push(gather_rows(store, &refs)?);
        }
        let stacking_time = stack_start.elapsed();

        let module_start = Instant::now();
        let operand_refs: Vec<&TensorBatch> = operands.iter().collect();
        let values = apply_module(module, &operand_refs)?;
        let module_time = module_start.elapsed();
        if !values.is_finite() {
            return Err(ExecError::NonFiniteValue {
                function_id: group.function_id,
            });
        }
        Ok(GroupOutput {
            group,
            values,
            module_time,
            stacking_time,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{build_program_from_prefix, CostClass};
    use crate::schedule::{count_expensive_calls, schedule_improved, schedule_naive};

    fn vocab() -> FunctionVocab {
        FunctionVocab::from_arities(
            [
                (0, CostClass::Free),
                (1, CostClass::Expensive),
                (2, CostClass::Expensive),
            ],
            8,
        )
        .unwrap()
    }

    fn seeded_rows(rows: usize, width: usize, seed: u64) -> TensorBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * width)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        TensorBatch::from_vec(rows, width, data).unwrap()
    }

    #[test]
    fn zero_rows_in_zero_rows_out() {
        let m = ModuleImpl::seeded(vocab().get(1).unwrap().clone(), 3);
        let out = apply_module(&m, &[&TensorBatch::zeros(0, 8)]).unwrap();
        assert_eq!((out.rows(), out.width()), (0, 8));
    }

    #[test]
    fn single_row_matches_row_inside_large_batch() {
        for f in [1, 2] {
            let m = ModuleImpl::seeded(vocab().get(f).unwrap().clone(), 11);
            let a = seeded_rows(512, 8, 1);
            let b = seeded_rows(512, 8, 2);
            let ops: Vec<&TensorBatch> = [&a, &b][..f].to_vec();
            let full = apply_module(&m, &ops).unwrap();
            for r in [0, 3, 4, 255, 511] {
                let a1 = TensorBatch::from_rows(8, &[a.row(r)]).unwrap();
                let b1 = TensorBatch::from_rows(8, &[b.row(r)]).unwrap();
                let ops1: Vec<&TensorBatch> = [&a1, &b1][..f].to_vec();
                let single = apply_module(&m, &ops1).unwrap();
                let lhs: Vec<u64> = single.row(0).iter().map(|v| v.to_bits()).collect();
                let rhs: Vec<u64> = full.row(r).iter().map(|v| v.to_bits()).collect();
                assert_eq!(lhs, rhs);
            }
        }
    }

    #[test]
    fn dense_matches_naive_triple_loop() {
        let x = seeded_rows(13, 5, 7);
        let w = seeded_rows(3, 5, 8);
        let bias = [0.1, -0.2, 0.3];
        let out = dense(x.data(), 13, 5, w.data(), Some(&bias), 3, false);
        let generic = dense_generic(x.data(), 13, 5, w.data(), Some(&bias), 3, false);
        assert_eq!(
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            generic.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for r in 0..13 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += w.row(j)[k] * x.row(r)[k];
                }
                assert_eq!(out[r * 3 + j].to_bits(), (acc + bias[j]).to_bits());
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = vocab().get(1).unwrap().clone();
        let m = ModuleImpl::from_parameters(spec, vec![0.0; 64], vec![0.0; 8]).unwrap();
        let out = apply_module(&m, &[&seeded_rows(5, 8, 4)]).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn apply_module_errors() {
        let v = vocab();
        let unary = ModuleImpl::seeded(v.get(1).unwrap().clone(), 0);
        let x = seeded_rows(2, 8, 0);
        assert!(matches!(
            apply_module(&unary, &[&x, &x]),
            Err(ExecError::ArityMismatch { .. })
        ));
        assert!(matches!(
            apply_module(&unary, &[&seeded_rows(2, 4, 0)]),
            Err(ExecError::WidthMismatch { .. })
        ));
        let binary = ModuleImpl::seeded(v.get(2).unwrap().clone(), 0);
        assert!(matches!(
            apply_module(&binary, &[&x, &seeded_rows(3, 8, 0)]),
            Err(ExecError::RowCountMismatch { .. })
        ));
        let leaf = ModuleImpl::seeded(v.get(0).unwrap().clone(), 0);
        assert!(matches!(
            apply_module(&leaf, &[]),
            Err(ExecError::InputProvider(0))
        ));
    }

    #[test]
    fn seeded_modules_are_reproducible() {
        let spec = vocab().get(2).unwrap().clone();
        let a = ModuleImpl::seeded(spec.clone(), 99);
        let b = ModuleImpl::seeded(spec.clone(), 99);
        assert_eq!(a, b);
        assert_ne!(a, ModuleImpl::seeded(spec, 100));
        let bound = 0.5 / (16f64).sqrt();
        assert!(a.weights().iter().all(|w| w.abs() <= bound));
        assert_eq!(a.weights().len(), 8 * 16);
    }

    #[test]
    fn store_round_trip_and_permutation() {
        let mut store = ValueStore::with_shape([3, 2], 4);
        let refs = [NodeRef::new(0, 2), NodeRef::new(1, 0), NodeRef::new(0, 0)];
        let values = seeded_rows(3, 4, 5);
        scatter_rows(&mut store, &refs, &values).unwrap();
        assert_eq!(gather_rows(&store, &refs).unwrap(), values);

        let perm = [refs[2], refs[0], refs[1]];
        let g = gather_rows(&store, &perm).unwrap();
        assert_eq!(g.row(0), values.row(2));
        assert_eq!(g.row(1), values.row(0));
        assert_eq!(g.row(2), values.row(1));

        assert_eq!(
            gather_rows(&store, &[NodeRef::new(0, 1)]),
            Err(ExecError::MissingOperand(NodeRef::new(0, 1)))
        );
        assert_eq!(
            store.insert(refs[0], values.row(0)),
            Err(ExecError::Overwrite(refs[0]))
        );
        assert!(matches!(
            scatter_rows(&mut store, &refs[..1], &values),
            Err(ExecError::RowCountMismatch { .. })
        ));
        assert_eq!(store.filled(), 3);
    }

    #[test]
    fn leaf_program_returns_input_row() {
        let v = vocab();
        let batch = vec![build_program_from_prefix(&[0], &v).unwrap(); 3];
        let inputs = seeded_rows(3, 8, 9);
        let exec = Executor::new(v, 1);
        let (out, trace) = exec
            .execute(&schedule_naive(&batch).unwrap(), &batch, &inputs)
            .unwrap();
        assert_eq!(out, inputs);
        assert_eq!(trace.expensive_calls, 0);
    }

    #[test]
    fn identical_chains_batch_into_one_call_per_level() {
        let v = vocab();
        let chain = build_program_from_prefix(&[1, 1, 1, 1, 0], &v).unwrap();
        let batch = vec![chain; 1000];
        let inputs = seeded_rows(1000, 8, 3);
        let exec = Executor::new(v.clone(), 5);
        let schedule = schedule_improved(&batch).unwrap();
        let (_, trace) = exec.execute(&schedule, &batch, &inputs).unwrap();
        assert_eq!(trace.expensive_calls, 4);
        assert_eq!(trace.expensive_calls, count_expensive_calls(&schedule, &v));
        assert_eq!(trace.peak_group_rows, 1000);
        assert_eq!(trace.per_step_wall_time.len(), 5);
    }

    #[test]
    fn missing_dependency_is_reported() {
        let v = vocab();
        let batch = vec![build_program_from_prefix(&[1, 0], &v).unwrap()];
        let mut schedule = schedule_naive(&batch).unwrap();
        schedule.steps.swap(0, 1);
        let exec = Executor::new(v, 0);
        assert_eq!(
            exec.execute(&schedule, &batch, &seeded_rows(1, 8, 0)),
            Err(ExecError::MissingOperand(NodeRef::new(0, 1)))
        );
    }

    #[test]
    fn non_finite_input_is_reported() {
        let v = vocab();
        let batch = vec![build_program_from_prefix(&[1, 0], &v).unwrap()];
        let mut inputs = seeded_rows(1, 8, 0);
        inputs.row_mut(0)[0] = f64::NAN;
        let exec = Executor::new(v, 0);
        assert_eq!(
            exec.execute(&schedule_naive(&batch).unwrap(), &batch, &inputs),
            Err(ExecError::NonFiniteValue { function_id: 1 })
        );
    }

    #[test]
    fn trace_serializes_durations_as_ms() {
        let trace = ExecutionTrace {
            module_time: Duration::from_micros(1500),
            per_step_wall_time: vec![Duration::from_millis(2)],
            ..Default::default()
        };
        let json = serde_json::to_value(&trace).unwrap();
        assert_eq!(json["module_time"], 1.5);
        assert_eq!(json["per_step_wall_time"][0], 2.0);
    }
}
