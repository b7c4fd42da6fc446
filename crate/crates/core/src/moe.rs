//! Sparsely gated mixture-of-experts layer.
//!
//! The naive forward pass runs each of the `k * b` (example, expert) pairs on
//! its own. The batched pass hands all `k * b` assignments to the online
//! scheduler as one frontier, which groups them by expert, so each expert with
//! at least one assignment is called exactly once.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{
    dense, gather_rows, scatter_rows, seeded_uniform, ExecError, ExecutionTrace, TensorBatch,
    ValueStore,
};
use crate::schedule::{schedule_online, FrontierNode, NodeRef};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MoeError {
    #[error("k = {k} exceeds the number of experts n = {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid gate assignment: {0}")]
    InvalidGate(String),
    #[error("non-finite value produced by expert {expert}")]
    NonFiniteValue { expert: usize },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Layer shape. `data_dim` is the input/output width, `hidden` the expert
/// hidden width, `m` the examples routed to each expert (memory model only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n: usize,
    pub k: usize,
    pub b: usize,
    pub data_dim: usize,
    pub hidden: usize,
    pub m: f64,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.k > self.n {
            return Err(MoeError::KTooLarge {
                k: self.k,
                n: self.n,
            });
        }
        if self.k == 0 || self.b == 0 || self.data_dim == 0 || self.hidden == 0 {
            return Err(MoeError::InvalidConfig(
                "n, k, b, data_dim and hidden must all be at least 1".into(),
            ));
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            return Err(MoeError::InvalidConfig(format!(
                "m must be finite and non-negative, got {}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Parameter count of the expert pool: `2 * hidden * n * data_dim`.
pub fn param_count(cfg: &MoeConfig) -> u64 {
    2 * cfg.hidden as u64 * cfg.n as u64 * cfg.data_dim as u64
}

/// Floating point activations stored when each expert receives `m` examples:
/// `n * m * (2 * data_dim + hidden) / k`.
pub fn activation_count(cfg: &MoeConfig) -> f64 {
    cfg.n as f64 * cfg.m * (2 * cfg.data_dim + cfg.hidden) as f64 / cfg.k as f64
}

/// Activation-to-parameter memory ratio `m * (2d + h) / (2 * k * h * d)`.
/// Independent of `n`.
pub fn memory_ratio(cfg: &MoeConfig) -> f64 {
    cfg.m * (2 * cfg.data_dim + cfg.hidden) as f64
        / (2.0 * cfg.k as f64 * cfg.hidden as f64 * cfg.data_dim as f64)
}

/// Per-example `(expert, weight)` pairs, exactly `k` per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateAssignment {
    k: usize,
    per_example: Vec<Vec<(usize, f64)>>,
}

impl GateAssignment {
    pub fn new(per_example: Vec<Vec<(usize, f64)>>, n: usize, k: usize) -> Result<Self, MoeError> {
        for (e, entries) in per_example.iter().enumerate() {
            if entries.len() != k {
                return Err(MoeError::InvalidGate(format!(
                    "example {e} has {} entries, expected {k}",
                    entries.len()
                )));
            }
            let mut ids: Vec<usize> = entries.iter().map(|&(id, _)| id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != k || ids.last().is_some_and(|&id| id >= n) {
                return Err(MoeError::InvalidGate(format!(
                    "example {e} must name {k} distinct experts below {n}"
                )));
            }
            if entries.iter().any(|&(_, w)| w < 0.0 || !w.is_finite()) {
                return Err(MoeError::InvalidGate(format!(
                    "example {e} has a negative or non-finite weight"
                )));
            }
            let total: f64 = entries.iter().map(|&(_, w)| w).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(MoeError::InvalidGate(format!(
                    "example {e} weights sum to {total}"
                )));
            }
        }
        Ok(Self { k, per_example })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn examples(&self) -> usize {
        self.per_example.len()
    }

    pub fn example(&self, e: usize) -> &[(usize, f64)] {
        &self.per_example[e]
    }

    /// Distinct experts with at least one assignment.
    pub fn active_experts(&self) -> usize {
        let mut ids: Vec<usize> = self
            .per_example
            .iter()
            .flatten()
            .map(|&(id, _)| id)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Selects the `k` highest scores per row (lower expert id wins ties) and
/// renormalizes them with a softmax over the selected scores.
pub fn top_k_gate(scores: &TensorBatch, k: usize) -> Result<GateAssignment, MoeError> {
    let n = scores.width();
    if k > n {
        return Err(MoeError::KTooLarge { k, n });
    }
    if !scores.is_finite() {
        return Err(MoeError::InvalidGate("scores must be finite".into()));
    }
    let mut per_example = Vec::with_capacity(scores.rows());
    for r in 0..scores.rows() {
        let row = scores.row(r);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        let top = order.first().map_or(0.0, |&i| row[i]);
        let exps: Vec<f64> = order.iter().map(|&i| (row[i] - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        per_example.push(
            order
                .into_iter()
                .zip(exps)
                .map(|(id, e)| (id, e / total))
                .collect(),
        );
    }
    GateAssignment::new(per_example, n, k)
}

/// One-hidden-layer expert: `data_dim -> hidden` with ReLU, then linear
/// `hidden -> data_dim`. No biases, so the parameter count is exactly
/// `2 * hidden * data_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    w_in: Vec<f64>,
    w_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeExperts {
    data_dim: usize,
    hidden: usize,
    experts: Vec<Expert>,
}

impl MoeExperts {
    /// Expert `i` draws its weights from ChaCha8 stream `i` of `seed`.
    pub fn seeded(n: usize, data_dim: usize, hidden: usize, seed: u64) -> Self {
        let experts = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                Expert {
                    w_in: seeded_uniform(&mut rng, hidden * data_dim, data_dim),
                    w_out: seeded_uniform(&mut rng, data_dim * hidden, hidden),
                }
            })
            .collect();
        Self {
            data_dim,
            hidden,
            experts,
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Total allocated weight elements across every expert.
    pub fn weight_elements(&self) -> usize {
        self.experts
            .iter()
            .map(|e| e.w_in.len() + e.w_out.len())
            .sum()
    }

    /// Runs expert `id` on every row of `x`.
    pub fn apply(&self, id: usize, x: &TensorBatch) -> Result<TensorBatch, MoeError> {
        let expert = self
            .experts
            .get(id)
            .ok_or_else(|| MoeError::InvalidGate(format!("expert {id} does not exist")))?;
        if x.width() != self.data_dim {
            return Err(ExecError::WidthMismatch {
                expected: self.data_dim,
                found: x.width(),
            }
            .into());
        }
        let rows = x.rows();
        let hidden = dense(
            x.data(),
            rows,
            self.data_dim,
            &expert.w_in,
            None,
            self.hidden,
            true,
        );
        let out = dense(
            &hidden,
            rows,
            self.hidden,
            &expert.w_out,
            None,
            self.data_dim,
            false,
        );
        let out = TensorBatch::from_vec(rows, self.data_dim, out)?;
        if !out.is_finite() {
            return Err(MoeError::NonFiniteValue { expert: id });
        }
        Ok(out)
    }
}

fn check_shapes(
    inputs: &TensorBatch,
    experts: &MoeExperts,
    gates: &GateAssignment,
) -> Result<(), MoeError> {
    if inputs.rows() != gates.examples() {
        return Err(ExecError::RowCountMismatch {
            expected: gates.examples(),
            found: inputs.rows(),
        }
        .into());
    }
    if inputs.width() != experts.data_dim {
        return Err(ExecError::WidthMismatch {
            expected: experts.data_dim,
            found: inputs.width(),
        }
        .into());
    }
    Ok(())
}

/// Gate-weighted sum of each example's expert outputs, in assignment order.
fn combine(gates: &GateAssignment, slots: &ValueStore, width: usize) -> TensorBatch {
    let mut out = TensorBatch::zeros(gates.examples(), width);
    for e in 0..gates.examples() {
        let row = out.row_mut(e);
        for (slot, &(_, weight)) in gates.example(e).iter().enumerate() {
            let value = slots
                .get(NodeRef::new(e, slot))
                .expect("every assignment slot is filled before combining");
            for (acc, v) in row.iter_mut().zip(value) {
                *acc += weight * v;
            }
        }
    }
    out
}

/// Reference pass: every (example, expert) pair is its own expert call.
pub fn moe_forward_naive(
    inputs: &TensorBatch,
    experts: &MoeExperts,
    gates: &GateAssignment,
) -> Result<(TensorBatch, ExecutionTrace), MoeError> {
    check_shapes(inputs, experts, gates)?;
    let start = Instant::now();
    let mut trace = ExecutionTrace::default();
    let width = experts.data_dim;
    let mut slots = ValueStore::with_shape(std::iter::repeat_n(gates.k(), gates.examples()), width);
    for e in 0..gates.examples() {
        for (slot, &(expert, _)) in gates.example(e).iter().enumerate() {
            let t = Instant::now();
            let x = TensorBatch::from_rows(width, &[inputs.row(e)])?;
            trace.stacking_time += t.elapsed();

            let t = Instant::now();
            let y = experts.apply(expert, &x)?;
            trace.module_time += t.elapsed();
            trace.record_call(expert, true, 1);

            let t = Instant::now();
            slots.insert(NodeRef::new(e, slot), y.row(0))?;
            trace.stacking_time += t.elapsed();
        }
    }
    let out = combine(gates, &slots, width);
    trace.total_time = start.elapsed();
    trace.per_step_wall_time.push(trace.total_time);
    Ok((out, trace))
}

/// Batched pass: one online-scheduler step over all `k * b` assignments, one
/// call per active expert.
pub fn moe_forward_batched(
    inputs: &TensorBatch,
    experts: &MoeExperts,
    gates: &GateAssignment,
) -> Result<(TensorBatch, ExecutionTrace), MoeError> {
    check_shapes(inputs, experts, gates)?;
    let start = Instant::now();
    let mut trace = ExecutionTrace::default();
    let width = experts.data_dim;

    let frontier: Vec<FrontierNode> = (0..gates.examples())
        .flat_map(|e| {
            gates
                .example(e)
                .iter()
                .enumerate()
                .map(move |(slot, &(expert, _))| FrontierNode {
                    node: NodeRef::new(e, slot),
                    function_id: expert,
                })
        })
        .collect();
    let step =
        schedule_online(&frontier, |_| &[], |_| true).expect("assignments have no dependencies");

    // Example inputs as a one-node-per-example store so gather can stack them.
    let mut input_store = ValueStore::with_shape(std::iter::repeat_n(1, gates.examples()), width);
    let mut slots = ValueStore::with_shape(std::iter::repeat_n(gates.k(), gates.examples()), width);
    for e in 0..gates.examples() {
        input_store.insert(NodeRef::new(e, 0), inputs.row(e))?;
    }

    let mut stacking = Duration::ZERO;
    let mut refs = Vec::new();
    for group in &step {
        let t = Instant::now();
        refs.clear();
        refs.extend(group.members.iter().map(|m| NodeRef::new(m.example, 0)));
        let x = gather_rows(&input_store, &refs)?;
        stacking += t.elapsed();

        let t = Instant::now();
        let y = experts.apply(group.function_id, &x)?;
        trace.module_time += t.elapsed();
        trace.record_call(group.function_id, true, group.members.len());

        let t = Instant::now();
        scatter_rows(&mut slots, &group.members, &y)?;
        stacking += t.elapsed();
    }
    trace.stacking_time = stacking;
    let out = combine(gates, &slots, width);
    trace.total_time = start.elapsed();
    trace.per_step_wall_time.push(trace.total_time);
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg() -> MoeConfig {
        MoeConfig {
            n: 10_000,
            k: 100,
            b: 1,
            data_dim: 2048,
            hidden: 2048,
            m: 1e6,
        }
    }

    fn random_batch(rows: usize, width: usize, seed: u64) -> TensorBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorBatch::from_vec(
            rows,
            width,
            (0..rows * width)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn memory_model_worked_example() {
        let c = cfg();
        assert!((memory_ratio(&c) - 7.3).abs() <= 0.05);
        assert_eq!(param_count(&c), 83_886_080_000);
        // 10^4 * 10^6 * 6144 / 100
        assert_eq!(activation_count(&c), 6.144e11);
        let doubled = MoeConfig { n: 20_000, ..c };
        assert_eq!(memory_ratio(&doubled), memory_ratio(&c));
        let none = MoeConfig { m: 0.0, ..c };
        assert_eq!(memory_ratio(&none), 0.0);
    }

    #[test]
    fn memory_model_small_values() {
        let unit = MoeConfig {
            n: 1,
            k: 1,
            b: 1,
            data_dim: 1,
            hidden: 1,
            m: 1.0,
        };
        assert_eq!(param_count(&unit), 2);
        assert_eq!(activation_count(&unit), 3.0);
    }

    #[test]
    fn ratio_times_params_is_activations() {
        for (n, k, d, h, m) in [
            (8, 2, 16, 32, 5.0),
            (10_000, 100, 2048, 2048, 1e6),
            (3, 3, 7, 1, 0.5),
        ] {
            let c = MoeConfig {
                n,
                k,
                b: 1,
                data_dim: d,
                hidden: h,
                m,
            };
            let lhs = memory_ratio(&c) * param_count(&c) as f64;
            let rhs = activation_count(&c);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn param_count_matches_allocation() {
        let c = MoeConfig {
            n: 6,
            k: 2,
            b: 4,
            data_dim: 5,
            hidden: 7,
            m: 1.0,
        };
        let experts = MoeExperts::seeded(c.n, c.data_dim, c.hidden, 1);
        assert_eq!(experts.weight_elements() as u64, param_count(&c));
    }

    #[test]
    fn gate_selects_everything_when_k_is_n() {
        let scores = random_batch(3, 5, 2);
        let g = top_k_gate(&scores, 5).unwrap();
        for e in 0..3 {
            let mut ids: Vec<_> = g.example(e).iter().map(|x| x.0).collect();
            ids.sort();
            assert_eq!(ids, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn gate_one_hot() {
        let mut scores = TensorBatch::zeros(2, 4);
        scores.row_mut(0)[2] = 1.0;
        scores.row_mut(1)[3] = 1.0;
        let g = top_k_gate(&scores, 1).unwrap();
        assert_eq!(g.example(0), &[(2, 1.0)]);
        assert_eq!(g.example(1), &[(3, 1.0)]);
    }

    #[test]
    fn gate_ties_prefer_lower_id() {
        let scores = TensorBatch::from_rows(6, &[[0.5, 0.9, 0.5, 0.9, 0.1, 0.5]]).unwrap();
        let g = top_k_gate(&scores, 3).unwrap();
        // Full-sort oracle: stable sort of ids by descending score.
        let row = scores.row(0);
        let mut oracle: Vec<usize> = (0..6).collect();
        oracle.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
        let ids: Vec<_> = g.example(0).iter().map(|x| x.0).collect();
        assert_eq!(ids, oracle[..3].to_vec());
        assert_eq!(ids, vec![1, 3, 0]);
    }

    #[test]
    fn gate_rejects_large_k() {
        assert_eq!(
            top_k_gate(&TensorBatch::zeros(1, 3), 4),
            Err(MoeError::KTooLarge { k: 4, n: 3 })
        );
    }

    #[test]
    fn gate_assignment_validation() {
        assert!(GateAssignment::new(vec![vec![(0, 0.5), (0, 0.5)]], 4, 2).is_err());
        assert!(GateAssignment::new(vec![vec![(0, 0.5), (1, 0.6)]], 4, 2).is_err());
        assert!(GateAssignment::new(vec![vec![(0, 1.0)]], 4, 2).is_err());
        assert!(GateAssignment::new(vec![vec![(9, 1.0)]], 4, 1).is_err());
        assert!(GateAssignment::new(vec![vec![(1, 0.25), (3, 0.75)]], 4, 2).is_ok());
    }

    #[test]
    fn naive_calls_are_k_times_b() {
        let experts = MoeExperts::seeded(16, 8, 8, 3);
        let inputs = random_batch(256, 8, 4);
        let gates = top_k_gate(&random_batch(256, 16, 5), 4).unwrap();
        let (_, trace) = moe_forward_naive(&inputs, &experts, &gates).unwrap();
        assert_eq!(trace.expensive_calls, 1024);
    }

    #[test]
    fn single_expert_with_unit_weight_is_that_expert() {
        let experts = MoeExperts::seeded(4, 6, 5, 3);
        let inputs = random_batch(3, 6, 4);
        let gates = GateAssignment::new(vec![vec![(2, 1.0)]; 3], 4, 1).unwrap();
        let (out, _) = moe_forward_naive(&inputs, &experts, &gates).unwrap();
        assert_eq!(out, experts.apply(2, &inputs).unwrap());
    }

    /// Independent per-example loop: expert math written out directly.
    fn hand_rolled(
        inputs: &TensorBatch,
        experts: &MoeExperts,
        gates: &GateAssignment,
    ) -> Vec<Vec<f64>> {
        let (d, h) = (experts.data_dim, experts.hidden);
        (0..inputs.rows())
            .map(|e| {
                let x = inputs.row(e);
                let mut out = vec![0.0; d];
                for &(id, w) in gates.example(e) {
                    let ex = &experts.experts[id];
                    let hidden: Vec<f64> = (0..h)
                        .map(|j| {
                            let s: f64 = (0..d).fold(0.0, |acc, i| acc + ex.w_in[j * d + i] * x[i]);
                            if s < 0.0 {
                                0.0
                            } else {
                                s
                            }
                        })
                        .collect();
                    for (o, acc) in out.iter_mut().enumerate() {
                        let y = (0..h).fold(0.0, |a, j| a + ex.w_out[o * h + j] * hidden[j]);
                        *acc += w * y;
                    }
                }
                out
            })
            .collect()
    }

    #[test]
    fn small_case_matches_hand_rolled_loop() {
        let experts = MoeExperts::seeded(4, 5, 6, 42);
        let inputs = random_batch(3, 5, 43);
        let gates = top_k_gate(&random_batch(3, 4, 44), 2).unwrap();
        let expected = hand_rolled(&inputs, &experts, &gates);
        let (naive, _) = moe_forward_naive(&inputs, &experts, &gates).unwrap();
        let (batched, trace) = moe_forward_batched(&inputs, &experts, &gates).unwrap();
        for (e, row) in expected.iter().enumerate() {
            assert_eq!(naive.row(e), row.as_slice());
            assert_eq!(batched.row(e), row.as_slice());
        }
        assert!(trace.expensive_calls <= 4);
    }

    #[test]
    fn batched_calls_active_experts_once() {
        let experts = MoeExperts::seeded(64, 8, 8, 1);
        let inputs = random_batch(256, 8, 2);
        let gates = top_k_gate(&random_batch(256, 64, 3), 4).unwrap();
        let (naive, nt) = moe_forward_naive(&inputs, &experts, &gates).unwrap();
        let (batched, bt) = moe_forward_batched(&inputs, &experts, &gates).unwrap();
        assert_eq!(nt.expensive_calls, 1024);
        assert_eq!(bt.expensive_calls, gates.active_experts());
        assert!(bt.expensive_calls <= 64);
        assert_eq!(naive, batched);
    }

    #[test]
    fn all_to_expert_zero_is_one_call() {
        let experts = MoeExperts::seeded(8, 4, 4, 1);
        let inputs = random_batch(50, 4, 2);
        let gates = GateAssignment::new(vec![vec![(0, 1.0)]; 50], 8, 1).unwrap();
        let (_, trace) = moe_forward_batched(&inputs, &experts, &gates).unwrap();
        assert_eq!(trace.expensive_calls, 1);
        assert_eq!(trace.peak_group_rows, 50);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.k = c.n + 1;
        assert!(matches!(c.validate(), Err(MoeError::KTooLarge { .. })));
    }
}
