//! Batch schedulers.
//!
//! A [`Schedule`] is an ordered list of steps; each step holds call groups that
//! are mutually independent, and each [`CallGroup`] is one invocation of one
//! function over a stacked set of node instances. Four strategies build them:
//!
//! - [`schedule_naive`]: one node per step, example after example.
//! - [`schedule_standard`]: post-order flatten each program into a row of a
//!   `b x s` grid, then run the grid column by column.
//! - [`schedule_improved`]: pool nodes across the batch by their maximum
//!   distance from the root and run pools deepest first.
//! - [`schedule_online_batch`]: repeatedly batch whatever is ready right now
//!   ([`schedule_online`] builds a single step).
//!
//! Applicability, measured in expensive calls:
//!
//! | architecture                           | strategy  | bound              |
//! |----------------------------------------|-----------|--------------------|
//! | balanced tree, arities known up front  | improved  | `p * log2(s + 1)`  |
//! | general DAG known up front             | improved  | `p * (d + 1)`      |
//! | known up front, any shape              | standard  | `min(p, b) * s`    |
//! | next module only known at run time     | online    | `p * (d + 1)`      |
//!
//! Cyclic architectures are rejected; callers unroll them to their maximum
//! iteration count first, in which case `d` is the unrolled length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::program::{
    max_root_distance_labels, postorder_flatten, FunctionVocab, NodeId, Program, ProgramError,
};

/// Addresses one node of one example in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NodeRef {
    pub example: usize,
    pub node: NodeId,
}

impl NodeRef {
    pub fn new(example: usize, node: NodeId) -> Self {
        Self { example, node }
    }
}

impl From<(usize, usize)> for NodeRef {
    fn from((example, node): (usize, usize)) -> Self {
        Self { example, node }
    }
}

impl From<NodeRef> for (usize, usize) {
    fn from(r: NodeRef) -> Self {
        (r.example, r.node)
    }
}

impl std::fmt::Display for NodeRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.example, self.node)
    }
}

/// One batched invocation of `function_id` over `members`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallGroup {
    pub function_id: usize,
    pub members: Vec<NodeRef>,
}

pub type Step = Vec<CallGroup>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    Standard,
    Improved,
    Online,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Naive,
        Strategy::Standard,
        Strategy::Improved,
        Strategy::Online,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Standard => "standard",
            Strategy::Improved => "improved",
            Strategy::Online => "online",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Strategy::Naive),
            "standard" => Ok(Strategy::Standard),
            "improved" => Ok(Strategy::Improved),
            "online" => Ok(Strategy::Online),
            other => Err(format!(
                "unknown scheduler '{other}' (expected naive, standard, improved or online)"
            )),
        }
    }
}

/// Serializes as `{"strategy": ..., "steps": [[{"function_id", "members": [[e, n], ...]}]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    pub strategy: Strategy,
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn groups(&self) -> impl Iterator<Item = &CallGroup> {
        self.steps.iter().flatten()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serialization is infallible")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("example {example}: {source}")]
    InvalidProgram {
        example: usize,
        #[source]
        source: ProgramError,
    },
    #[error("frontier node {node} depends on unexecuted {child}")]
    DependencyViolation { node: NodeRef, child: NodeRef },
}

/// Shape statistics of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub b: usize,
    pub p: usize,
    pub s_max: usize,
    pub d_max: usize,
    pub expensive_nodes: usize,
}

impl BatchStats {
    pub fn of(batch: &[Program], vocab: &FunctionVocab) -> Result<Self, ScheduleError> {
        let mut stats = BatchStats {
            b: batch.len(),
            p: vocab.size(),
            s_max: 0,
            d_max: 0,
            expensive_nodes: 0,
        };
        for (example, program) in batch.iter().enumerate() {
            let labels = max_root_distance_labels(program)
                .map_err(|source| ScheduleError::InvalidProgram { example, source })?;
            stats.s_max = stats.s_max.max(program.len());
            stats.d_max = stats.d_max.max(labels.max_label);
            stats.expensive_nodes += program
                .nodes()
                .iter()
                .filter(|n| vocab.is_expensive(n.function_id))
                .count();
        }
        Ok(stats)
    }
}

fn flatten_all(batch: &[Program]) -> Result<Vec<Vec<NodeId>>, ScheduleError> {
    batch
        .iter()
        .enumerate()
        .map(|(example, p)| {
            postorder_flatten(p).map_err(|source| ScheduleError::InvalidProgram { example, source })
        })
        .collect()
}

/// Groups node references by function id. Groups come out in ascending
/// function order and members in ascending `(example, node)` order.
fn group_by_function(items: impl IntoIterator<Item = (usize, NodeRef)>) -> Step {
    let mut pools: BTreeMap<usize, Vec<NodeRef>> = BTreeMap::new();
    for (function_id, node) in items {
        pools.entry(function_id).or_default().push(node);
    }
    pools
        .into_iter()
        .map(|(function_id, mut members)| {
            members.sort_unstable();
            CallGroup {
                function_id,
                members,
            }
        })
        .collect()
}

/// Sequential baseline: every node is its own call, example by example.
pub fn schedule_naive(batch: &[Program]) -> Result<Schedule, ScheduleError> {
    let orders = flatten_all(batch)?;
    let steps = orders
        .iter()
        .enumerate()
        .flat_map(|(example, order)| {
            order.iter().map(move |&node| {
                vec![CallGroup {
                    function_id: batch[example].node(node).function_id,
                    members: vec![NodeRef::new(example, node)],
                }]
            })
        })
        .collect();
    Ok(Schedule {
        strategy: Strategy::Naive,
        steps,
    })
}

/// Column-batched execution of the post-order grid.
///
/// Column `i` holds the `i`-th flattened node of every program at least
/// `i + 1` long; shorter programs drop out of later columns without padding.
pub fn schedule_standard(batch: &[Program]) -> Result<Schedule, ScheduleError> {
    let orders = flatten_all(batch)?;
    let s_max = orders.iter().map(Vec::len).max().unwrap_or(0);
    let steps = (0..s_max)
        .map(|column| {
            group_by_function(orders.iter().enumerate().filter_map(|(example, order)| {
                order.get(column).map(|&node| {
                    (
                        batch[example].node(node).function_id,
                        NodeRef::new(example, node),
                    )
                })
            }))
        })
        .collect();
    Ok(Schedule {
        strategy: Strategy::Standard,
        steps,
    })
}

/// Depth pooling: nodes sharing a max-root-distance label run together,
/// deepest label first. Produces exactly `d_max + 1` steps.
pub fn schedule_improved(batch: &[Program]) -> Result<Schedule, ScheduleError> {
    let mut pools: Vec<Vec<(usize, NodeRef)>> = Vec::new();
    for (example, program) in batch.iter().enumerate() {
        let labels = max_root_distance_labels(program)
            .map_err(|source| ScheduleError::InvalidProgram { example, source })?;
        if pools.len() <= labels.max_label {
            pools.resize_with(labels.max_label + 1, Vec::new);
        }
        for (node, &label) in labels.labels.iter().enumerate() {
            pools[label].push((program.node(node).function_id, NodeRef::new(example, node)));
        }
    }
    let steps = pools.into_iter().rev().map(group_by_function).collect();
    Ok(Schedule {
        strategy: Strategy::Improved,
        steps,
    })
}

/// A ready node offered to the online scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontierNode {
    pub node: NodeRef,
    pub function_id: usize,
}

/// Builds one step from the currently known modules, grouped by function.
///
/// `children` reports a frontier node's dependencies (node ids within the same
/// example); `executed` reports whether a node's value already exists.
pub fn schedule_online<'a, C, E>(
    frontier: &[FrontierNode],
    children: C,
    executed: E,
) -> Result<Step, ScheduleError>
where
    C: Fn(NodeRef) -> &'a [NodeId],
    E: Fn(NodeRef) -> bool,
{
    for f in frontier {
        for &child in children(f.node) {
            let child = NodeRef::new(f.node.example, child);
            if !executed(child) {
                return Err(ScheduleError::DependencyViolation {
                    node: f.node,
                    child,
                });
            }
        }
    }
    Ok(group_by_function(
        frontier.iter().map(|f| (f.function_id, f.node)),
    ))
}

/// Drives [`schedule_online`] over a whole batch, always offering the maximal
/// ready frontier, until every node has been scheduled.
pub fn schedule_online_batch(batch: &[Program]) -> Result<Schedule, ScheduleError> {
    for (example, p) in batch.iter().enumerate() {
        p.check_structure()
            .map_err(|source| ScheduleError::InvalidProgram { example, source })?;
    }
    // Per node: number of distinct children not yet executed, and parent lists.
    let mut pending: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    let mut parents: Vec<Vec<Vec<NodeId>>> = Vec::with_capacity(batch.len());
    let mut done: Vec<Vec<bool>> = Vec::with_capacity(batch.len());
    let mut frontier = Vec::new();
    for (example, program) in batch.iter().enumerate() {
        let mut counts = vec![0usize; program.len()];
        let mut ps = vec![Vec::new(); program.len()];
        for (id, node) in program.nodes().iter().enumerate() {
            let mut distinct = node.children.clone();
            distinct.sort_unstable();
            distinct.dedup();
            counts[id] = distinct.len();
            for c in distinct {
                ps[c].push(id);
            }
        }
        for (id, &c) in counts.iter().enumerate() {
            if c == 0 {
                frontier.push(FrontierNode {
                    node: NodeRef::new(example, id),
                    function_id: program.node(id).function_id,
                });
            }
        }
        pending.push(counts);
        parents.push(ps);
        done.push(vec![false; program.len()]);
    }

    let mut steps = Vec::new();
    while !frontier.is_empty() {
        let step = schedule_online(
            &frontier,
            |r| batch[r.example].node(r.node).children.as_slice(),
            |r| done[r.example][r.node],
        )?;
        let mut next = Vec::new();
        for f in &frontier {
            done[f.node.example][f.node.node] = true;
        }
        for f in &frontier {
            let ex = f.node.example;
            for &parent in &parents[ex][f.node.node] {
                pending[ex][parent] -= 1;
                if pending[ex][parent] == 0 {
                    next.push(FrontierNode {
                        node: NodeRef::new(ex, parent),
                        function_id: batch[ex].node(parent).function_id,
                    });
                }
            }
        }
        steps.push(step);
        frontier = next;
    }
    Ok(Schedule {
        strategy: Strategy::Online,
        steps,
    })
}

/// Builds a schedule with the given strategy.
pub fn build_schedule(strategy: Strategy, batch: &[Program]) -> Result<Schedule, ScheduleError> {
    match strategy {
        Strategy::Naive => schedule_naive(batch),
        Strategy::Standard => schedule_standard(batch),
        Strategy::Improved => schedule_improved(batch),
        Strategy::Online => schedule_online_batch(batch),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleViolation {
    EmptyGroup {
        step: usize,
    },
    UnknownNode {
        node: NodeRef,
    },
    FunctionMismatch {
        node: NodeRef,
        group_function: usize,
    },
    DuplicateExecution {
        node: NodeRef,
    },
    MissingNode {
        node: NodeRef,
    },
    DependencyOrderViolation {
        parent: NodeRef,
        child: NodeRef,
    },
}

impl ScheduleViolation {
    pub fn name(&self) -> &'static str {
        match self {
            ScheduleViolation::EmptyGroup { .. } => "EmptyGroup",
            ScheduleViolation::UnknownNode { .. } => "UnknownNode",
            ScheduleViolation::FunctionMismatch { .. } => "FunctionMismatch",
            ScheduleViolation::DuplicateExecution { .. } => "DuplicateExecution",
            ScheduleViolation::MissingNode { .. } => "MissingNode",
            ScheduleViolation::DependencyOrderViolation { .. } => "DependencyOrderViolation",
        }
    }
}

impl std::fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleViolation::EmptyGroup { step } => write!(f, "EmptyGroup(step={step})"),
            ScheduleViolation::UnknownNode { node }
            | ScheduleViolation::DuplicateExecution { node }
            | ScheduleViolation::MissingNode { node } => write!(f, "{}{node}", self.name()),
            ScheduleViolation::FunctionMismatch {
                node,
                group_function,
            } => write!(f, "FunctionMismatch({node} in group {group_function})"),
            ScheduleViolation::DependencyOrderViolation { parent, child } => {
                write!(
                    f,
                    "DependencyOrderViolation(parent={parent}, child={child})"
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub violations: Vec<ScheduleViolation>,
}

impl ScheduleReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustively checks completeness (each node exactly once) and dependency
/// order (children in strictly earlier steps than parents).
pub fn verify_schedule(schedule: &Schedule, batch: &[Program]) -> ScheduleReport {
    let mut violations = Vec::new();
    let mut step_of: Vec<Vec<Option<usize>>> = batch.iter().map(|p| vec![None; p.len()]).collect();
    for (step_index, step) in schedule.steps.iter().enumerate() {
        for group in step {
            if group.members.is_empty() {
                violations.push(ScheduleViolation::EmptyGroup { step: step_index });
            }
            for &member in &group.members {
                let Some(slot) = step_of
                    .get_mut(member.example)
                    .and_then(|nodes| nodes.get_mut(member.node))
                else {
                    violations.push(ScheduleViolation::UnknownNode { node: member });
                    continue;
                };
                if slot.is_some() {
                    violations.push(ScheduleViolation::DuplicateExecution { node: member });
                    continue;
                }
                *slot = Some(step_index);
                let actual = batch[member.example].node(member.node).function_id;
                if actual != group.function_id {
                    violations.push(ScheduleViolation::FunctionMismatch {
                        node: member,
                        group_function: group.function_id,
                    });
                }
            }
        }
    }
    for (example, program) in batch.iter().enumerate() {
        for (node, step) in step_of[example].iter().enumerate() {
            if step.is_none() {
                violations.push(ScheduleViolation::MissingNode {
                    node: NodeRef::new(example, node),
                });
            }
        }
        for (parent, child) in program.edges() {
            let (Some(ps), Some(Some(cs))) =
                (step_of[example][parent], step_of[example].get(child))
            else {
                continue;
            };
            if *cs >= ps {
                violations.push(ScheduleViolation::DependencyOrderViolation {
                    parent: NodeRef::new(example, parent),
                    child: NodeRef::new(example, child),
                });
            }
        }
    }
    ScheduleReport { violations }
}

/// Number of call groups whose function is expensive.
pub fn count_expensive_calls(schedule: &Schedule, vocab: &FunctionVocab) -> usize {
    schedule
        .groups()
        .filter(|g| vocab.is_expensive(g.function_id))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{build_program_from_prefix, CostClass};

    const Z: usize = 0;
    const U: usize = 1;
    const B: usize = 2;
    const U2: usize = 3;

    fn vocab() -> FunctionVocab {
        FunctionVocab::from_arities(
            [
                (0, CostClass::Free),
                (1, CostClass::Expensive),
                (2, CostClass::Expensive),
                (1, CostClass::Expensive),
            ],
            4,
        )
        .unwrap()
    }

    fn prog(seq: &[usize]) -> Program {
        build_program_from_prefix(seq, &vocab()).unwrap()
    }

    #[test]
    fn naive_counts() {
        let v = vocab();
        let s = schedule_naive(&[prog(&[Z])]).unwrap();
        assert_eq!(count_expensive_calls(&s, &v), 0);
        assert_eq!(s.steps.len(), 1);

        let five = prog(&[U, U, U, U, U, Z]);
        let s = schedule_naive(&[five.clone(), five.clone()]).unwrap();
        assert_eq!(count_expensive_calls(&s, &v), 10);
        assert!(verify_schedule(&s, &[five.clone(), five]).is_valid());
    }

    #[test]
    fn standard_identical_programs_collapse() {
        let v = vocab();
        let p = prog(&[B, U, Z, U2, Z]);
        for b in [1, 7, 100] {
            let batch = vec![p.clone(); b];
            let s = schedule_standard(&batch).unwrap();
            assert_eq!(s.steps.len(), 5);
            assert_eq!(count_expensive_calls(&s, &v), 3);
            assert!(verify_schedule(&s, &batch).is_valid());
        }
    }

    #[test]
    fn standard_ragged_columns() {
        // s=3 and s=5: grid occupancy by hand gives columns 3 and 4 holding only
        // example 1's nodes.
        let short = prog(&[U, U, Z]);
        let long = prog(&[U, U, U, U, Z]);
        let batch = vec![short, long];
        let s = schedule_standard(&batch).unwrap();
        assert_eq!(s.steps.len(), 5);
        for column in 3..5 {
            let members: Vec<_> = s.steps[column]
                .iter()
                .flat_map(|g| g.members.iter())
                .collect();
            assert_eq!(members.len(), 1);
            assert_eq!(members[0].example, 1);
        }
        for column in 0..3 {
            let count: usize = s.steps[column].iter().map(|g| g.members.len()).sum();
            assert_eq!(count, 2);
        }
        assert!(verify_schedule(&s, &batch).is_valid());
    }

    #[test]
    fn improved_step_counts() {
        let s = schedule_improved(&[prog(&[Z])]).unwrap();
        assert_eq!(s.steps.len(), 1);

        let chain = prog(&[U, U, U, U, U, U, U, U, U, Z]);
        let batch = vec![chain.clone(), chain];
        let improved = schedule_improved(&batch).unwrap();
        let standard = schedule_standard(&batch).unwrap();
        assert_eq!(improved.steps.len(), 10);
        assert_eq!(standard.steps.len(), 10);
    }

    #[test]
    fn improved_pools_deepest_first() {
        let batch = vec![prog(&[B, U, Z, Z]), prog(&[U, Z])];
        let s = schedule_improved(&batch).unwrap();
        // labels: ex0 root 0, u 1, z(under u) 2, z 1; ex1 root 0, z 1
        assert_eq!(s.steps.len(), 3);
        assert_eq!(
            s.steps[0],
            vec![CallGroup {
                function_id: Z,
                members: vec![NodeRef::new(0, 2)]
            }]
        );
        assert_eq!(
            s.steps[1],
            vec![
                CallGroup {
                    function_id: Z,
                    members: vec![NodeRef::new(0, 3), NodeRef::new(1, 1)]
                },
                CallGroup {
                    function_id: U,
                    members: vec![NodeRef::new(0, 1)]
                },
            ]
        );
        assert!(verify_schedule(&s, &batch).is_valid());
    }

    #[test]
    fn online_groups_frontier_by_function() {
        let frontier: Vec<_> = (0..256)
            .map(|i| FrontierNode {
                node: NodeRef::new(i, 0),
                function_id: i % 4,
            })
            .collect();
        let step = schedule_online(&frontier, |_| &[], |_| true).unwrap();
        assert_eq!(step.len(), 4);
        assert!(step.iter().all(|g| g.members.len() == 64));
    }

    #[test]
    fn online_rejects_unready_node() {
        let batch = [prog(&[U, Z])];
        let frontier = [FrontierNode {
            node: NodeRef::new(0, 0),
            function_id: U,
        }];
        let err = schedule_online(
            &frontier,
            |r| batch[r.example].node(r.node).children.as_slice(),
            |_| false,
        )
        .unwrap_err();
        assert_eq!(
            err,
            ScheduleError::DependencyViolation {
                node: NodeRef::new(0, 0),
                child: NodeRef::new(0, 1)
            }
        );
    }

    #[test]
    fn online_batch_is_valid() {
        let batch = vec![prog(&[B, U, Z, Z]), prog(&[U, U, Z]), prog(&[Z])];
        let s = schedule_online_batch(&batch).unwrap();
        assert!(verify_schedule(&s, &batch).is_valid());
        assert_eq!(s.steps.len(), 3);
    }

    #[test]
    fn verify_flags_duplicate_and_order() {
        let batch = vec![prog(&[U, U, Z])];
        let mut s = schedule_improved(&batch).unwrap();
        s.steps[1][0].members.push(NodeRef::new(0, 2));
        let report = verify_schedule(&s, &batch);
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, ScheduleViolation::DuplicateExecution { .. })));

        let mut s = schedule_improved(&batch).unwrap();
        s.steps.swap(0, 1);
        let report = verify_schedule(&s, &batch);
        assert!(report
            .violations
            .iter()
            .any(|v| v.name() == "DependencyOrderViolation"));
    }

    #[test]
    fn verify_flags_missing_node() {
        let batch = vec![prog(&[U, Z])];
        let mut s = schedule_naive(&batch).unwrap();
        s.steps.pop();
        let report = verify_schedule(&s, &batch);
        assert_eq!(
            report.violations,
            vec![ScheduleViolation::MissingNode {
                node: NodeRef::new(0, 0)
            }]
        );
    }

    #[test]
    fn empty_schedule_has_no_calls() {
        let s = Schedule {
            strategy: Strategy::Naive,
            steps: vec![],
        };
        assert_eq!(count_expensive_calls(&s, &vocab()), 0);
        assert!(verify_schedule(&s, &[]).is_valid());
    }

    #[test]
    fn schedule_dump_format() {
        let s = schedule_standard(&[prog(&[U, Z])]).unwrap();
        assert_eq!(
            s.to_json(),
            r#"{"strategy":"standard","steps":[[{"function_id":0,"members":[[0,1]]}],[{"function_id":1,"members":[[0,0]]}]]}"#
        );
        let back: Schedule = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn invalid_program_rejected() {
        let cyclic = Program::from_parts(
            vec![crate::program::Node {
                function_id: U,
                children: vec![0],
            }],
            0,
        );
        for strategy in Strategy::ALL {
            assert!(matches!(
                build_schedule(strategy, std::slice::from_ref(&cyclic)),
                Err(ScheduleError::InvalidProgram { example: 0, .. })
            ));
        }
    }
}
