//! Seeded program and MoE workload generators.
//!
//! Every generator takes its randomness from a ChaCha8 stream derived from the
//! workload seed, so a `(spec, seed)` pair always produces the same batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::TensorBatch;
use crate::moe::{top_k_gate, GateAssignment, MoeConfig, MoeError};
use crate::program::{
    build_program_from_prefix, FunctionVocab, Node, NodeId, Program, ProgramError, VocabError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkloadError {
    #[error("vocabulary has no function of arity {0}")]
    VocabMissingArity(usize),
    #[error("invalid workload parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Moe(#[from] MoeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    BalancedTree,
    ChainHeavy,
    RandomDag,
    Moe,
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "balanced_tree" => Ok(WorkloadKind::BalancedTree),
            "chain_heavy" => Ok(WorkloadKind::ChainHeavy),
            "random_dag" => Ok(WorkloadKind::RandomDag),
            "moe" => Ok(WorkloadKind::Moe),
            other => Err(format!(
                "unknown workload shape '{other}' (expected balanced-tree, chain-heavy, random-dag or moe)"
            )),
        }
    }
}

/// Parameters for one generated workload.
///
/// Which size fields matter depends on `kind`: `depth` for balanced trees,
/// `min_len..=max_len` and `branch_prob` for chain-heavy programs and random
/// DAGs, `moe` for MoE layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub b: usize,
    pub p: usize,
    pub width: usize,
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub min_len: usize,
    #[serde(default)]
    pub max_len: usize,
    #[serde(default)]
    pub branch_prob: f64,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn balanced_tree(b: usize, p: usize, depth: usize, width: usize, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::BalancedTree,
            b,
            p,
            width,
            depth,
            min_len: 0,
            max_len: 0,
            branch_prob: 0.0,
            moe: None,
            seed,
        }
    }

    /// CLEVR-like defaults: mostly unary chains with a 10% branch rate.
    pub fn chain_heavy(
        b: usize,
        p: usize,
        min_len: usize,
        max_len: usize,
        width: usize,
        seed: u64,
    ) -> Self {
        Self {
            kind: WorkloadKind::ChainHeavy,
            b,
            p,
            width,
            depth: 0,
            min_len,
            max_len,
            branch_prob: 0.1,
            moe: None,
            seed,
        }
    }

    pub fn random_dag(b: usize, p: usize, max_len: usize, width: usize, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::RandomDag,
            min_len: 1,
            max_len,
            branch_prob: 0.5,
            ..Self::chain_heavy(b, p, 1, max_len, width, seed)
        }
    }

    pub fn moe(cfg: MoeConfig, seed: u64) -> Self {
        Self {
            kind: WorkloadKind::Moe,
            b: cfg.b,
            p: cfg.n,
            width: cfg.data_dim,
            depth: 0,
            min_len: 0,
            max_len: 0,
            branch_prob: 0.0,
            moe: Some(cfg),
            seed,
        }
    }

    pub fn with_branch_prob(mut self, branch_prob: f64) -> Self {
        self.branch_prob = branch_prob;
        self
    }
}

/// A batch of programs with one seeded input row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramBatch {
    pub vocab: FunctionVocab,
    pub programs: Vec<Program>,
    pub inputs: TensorBatch,
}

/// Gate scores, assignments and inputs for one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeWorkload {
    pub config: MoeConfig,
    pub inputs: TensorBatch,
    pub scores: TensorBatch,
    pub gates: GateAssignment,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    Programs(ProgramBatch),
    Moe(MoeWorkload),
}

fn pick(rng: &mut ChaCha8Rng, choices: &[usize], arity: usize) -> Result<usize, WorkloadError> {
    choices
        .choose(rng)
        .copied()
        .ok_or(WorkloadError::VocabMissingArity(arity))
}

struct ArityTable {
    leaf: Vec<usize>,
    unary: Vec<usize>,
    binary: Vec<usize>,
}

impl ArityTable {
    fn new(vocab: &FunctionVocab) -> Self {
        Self {
            leaf: vocab.with_arity(0),
            unary: vocab.with_arity(1),
            binary: vocab.with_arity(2),
        }
    }
}

/// Full binary tree with `depth` levels: `2^depth - 1` nodes, arity-2
/// internal nodes, arity-0 leaves.
pub fn gen_balanced_tree(
    depth: usize,
    vocab: &FunctionVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Program, WorkloadError> {
    if depth == 0 {
        return Err(WorkloadError::InvalidParameter(
            "depth must be at least 1".into(),
        ));
    }
    let table = ArityTable::new(vocab);
    if depth > 1 && table.binary.is_empty() {
        return Err(WorkloadError::VocabMissingArity(2));
    }
    let size = (1usize << depth) - 1;
    let mut prefix = Vec::with_capacity(size);
    // Prefix order of a full tree: stack of remaining levels.
    let mut stack = vec![depth];
    while let Some(levels) = stack.pop() {
        if levels == 1 {
            prefix.push(pick(rng, &table.leaf, 0)?);
        } else {
            prefix.push(pick(rng, &table.binary, 2)?);
            stack.push(levels - 1);
            stack.push(levels - 1);
        }
    }
    Ok(build_program_from_prefix(&prefix, vocab)?)
}

/// Mostly-unary program of exactly `length` nodes. Each node with room for two
/// subtrees branches with probability `branch_prob`, splitting its remaining
/// nodes evenly; with `branch_prob = 0` the result is a pure chain.
pub fn gen_chain_heavy(
    length: usize,
    branch_prob: f64,
    vocab: &FunctionVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Program, WorkloadError> {
    if length == 0 {
        return Err(WorkloadError::InvalidParameter(
            "length must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&branch_prob) {
        return Err(WorkloadError::InvalidParameter(format!(
            "branch_prob {branch_prob} outside [0, 1]"
        )));
    }
    let table = ArityTable::new(vocab);
    let mut prefix = Vec::with_capacity(length);
    let mut stack = vec![length];
    while let Some(n) = stack.pop() {
        match n {
            1 => prefix.push(pick(rng, &table.leaf, 0)?),
            n if n >= 3 && !table.binary.is_empty() && rng.gen_bool(branch_prob) => {
                prefix.push(pick(rng, &table.binary, 2)?);
                let left = (n - 1).div_ceil(2);
                stack.push(n - 1 - left);
                stack.push(left);
            }
            n => {
                prefix.push(pick(rng, &table.unary, 1)?);
                stack.push(n - 1);
            }
        }
    }
    Ok(build_program_from_prefix(&prefix, vocab)?)
}

/// Random DAG with shared children. Nodes are created bottom-up, each picking
/// its children among earlier nodes; the last node is the root and anything it
/// cannot reach is dropped. The result has at most `max_nodes` nodes and root
/// id 0.
pub fn gen_random_dag(
    max_nodes: usize,
    branch_prob: f64,
    vocab: &FunctionVocab,
    rng: &mut ChaCha8Rng,
) -> Result<Program, WorkloadError> {
    if max_nodes == 0 {
        return Err(WorkloadError::InvalidParameter(
            "max_nodes must be at least 1".into(),
        ));
    }
    let table = ArityTable::new(vocab);
    let mut raw: Vec<Node> = Vec::with_capacity(max_nodes);
    for i in 0..max_nodes {
        let node = if i == 0 || (i < max_nodes - 1 && rng.gen_bool(0.15)) {
            Node {
                function_id: pick(rng, &table.leaf, 0)?,
                children: vec![],
            }
        } else if i >= 2 && !table.binary.is_empty() && rng.gen_bool(branch_prob) {
            let a = rng.gen_range(0..i);
            let mut b = rng.gen_range(0..i - 1);
            if b >= a {
                b += 1;
            }
            Node {
                function_id: pick(rng, &table.binary, 2)?,
                children: vec![a, b],
            }
        } else {
            // Bias towards recent nodes so depth grows.
            let lo = i.saturating_sub(3);
            Node {
                function_id: pick(rng, &table.unary, 1)?,
                children: vec![rng.gen_range(lo..i)],
            }
        };
        raw.push(node);
    }
    // Keep what the root reaches, renumbered in prefix-DFS order.
    let root = max_nodes - 1;
    let mut new_id: Vec<Option<NodeId>> = vec![None; max_nodes];
    let mut order = Vec::new();
    let mut stack = vec![root];
    while let Some(id) = stack.pop() {
        if new_id[id].is_some() {
            continue;
        }
        new_id[id] = Some(order.len());
        order.push(id);
        stack.extend(raw[id].children.iter().rev());
    }
    let nodes = order
        .iter()
        .map(|&old| Node {
            function_id: raw[old].function_id,
            children: raw[old]
                .children
                .iter()
                .map(|&c| new_id[c].expect("children of kept nodes are kept"))
                .collect(),
        })
        .collect();
    Ok(Program::from_parts(nodes, 0))
}

fn seeded_rows(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> TensorBatch {
    let data = (0..rows * width)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    TensorBatch::from_vec(rows, width, data).expect("shape is consistent by construction")
}

// Independent randomness for structure, inputs and gates.
const STREAM_PROGRAMS: u64 = 1;
const STREAM_INPUTS: u64 = 2;
const STREAM_SCORES: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates the workload described by `spec`.
pub fn gen_batch(spec: &WorkloadSpec) -> Result<Workload, WorkloadError> {
    if spec.kind == WorkloadKind::Moe {
        return gen_moe(spec).map(Workload::Moe);
    }
    let vocab = FunctionVocab::mixed(spec.p, spec.width)?;
    let mut rng = rng_for(spec.seed, STREAM_PROGRAMS);
    let length_range = || {
        if spec.min_len == 0 || spec.min_len > spec.max_len {
            Err(WorkloadError::InvalidParameter(format!(
                "length range {}..={} is empty or starts at 0",
                spec.min_len, spec.max_len
            )))
        } else {
            Ok(spec.min_len..=spec.max_len)
        }
    };
    let mut programs = Vec::with_capacity(spec.b);
    for _ in 0..spec.b {
        let program = match spec.kind {
            WorkloadKind::BalancedTree => gen_balanced_tree(spec.depth, &vocab, &mut rng)?,
            WorkloadKind::ChainHeavy => {
                let len = rng.gen_range(length_range()?);
                gen_chain_heavy(len, spec.branch_prob, &vocab, &mut rng)?
            }
            WorkloadKind::RandomDag => {
                let len = rng.gen_range(length_range()?);
                gen_random_dag(len, spec.branch_prob, &vocab, &mut rng)?
            }
            WorkloadKind::Moe => unreachable!(),
        };
        programs.push(program);
    }
    let inputs = seeded_rows(spec.b, spec.width, &mut rng_for(spec.seed, STREAM_INPUTS));
    Ok(Workload::Programs(ProgramBatch {
        vocab,
        programs,
        inputs,
    }))
}

/// Convenience wrapper for the program kinds.
pub fn gen_program_batch(spec: &WorkloadSpec) -> Result<ProgramBatch, WorkloadError> {
    match gen_batch(spec)? {
        Workload::Programs(batch) => Ok(batch),
        Workload::Moe(_) => Err(WorkloadError::InvalidParameter(
            "moe workloads do not contain programs".into(),
        )),
    }
}

/// Seeded inputs plus top-k gates over seeded uniform scores.
pub fn gen_moe(spec: &WorkloadSpec) -> Result<MoeWorkload, WorkloadError> {
    let config = spec
        .moe
        .ok_or_else(|| WorkloadError::InvalidParameter("moe workload needs a MoeConfig".into()))?;
    config.validate()?;
    let inputs = seeded_rows(
        config.b,
        config.data_dim,
        &mut rng_for(spec.seed, STREAM_INPUTS),
    );
    let scores = seeded_rows(config.b, config.n, &mut rng_for(spec.seed, STREAM_SCORES));
    let gates = top_k_gate(&scores, config.k)?;
    Ok(MoeWorkload {
        config,
        inputs,
        scores,
        gates,
    })
}
