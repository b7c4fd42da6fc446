//! Per-example programs: arity-consistent DAGs over a shared function vocabulary.
//!
//! A [`Program`] is what one example executes. Programs are normally assembled
//! from a prefix (root-first) sequence of function ids, where each function's
//! arity determines how many following subtrees it consumes. The structural
//! passes here ([`max_root_distance_labels`], [`postorder_flatten`]) are what the
//! batch schedulers consume.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a node inside a single program.
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostClass {
    /// A neural module call; counted by every complexity measure.
    Expensive,
    /// Input providers and other bookkeeping nodes.
    Free,
}

/// One entry of the function vocabulary.
///
/// `in_width` is the width of each operand; a module of arity `a` consumes
/// `a * in_width` features after concatenation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub function_id: usize,
    pub arity: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub cost_class: CostClass,
}

impl ModuleSpec {
    pub fn is_expensive(&self) -> bool {
        self.cost_class == CostClass::Expensive
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("function ids must be 0..p in order; found id {found} at position {position}")]
    NonContiguousIds { position: usize, found: usize },
    #[error("function {0} has arity 0 but is not free")]
    ExpensiveInputProvider(usize),
    #[error("function {function_id} has width {found}, vocabulary width is {expected}")]
    NonUniformWidth {
        function_id: usize,
        expected: usize,
        found: usize,
    },
    #[error("function {0} has zero width")]
    ZeroWidth(usize),
    #[error("vocabulary has no arity-0 input provider")]
    NoInputProvider,
    #[error("vocabulary size {0} too small; need at least one input provider, one unary and one binary function")]
    TooSmall(usize),
}

/// The shared set of `p` modules every program in a batch is composed from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModuleSpec>", into = "Vec<ModuleSpec>")]
pub struct FunctionVocab {
    specs: Vec<ModuleSpec>,
}

impl FunctionVocab {
    pub fn new(specs: Vec<ModuleSpec>) -> Result<Self, VocabError> {
        let first = specs.first().ok_or(VocabError::Empty)?;
        let width = first.out_width;
        for (position, spec) in specs.iter().enumerate() {
            if spec.function_id != position {
                return Err(VocabError::NonContiguousIds {
                    position,
                    found: spec.function_id,
                });
            }
            if spec.in_width == 0 || spec.out_width == 0 {
                return Err(VocabError::ZeroWidth(spec.function_id));
            }
            for found in [spec.in_width, spec.out_width] {
                if found != width {
                    return Err(VocabError::NonUniformWidth {
                        function_id: spec.function_id,
                        expected: width,
                        found,
                    });
                }
            }
            if spec.arity == 0 && spec.is_expensive() {
                return Err(VocabError::ExpensiveInputProvider(spec.function_id));
            }
        }
        if !specs.iter().any(|s| s.arity == 0) {
            return Err(VocabError::NoInputProvider);
        }
        Ok(Self { specs })
    }

    /// Builds a vocabulary from `(arity, cost)` pairs with ids assigned in order.
    pub fn from_arities(
        entries: impl IntoIterator<Item = (usize, CostClass)>,
        width: usize,
    ) -> Result<Self, VocabError> {
        let specs = entries
            .into_iter()
            .enumerate()
            .map(|(function_id, (arity, cost_class))| ModuleSpec {
                function_id,
                arity,
                in_width: width,
                out_width: width,
                cost_class,
            })
            .collect();
        Self::new(specs)
    }

    /// The mixed vocabulary used by the workload generators: function 0 is the
    /// free input provider; the remaining `p - 1` functions alternate between
    /// expensive unary (odd ids) and expensive binary (even ids) modules.
    pub fn mixed(p: usize, width: usize) -> Result<Self, VocabError> {
        if p < 3 {
            return Err(VocabError::TooSmall(p));
        }
        let entries = (0..p).map(|id| match id {
            0 => (0, CostClass::Free),
            id if id % 2 == 1 => (1, CostClass::Expensive),
            _ => (2, CostClass::Expensive),
        });
        Self::from_arities(entries, width)
    }

    pub fn get(&self, function_id: usize) -> Option<&ModuleSpec> {
        self.specs.get(function_id)
    }

    pub fn specs(&self) -> &[ModuleSpec] {
        &self.specs
    }

    /// Vocabulary size `p`.
    pub fn size(&self) -> usize {
        self.specs.len()
    }

    /// Uniform feature width shared by every module.
    pub fn width(&self) -> usize {
        self.specs[0].out_width
    }

    pub fn is_expensive(&self, function_id: usize) -> bool {
        self.get(function_id).is_some_and(ModuleSpec::is_expensive)
    }

    /// Number of expensive functions in the vocabulary.
    pub fn expensive_count(&self) -> usize {
        self.specs.iter().filter(|s| s.is_expensive()).count()
    }

    /// Function ids with the given arity, in ascending order.
    pub fn with_arity(&self, arity: usize) -> Vec<usize> {
        self.specs
            .iter()
            .filter(|s| s.arity == arity)
            .map(|s| s.function_id)
            .collect()
    }
}

impl TryFrom<Vec<ModuleSpec>> for FunctionVocab {
    type Error = VocabError;

    fn try_from(specs: Vec<ModuleSpec>) -> Result<Self, Self::Error> {
        Self::new(specs)
    }
}

impl From<FunctionVocab> for Vec<ModuleSpec> {
    fn from(vocab: FunctionVocab) -> Self {
        vocab.specs
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Node {
    pub function_id: usize,
    pub children: Vec<NodeId>,
}

/// One example's module graph. Node ids are positions in `nodes`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    nodes: Vec<Node>,
    root: NodeId,
}

impl Program {
    /// Wraps raw nodes without checking any invariant. Use [`validate`] to
    /// inspect the result.
    pub fn from_parts(nodes: Vec<Node>, root: NodeId) -> Self {
        Self { nodes, root }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// Node count `s` of this program.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Iterates over every `(parent, child)` edge.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(parent, node)| node.children.iter().map(move |&child| (parent, child)))
    }

    /// Re-emits the function ids in prefix (root-first, children in stored
    /// order) order. For trees this inverts [`build_program_from_prefix`];
    /// shared children of a DAG are emitted once per reference.
    pub fn to_prefix(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            out.push(node.function_id);
            stack.extend(node.children.iter().rev());
        }
        out
    }

    /// Checks the structural invariants that do not need a vocabulary: the
    /// graph is non-empty, every reference is in range, the graph is acyclic
    /// and every node is reachable from the root.
    pub fn check_structure(&self) -> Result<(), ProgramError> {
        let violations = structural_violations(self);
        match violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(ProgramError::Invalid(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("empty function sequence")]
    EmptySequence,
    #[error("sequence ended with {missing} argument(s) still unfilled")]
    UnderfullSequence { missing: usize },
    #[error("{extra} token(s) remain after the root's subtree closed at position {closed_at}")]
    OverfullSequence { closed_at: usize, extra: usize },
    #[error("unknown function id {function_id} at position {position}")]
    UnknownFunction { position: usize, function_id: usize },
    #[error("invalid program: {0}")]
    Invalid(Violation),
}

/// Assembles a program from a prefix sequence of function ids.
///
/// Position 0 is the root; a node of arity `a` takes the next `a` complete
/// subtrees as its children. Node ids equal sequence positions.
pub fn build_program_from_prefix(
    functions: &[usize],
    vocab: &FunctionVocab,
) -> Result<Program, ProgramError> {
    if functions.is_empty() {
        return Err(ProgramError::EmptySequence);
    }
    let mut nodes: Vec<Node> = Vec::with_capacity(functions.len());
    // (node, arguments still owed)
    let mut open: Vec<(NodeId, usize)> = Vec::new();
    for (position, &function_id) in functions.iter().enumerate() {
        let spec = vocab
            .get(function_id)
            .ok_or(ProgramError::UnknownFunction {
                position,
                function_id,
            })?;
        if position > 0 {
            let Some(top) = open.last_mut() else {
                return Err(ProgramError::OverfullSequence {
                    closed_at: position - 1,
                    extra: functions.len() - position,
                });
            };
            nodes[top.0].children.push(position);
            top.1 -= 1;
            if top.1 == 0 {
                open.pop();
            }
        }
        nodes.push(Node {
            function_id,
            children: Vec::with_capacity(spec.arity),
        });
        if spec.arity > 0 {
            open.push((position, spec.arity));
        }
    }
    if !open.is_empty() {
        let missing = open.iter().map(|&(_, owed)| owed).sum();
        return Err(ProgramError::UnderfullSequence { missing });
    }
    Ok(Program { nodes, root: 0 })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyProgram,
    RootOutOfRange {
        root: NodeId,
    },
    DanglingChild {
        node: NodeId,
        child: NodeId,
    },
    UnknownFunction {
        node: NodeId,
        function_id: usize,
    },
    ArityMismatch {
        node: NodeId,
        expected: usize,
        found: usize,
    },
    CycleDetected {
        node: NodeId,
    },
    Unreachable {
        node: NodeId,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyProgram => write!(f, "EmptyProgram"),
            Violation::RootOutOfRange { root } => write!(f, "RootOutOfRange(root={root})"),
            Violation::DanglingChild { node, child } => {
                write!(f, "DanglingChild(node={node}, child={child})")
            }
            Violation::UnknownFunction { node, function_id } => {
                write!(f, "UnknownFunction(node={node}, function={function_id})")
            }
            Violation::ArityMismatch {
                node,
                expected,
                found,
            } => write!(
                f,
                "ArityMismatch(node={node}, expected={expected}, found={found})"
            ),
            Violation::CycleDetected { node } => write!(f, "CycleDetected(node={node})"),
            Violation::Unreachable { node } => write!(f, "Unreachable(node={node})"),
        }
    }
}

/// Every invariant violation found in a program. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every program invariant against `vocab`, collecting all violations.
pub fn validate(program: &Program, vocab: &FunctionVocab) -> ValidationReport {
    let mut violations = Vec::new();
    for (id, node) in program.nodes.iter().enumerate() {
        match vocab.get(node.function_id) {
            None => violations.push(Violation::UnknownFunction {
                node: id,
                function_id: node.function_id,
            }),
            Some(spec) if spec.arity != node.children.len() => {
                violations.push(Violation::ArityMismatch {
                    node: id,
                    expected: spec.arity,
                    found: node.children.len(),
                })
            }
            Some(_) => {}
        }
    }
    violations.extend(structural_violations(program));
    ValidationReport { violations }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mark {
    Unvisited,
    OnPath,
    Done,
}

fn structural_violations(program: &Program) -> Vec<Violation> {
    let n = program.nodes.len();
    if n == 0 {
        return vec![Violation::EmptyProgram];
    }
    let mut violations = Vec::new();
    for (id, node) in program.nodes.iter().enumerate() {
        for &child in &node.children {
            if child >= n {
                violations.push(Violation::DanglingChild { node: id, child });
            }
        }
    }
    if program.root >= n {
        violations.push(Violation::RootOutOfRange { root: program.root });
        return violations;
    }

    // Iterative three-colour DFS from the root; a back edge to an on-path node
    // is a cycle.
    let mut mark = vec![Mark::Unvisited; n];
    let mut stack: Vec<(NodeId, usize)> = vec![(program.root, 0)];
    mark[program.root] = Mark::OnPath;
    while let Some(&mut (id, ref mut next)) = stack.last_mut() {
        let children = &program.nodes[id].children;
        if *next < children.len() {
            let child = children[*next];
            *next += 1;
            if child >= n {
                continue;
            }
            match mark[child] {
                Mark::Unvisited => {
                    mark[child] = Mark::OnPath;
                    stack.push((child, 0));
                }
                Mark::OnPath => violations.push(Violation::CycleDetected { node: child }),
                Mark::Done => {}
            }
        } else {
            mark[id] = Mark::Done;
            stack.pop();
        }
    }
    violations.extend(
        mark.iter()
            .enumerate()
            .filter(|(_, m)| **m == Mark::Unvisited)
            .map(|(node, _)| Violation::Unreachable { node }),
    );
    violations
}

/// Longest root-to-node distance (in edges) for every node of a program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthLabels {
    pub labels: Vec<usize>,
    pub max_label: usize,
}

impl DepthLabels {
    pub fn get(&self, node: NodeId) -> usize {
        self.labels[node]
    }
}

/// Labels each node with its maximum distance from the root. A node shared by
/// several parents takes the largest label any path gives it.
pub fn max_root_distance_labels(program: &Program) -> Result<DepthLabels, ProgramError> {
    program.check_structure()?;
    // Reverse post-order is a topological order with parents first.
    let order = postorder_unchecked(program);
    let mut labels = vec![0usize; program.len()];
    for &id in order.iter().rev() {
        let next = labels[id] + 1;
        for &child in &program.nodes[id].children {
            if labels[child] < next {
                labels[child] = next;
            }
        }
    }
    let max_label = labels.iter().copied().max().unwrap_or(0);
    Ok(DepthLabels { labels, max_label })
}

/// Orders the nodes so every node comes after all of its children.
///
/// Children are visited in stored order and a shared child is emitted the
/// first time it is reached.
pub fn postorder_flatten(program: &Program) -> Result<Vec<NodeId>, ProgramError> {
    program.check_structure()?;
    Ok(postorder_unchecked(program))
}

fn postorder_unchecked(program: &Program) -> Vec<NodeId> {
    let mut out = Vec::with_capacity(program.len());
    let mut seen = vec![false; program.len()];
    let mut stack: Vec<(NodeId, usize)> = vec![(program.root, 0)];
    seen[program.root] = true;
    while let Some(&mut (id, ref mut next)) = stack.last_mut() {
        let children = &program.nodes[id].children;
        if *next < children.len() {
            let child = children[*next];
            *next += 1;
            if !seen[child] {
                seen[child] = true;
                stack.push((child, 0));
            }
        } else {
            out.push(id);
            stack.pop();
        }
    }
    out
}

/// JSON vocabulary entry of the program file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: usize,
    pub arity: usize,
    pub cost: CostClass,
}

/// `{"vocab": [{"id","arity","cost"}...], "programs": [[function_id,...], ...]}`
///
/// Programs are prefix sequences, one per example. Widths are not part of the
/// file and are supplied when converting to a [`FunctionVocab`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramFile {
    pub vocab: Vec<VocabEntry>,
    pub programs: Vec<Vec<usize>>,
}

impl ProgramFile {
    pub fn from_batch(vocab: &FunctionVocab, batch: &[Program]) -> Self {
        Self {
            vocab: vocab
                .specs()
                .iter()
                .map(|s| VocabEntry {
                    id: s.function_id,
                    arity: s.arity,
                    cost: s.cost_class,
                })
                .collect(),
            programs: batch.iter().map(Program::to_prefix).collect(),
        }
    }

    pub fn to_vocab(&self, width: usize) -> Result<FunctionVocab, VocabError> {
        let specs = self
            .vocab
            .iter()
            .map(|e| ModuleSpec {
                function_id: e.id,
                arity: e.arity,
                in_width: width,
                out_width: width,
                cost_class: e.cost,
            })
            .collect();
        FunctionVocab::new(specs)
    }

    pub fn to_batch(&self, vocab: &FunctionVocab) -> Result<Vec<Program>, ProgramError> {
        self.programs
            .iter()
            .map(|seq| build_program_from_prefix(seq, vocab))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // z: arity 0, u: arity 1, b: arity 2
    const Z: usize = 0;
    const U: usize = 1;
    const B: usize = 2;

    fn vocab() -> FunctionVocab {
        FunctionVocab::from_arities(
            [
                (0, CostClass::Free),
                (1, CostClass::Expensive),
                (2, CostClass::Expensive),
                (0, CostClass::Free),
            ],
            4,
        )
        .unwrap()
    }

    #[test]
    fn single_leaf_program() {
        let p = build_program_from_prefix(&[3], &vocab()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.root(), 0);
        assert!(p.node(0).children.is_empty());
    }

    #[test]
    fn unary_chain_from_prefix() {
        let p = build_program_from_prefix(&[U, U, Z], &vocab()).unwrap();
        assert_eq!(p.node(0).children, vec![1]);
        assert_eq!(p.node(1).children, vec![2]);
        let labels = max_root_distance_labels(&p).unwrap();
        assert_eq!(labels.labels, vec![0, 1, 2]);
        assert_eq!(labels.max_label, 2);
    }

    /// Counts required vs available tokens independently of the builder.
    fn arity_accounting(seq: &[usize], vocab: &FunctionVocab) -> Result<(), isize> {
        let mut need: isize = 1;
        for (i, &f) in seq.iter().enumerate() {
            if need == 0 {
                return Err(-((seq.len() - i) as isize));
            }
            need += vocab.get(f).unwrap().arity as isize - 1;
        }
        if need == 0 {
            Ok(())
        } else {
            Err(need)
        }
    }

    #[test]
    fn binary_tree_and_underfull() {
        let v = vocab();
        let p = build_program_from_prefix(&[B, Z, Z], &v).unwrap();
        assert_eq!(p.node(0).children, vec![1, 2]);
        assert!(validate(&p, &v).is_valid());

        assert_eq!(arity_accounting(&[B, Z], &v), Err(1));
        assert_eq!(
            build_program_from_prefix(&[B, Z], &v),
            Err(ProgramError::UnderfullSequence { missing: 1 })
        );
    }

    #[test]
    fn overfull_and_unknown() {
        let v = vocab();
        assert_eq!(arity_accounting(&[U, Z, Z], &v), Err(-1));
        assert_eq!(
            build_program_from_prefix(&[U, Z, Z], &v),
            Err(ProgramError::OverfullSequence {
                closed_at: 1,
                extra: 1
            })
        );
        assert_eq!(
            build_program_from_prefix(&[U, 9], &v),
            Err(ProgramError::UnknownFunction {
                position: 1,
                function_id: 9
            })
        );
        assert_eq!(
            build_program_from_prefix(&[], &v),
            Err(ProgramError::EmptySequence)
        );
    }

    #[test]
    fn validate_reports_arity_mismatch() {
        let p = Program::from_parts(
            vec![
                Node {
                    function_id: B,
                    children: vec![1],
                },
                Node {
                    function_id: Z,
                    children: vec![],
                },
            ],
            0,
        );
        let report = validate(&p, &vocab());
        assert_eq!(
            report.violations,
            vec![Violation::ArityMismatch {
                node: 0,
                expected: 2,
                found: 1
            }]
        );
    }

    #[test]
    fn validate_reports_cycle() {
        let p = Program::from_parts(
            vec![
                Node {
                    function_id: U,
                    children: vec![1],
                },
                Node {
                    function_id: U,
                    children: vec![0],
                },
            ],
            0,
        );
        let report = validate(&p, &vocab());
        assert!(report
            .violations
            .contains(&Violation::CycleDetected { node: 0 }));
        assert!(p.check_structure().is_err());
        assert!(max_root_distance_labels(&p).is_err());
        assert!(postorder_flatten(&p).is_err());
    }

    #[test]
    fn validate_reports_unreachable_and_dangling() {
        let p = Program::from_parts(
            vec![
                Node {
                    function_id: U,
                    children: vec![5],
                },
                Node {
                    function_id: Z,
                    children: vec![],
                },
            ],
            0,
        );
        let report = validate(&p, &vocab());
        assert!(report
            .violations
            .contains(&Violation::DanglingChild { node: 0, child: 5 }));
        assert!(report
            .violations
            .contains(&Violation::Unreachable { node: 1 }));
    }

    #[test]
    fn labels_single_and_chain() {
        let v = vocab();
        let single = build_program_from_prefix(&[Z], &v).unwrap();
        let l = max_root_distance_labels(&single).unwrap();
        assert_eq!((l.labels, l.max_label), (vec![0], 0));

        let chain = build_program_from_prefix(&[U, U, U, Z], &v).unwrap();
        assert_eq!(
            max_root_distance_labels(&chain).unwrap().labels,
            vec![0, 1, 2, 3]
        );
    }

    /// Longest path from root to every node by brute-force path enumeration.
    fn brute_force_labels(p: &Program) -> Vec<usize> {
        let mut best = vec![0usize; p.len()];
        let mut stack = vec![(p.root(), 0usize)];
        while let Some((id, dist)) = stack.pop() {
            best[id] = best[id].max(dist);
            for &c in &p.node(id).children {
                stack.push((c, dist + 1));
            }
        }
        best
    }

    #[test]
    fn labels_on_diamond_with_cross_edge() {
        // root -> a, root -> b, a -> c, b -> c, a -> b
        let nodes = vec![
            Node {
                function_id: B,
                children: vec![1, 2],
            }, // root
            Node {
                function_id: B,
                children: vec![3, 2],
            }, // a
            Node {
                function_id: U,
                children: vec![3],
            }, // b
            Node {
                function_id: Z,
                children: vec![],
            }, // c
        ];
        let p = Program::from_parts(nodes, 0);
        assert!(validate(&p, &vocab()).is_valid());
        let labels = max_root_distance_labels(&p).unwrap();
        assert_eq!(labels.labels, vec![0, 1, 2, 3]);
        assert_eq!(labels.labels, brute_force_labels(&p));
    }

    #[test]
    fn postorder_small_cases() {
        let v = vocab();
        let single = build_program_from_prefix(&[Z], &v).unwrap();
        assert_eq!(postorder_flatten(&single).unwrap(), vec![0]);
        let tree = build_program_from_prefix(&[B, Z, Z], &v).unwrap();
        assert_eq!(postorder_flatten(&tree).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn postorder_on_fifteen_node_tree() {
        let v = vocab();
        // b(b(u(z), b(z, z)), b(u(u(z)), b(z, u(z))))
        let seq = [B, B, U, Z, B, Z, Z, B, U, U, Z, B, Z, U, Z];
        let p = build_program_from_prefix(&seq, &v).unwrap();
        assert_eq!(p.len(), 15);
        let order = postorder_flatten(&p).unwrap();
        assert_eq!(order.len(), 15);
        let mut index = [usize::MAX; 15];
        for (i, &id) in order.iter().enumerate() {
            assert_eq!(index[id], usize::MAX, "node {id} emitted twice");
            index[id] = i;
        }
        for (parent, child) in p.edges() {
            assert!(index[child] < index[parent]);
        }
    }

    #[test]
    fn postorder_emits_shared_child_once() {
        let nodes = vec![
            Node {
                function_id: B,
                children: vec![1, 1],
            },
            Node {
                function_id: Z,
                children: vec![],
            },
        ];
        let p = Program::from_parts(nodes, 0);
        assert_eq!(postorder_flatten(&p).unwrap(), vec![1, 0]);
    }

    #[test]
    fn vocab_invariants() {
        assert!(matches!(
            FunctionVocab::from_arities([(0, CostClass::Expensive)], 4),
            Err(VocabError::ExpensiveInputProvider(0))
        ));
        assert!(matches!(
            FunctionVocab::from_arities([(1, CostClass::Expensive)], 4),
            Err(VocabError::NoInputProvider)
        ));
        let mut specs = vocab().specs().to_vec();
        specs[1].out_width = 8;
        assert!(matches!(
            FunctionVocab::new(specs),
            Err(VocabError::NonUniformWidth { .. })
        ));
        let mixed = FunctionVocab::mixed(40, 16).unwrap();
        assert_eq!(mixed.size(), 40);
        assert_eq!(mixed.expensive_count(), 39);
        assert_eq!(mixed.with_arity(0), vec![0]);
        assert_eq!(mixed.with_arity(1).len(), 20);
        assert_eq!(mixed.with_arity(2).len(), 19);
    }

    #[test]
    fn program_file_json_round_trip() {
        let v = vocab();
        let batch = vec![
            build_program_from_prefix(&[B, Z, U, Z], &v).unwrap(),
            build_program_from_prefix(&[Z], &v).unwrap(),
        ];
        let file = ProgramFile::from_batch(&v, &batch);
        let json = serde_json::to_string(&file).unwrap();
        assert!(json.starts_with(r#"{"vocab":[{"id":0,"arity":0,"cost":"free"}"#));
        let back: ProgramFile = serde_json::from_str(&json).unwrap();
        let v2 = back.to_vocab(4).unwrap();
        assert_eq!(v2, v);
        assert_eq!(back.to_batch(&v2).unwrap(), batch);
    }
}
