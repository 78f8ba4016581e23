//! Computation-graph IR: nodes, parameters, optimizer-state fragments, and
//! schedules, plus the structural analyses (validation, first/last use) that
//! every rewrite pass relies on.
//!
//! All IR values are immutable once a pass has produced them; passes clone the
//! graph, edit the clone, and return it together with a new [`Schedule`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

// ── Identifiers ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FragmentId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

impl fmt::Display for FragmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "os{}", self.0)
    }
}

// ── Node kinds and phases ────────────────────────────────────────────

/// Phase boundary sentinels. Markers carry no time or memory cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    ForwardBegin,
    ForwardEnd,
    BackwardBegin,
    BackwardEnd,
    StepEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Compute,
    AllGather,
    ReduceScatter,
    Release,
    OffloadStart,
    ReloadStart,
    TransferSync,
    OptimizerStep,
    Marker(MarkerKind),
}

impl NodeKind {
    pub fn is_marker(self) -> bool {
        matches!(self, NodeKind::Marker(_))
    }

    /// Kinds whose buffer reference must name an optimizer-state fragment.
    pub fn references_fragment(self) -> bool {
        matches!(
            self,
            NodeKind::OffloadStart | NodeKind::ReloadStart | NodeKind::TransferSync
        )
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Compute => "compute",
            NodeKind::AllGather => "allgather",
            NodeKind::ReduceScatter => "reduce_scatter",
            NodeKind::Release => "release",
            NodeKind::OffloadStart => "offload_start",
            NodeKind::ReloadStart => "reload_start",
            NodeKind::TransferSync => "transfer_sync",
            NodeKind::OptimizerStep => "optimizer_step",
            NodeKind::Marker(MarkerKind::ForwardBegin) => "marker_forward_begin",
            NodeKind::Marker(MarkerKind::ForwardEnd) => "marker_forward_end",
            NodeKind::Marker(MarkerKind::BackwardBegin) => "marker_backward_begin",
            NodeKind::Marker(MarkerKind::BackwardEnd) => "marker_backward_end",
            NodeKind::Marker(MarkerKind::StepEnd) => "marker_step_end",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    Step,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Forward => f.write_str("forward"),
            Phase::Backward => f.write_str("backward"),
            Phase::Step => f.write_str("step"),
        }
    }
}

/// Buffer reference carried by communication, release, and transfer nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRef {
    Parameter(ParamId),
    Fragment(FragmentId),
}

impl ParamRef {
    pub fn as_parameter(self) -> Option<ParamId> {
        match self {
            ParamRef::Parameter(p) => Some(p),
            ParamRef::Fragment(_) => None,
        }
    }

    pub fn as_fragment(self) -> Option<FragmentId> {
        match self {
            ParamRef::Fragment(f) => Some(f),
            ParamRef::Parameter(_) => None,
        }
    }
}

// ── Nodes and tensors ────────────────────────────────────────────────

/// One operator in the computation graph.
///
/// `duration_us` is meaningful for `Compute` and `OptimizerStep`; communication
/// and host-transfer durations come from the cost model. `transient_bytes` are
/// held only while the node runs; `persistent_delta_bytes` is applied to
/// resident memory when the node completes (positive for forward activation
/// accumulation, negative for backward release).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub duration_us: u64,
    pub transient_bytes: u64,
    pub persistent_delta_bytes: i64,
    pub deps: BTreeSet<NodeId>,
    /// Gather/release/transfer targets. A fused all-gather carries several
    /// parameter refs; every other kind carries at most one.
    pub param_refs: Vec<ParamRef>,
    pub micro_step: u32,
    pub phase: Phase,
}

impl Node {
    pub fn single_ref(&self) -> Option<ParamRef> {
        match self.param_refs.as_slice() {
            [r] => Some(*r),
            _ => None,
        }
    }

    pub fn references_param(&self, p: ParamId) -> bool {
        self.param_refs.contains(&ParamRef::Parameter(p))
    }
}

/// A sharded parameter tensor. `size_bytes` is the unsharded size; each device
/// holds `shard_bytes()` at rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parameter {
    pub id: ParamId,
    pub size_bytes: u64,
    pub shard_count: u32,
}

impl Parameter {
    pub fn shard_bytes(&self) -> u64 {
        let n = u64::from(self.shard_count.max(1));
        self.size_bytes.div_ceil(n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerStateFragment {
    pub id: FragmentId,
    pub size_bytes: u64,
}

// ── Graph ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: BTreeMap<NodeId, Node>,
    params: BTreeMap<ParamId, Parameter>,
    fragments: BTreeMap<FragmentId, OptimizerStateFragment>,
    next_id: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node {0} not found")]
    UnknownNode(NodeId),
    #[error("parameter {0} not found")]
    UnknownParameter(ParamId),
    #[error("fragment {0} not found")]
    UnknownFragment(FragmentId),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("dependency cycle involving node {0}")]
    Cycle(NodeId),
    #[error("parameter {0} is not consumed by any compute node")]
    UnusedParameter(ParamId),
    #[error("node {node} would be scheduled before its dependency {dep}")]
    DependencyViolation { node: NodeId, dep: NodeId },
    #[error("node {node}: {reason}")]
    Malformed { node: NodeId, reason: String },
    #[error("parameter {id}: {reason}")]
    BadParameter { id: ParamId, reason: String },
    #[error("fragment {id}: {reason}")]
    BadFragment { id: FragmentId, reason: String },
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, GraphError> {
        self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn param(&self, id: ParamId) -> Result<&Parameter, GraphError> {
        self.params.get(&id).ok_or(GraphError::UnknownParameter(id))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn fragment(&self, id: FragmentId) -> Result<&OptimizerStateFragment, GraphError> {
        self.fragments
            .get(&id)
            .ok_or(GraphError::UnknownFragment(id))
    }

    pub fn fragments(&self) -> impl Iterator<Item = &OptimizerStateFragment> {
        self.fragments.values()
    }

    pub fn add_parameter(&mut self, param: Parameter) -> Result<ParamId, GraphError> {
        if param.size_bytes == 0 {
            return Err(GraphError::BadParameter {
                id: param.id,
                reason: "size_bytes must be > 0".into(),
            });
        }
        if param.shard_count == 0 {
            return Err(GraphError::BadParameter {
                id: param.id,
                reason: "shard_count must be >= 1".into(),
            });
        }
        let id = param.id;
        if self.params.insert(id, param).is_some() {
            return Err(GraphError::DuplicateId(id.0));
        }
        Ok(id)
    }

    pub fn add_fragment(&mut self, frag: OptimizerStateFragment) -> Result<FragmentId, GraphError> {
        if frag.size_bytes == 0 {
            return Err(GraphError::BadFragment {
                id: frag.id,
                reason: "size_bytes must be > 0".into(),
            });
        }
        let id = frag.id;
        if self.fragments.insert(id, frag).is_some() {
            return Err(GraphError::DuplicateId(id.0));
        }
        Ok(id)
    }

    /// Inserts a node with a caller-chosen id (used by the model loader).
    pub fn insert_node(&mut self, node: Node) -> Result<NodeId, GraphError> {
        let id = node.id;
        if self.nodes.contains_key(&id) {
            return Err(GraphError::DuplicateId(id.0));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        self.nodes.insert(id, node);
        Ok(id)
    }

    /// Inserts a node under a fresh id. Passes use this so that user node ids
    /// stay stable across rewrites.
    pub fn insert_fresh(&mut self, mut node: Node) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        node.id = id;
        self.nodes.insert(id, node);
        id
    }

    pub fn remove_node(&mut self, id: NodeId) -> Result<Node, GraphError> {
        self.nodes.remove(&id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut Node, GraphError> {
        self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))
    }

    /// Rewrites every dependency on `from` to point at `to` instead.
    pub fn redirect_deps(&mut self, from: NodeId, to: NodeId) {
        for node in self.nodes.values_mut() {
            if node.deps.remove(&from) {
                node.deps.insert(to);
            }
        }
    }

    /// Total unsharded bytes referenced by a gather/release/transfer node.
    pub fn buffer_bytes(&self, node: &Node) -> Result<u64, GraphError> {
        let mut total = 0u64;
        for r in &node.param_refs {
            total += match *r {
                ParamRef::Parameter(p) => self.param(p)?.size_bytes,
                ParamRef::Fragment(f) => self.fragment(f)?.size_bytes,
            };
        }
        Ok(total)
    }

    /// Compute nodes that read `param`, in no particular order.
    pub fn consumers_of(&self, param: ParamId) -> Vec<&Node> {
        self.nodes
            .values()
            .filter(|n| n.kind == NodeKind::Compute && n.references_param(param))
            .collect()
    }

    /// Structural well-formedness: dependency targets and buffer refs exist,
    /// the dependency relation is acyclic, and per-kind arity rules hold.
    pub fn check_structure(&self) -> Result<(), GraphError> {
        for node in self.nodes.values() {
            for dep in &node.deps {
                if !self.nodes.contains_key(dep) {
                    return Err(GraphError::Malformed {
                        node: node.id,
                        reason: format!("dependency {dep} does not exist"),
                    });
                }
            }
            for r in &node.param_refs {
                match *r {
                    ParamRef::Parameter(p) => {
                        self.param(p)?;
                    }
                    ParamRef::Fragment(f) => {
                        self.fragment(f)?;
                    }
                }
            }
            self.check_node_arity(node)?;
        }
        self.check_acyclic()
    }

    fn check_node_arity(&self, node: &Node) -> Result<(), GraphError> {
        let fail = |reason: &str| {
            Err(GraphError::Malformed {
                node: node.id,
                reason: reason.to_string(),
            })
        };
        let refs = node.param_refs.len();
        match node.kind {
            NodeKind::Compute => {
                if refs > 1 {
                    return fail("compute nodes reference at most one parameter");
                }
                if node.param_refs.iter().any(|r| r.as_fragment().is_some()) {
                    return fail("compute nodes may only reference parameters");
                }
            }
            NodeKind::AllGather => {
                if refs == 0 {
                    return fail("allgather must reference at least one parameter");
                }
                if node.param_refs.iter().any(|r| r.as_parameter().is_none()) {
                    return fail("allgather refs must be parameters");
                }
            }
            NodeKind::ReduceScatter | NodeKind::Release => {
                if refs != 1 || node.param_refs[0].as_parameter().is_none() {
                    return fail("must reference exactly one parameter");
                }
            }
            NodeKind::OffloadStart | NodeKind::ReloadStart => {
                if refs != 1 || node.param_refs[0].as_fragment().is_none() {
                    return fail("must reference exactly one optimizer-state fragment");
                }
            }
            NodeKind::TransferSync => {
                if refs != 1 || node.param_refs[0].as_fragment().is_none() {
                    return fail("must reference exactly one optimizer-state fragment");
                }
                let transfers: Vec<_> = node
                    .deps
                    .iter()
                    .filter(|d| {
                        self.nodes.get(d).is_some_and(|n| {
                            matches!(n.kind, NodeKind::OffloadStart | NodeKind::ReloadStart)
                        })
                    })
                    .collect();
                if transfers.len() != 1 {
                    return fail("transfer_sync must depend on exactly one offload/reload");
                }
            }
            NodeKind::OptimizerStep => {
                if refs != 0 {
                    return fail("optimizer_step carries no buffer reference");
                }
            }
            NodeKind::Marker(_) => {
                if refs != 0 {
                    return fail("markers carry no buffer reference");
                }
                if node.duration_us != 0
                    || node.transient_bytes != 0
                    || node.persistent_delta_bytes != 0
                {
                    return fail("markers carry no time or memory cost");
                }
            }
        }
        // Durations on nodes whose timing comes from the cost model would be
        // silently ignored; reject them instead.
        if node.duration_us != 0
            && !matches!(node.kind, NodeKind::Compute | NodeKind::OptimizerStep)
        {
            return fail("duration_us is only meaningful on compute/optimizer_step");
        }
        Ok(())
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        // Kahn's algorithm over the dependency relation.
        let mut indegree: BTreeMap<NodeId, usize> = self.nodes.keys().map(|&id| (id, 0)).collect();
        let mut dependents: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            for dep in &node.deps {
                *indegree.get_mut(&node.id).unwrap() += 1;
                dependents.entry(*dep).or_default().push(node.id);
            }
        }
        let mut ready: Vec<NodeId> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut visited = 0usize;
        while let Some(id) = ready.pop() {
            visited += 1;
            if let Some(deps) = dependents.get(&id) {
                for &d in deps {
                    let e = indegree.get_mut(&d).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        ready.push(d);
                    }
                }
            }
        }
        if visited != self.nodes.len() {
            let stuck = indegree
                .iter()
                .find(|(_, &d)| d > 0)
                .map(|(&id, _)| id)
                .unwrap_or(NodeId(0));
            return Err(GraphError::Cycle(stuck));
        }
        Ok(())
    }
}

// ── Schedule ─────────────────────────────────────────────────────────

/// A total order over the graph's nodes plus a provenance trail of the passes
/// that produced it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub order: Vec<NodeId>,
    pub provenance: Vec<String>,
}

impl Schedule {
    pub fn new(order: Vec<NodeId>) -> Self {
        Self {
            order,
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn with_provenance(mut self, tag: &str) -> Self {
        self.provenance.push(tag.to_string());
        self
    }

    /// Map node id -> schedule position.
    pub fn positions(&self) -> BTreeMap<NodeId, usize> {
        self.order
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    pub fn position_of(&self, id: NodeId) -> Option<usize> {
        self.order.iter().position(|&n| n == id)
    }
}

// ── Validation ───────────────────────────────────────────────────────

/// One breach of the schedule contract. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Violation {
    /// Graph node absent from the schedule.
    MissingNode { node: NodeId },
    /// Node scheduled more than once.
    DuplicateNode { node: NodeId },
    /// Scheduled id that the graph does not contain.
    UnknownNode { node: NodeId },
    /// Node scheduled before one of its dependencies.
    DependencyInversion { node: NodeId, dep: NodeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingNode { node } => write!(f, "missing node {node}"),
            Violation::DuplicateNode { node } => write!(f, "duplicate node {node}"),
            Violation::UnknownNode { node } => write!(f, "unknown node {node}"),
            Violation::DependencyInversion { node, dep } => {
                write!(f, "node {node} scheduled before its dependency {dep}")
            }
        }
    }
}

/// Checks that `schedule` is a permutation of the graph's nodes that respects
/// every dependency. Returns an empty list iff the schedule is valid.
pub fn validate(graph: &Graph, schedule: &Schedule) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen: BTreeSet<NodeId> = BTreeSet::new();
    for &id in &schedule.order {
        if !graph.contains_node(id) {
            violations.push(Violation::UnknownNode { node: id });
            continue;
        }
        if !seen.insert(id) {
            violations.push(Violation::DuplicateNode { node: id });
            continue;
        }
        let node = graph.node(id).expect("checked above");
        for &dep in &node.deps {
            if !seen.contains(&dep) {
                violations.push(Violation::DependencyInversion { node: id, dep });
            }
        }
    }
    for node in graph.nodes() {
        if !seen.contains(&node.id) {
            violations.push(Violation::MissingNode { node: node.id });
        }
    }
    violations
}

// ── First/last use ───────────────────────────────────────────────────

/// First/last consumer positions per (micro-step, phase) region.
pub type UseSpans = BTreeMap<(u32, Phase), (usize, usize)>;

/// First and last schedule positions of the compute nodes consuming a
/// parameter, reported separately per (micro-step, phase) region.
pub fn first_last_use(
    graph: &Graph,
    schedule: &Schedule,
    param: ParamId,
) -> Result<UseSpans, GraphError> {
    graph.param(param)?;
    let mut spans: BTreeMap<(u32, Phase), (usize, usize)> = BTreeMap::new();
    for (pos, &id) in schedule.order.iter().enumerate() {
        let node = graph.node(id)?;
        if node.kind != NodeKind::Compute || !node.references_param(param) {
            continue;
        }
        spans
            .entry((node.micro_step, node.phase))
            .and_modify(|(first, last)| {
                *first = (*first).min(pos);
                *last = (*last).max(pos);
            })
            .or_insert((pos, pos));
    }
    if spans.is_empty() {
        return Err(GraphError::UnusedParameter(param));
    }
    Ok(spans)
}

// ── Schedule edits ───────────────────────────────────────────────────

/// Inserts `node` immediately before `anchor`. Fails if any dependency of
/// `node` is not scheduled before the insertion point.
pub fn insert_before(
    graph: &Graph,
    schedule: &Schedule,
    node: NodeId,
    anchor: NodeId,
) -> Result<Schedule, GraphError> {
    let at = schedule
        .position_of(anchor)
        .ok_or(GraphError::UnknownNode(anchor))?;
    insert_at(graph, schedule, node, at)
}

/// Inserts `node` immediately after `anchor`.
pub fn insert_after(
    graph: &Graph,
    schedule: &Schedule,
    node: NodeId,
    anchor: NodeId,
) -> Result<Schedule, GraphError> {
    let at = schedule
        .position_of(anchor)
        .ok_or(GraphError::UnknownNode(anchor))?;
    insert_at(graph, schedule, node, at + 1)
}

fn insert_at(
    graph: &Graph,
    schedule: &Schedule,
    node: NodeId,
    at: usize,
) -> Result<Schedule, GraphError> {
    let n = graph.node(node)?;
    if schedule.position_of(node).is_some() {
        return Err(GraphError::DuplicateId(node.0));
    }
    for &dep in &n.deps {
        let dep_pos = schedule
            .position_of(dep)
            .ok_or(GraphError::UnknownNode(dep))?;
        if dep_pos >= at {
            return Err(GraphError::DependencyViolation { node, dep });
        }
    }
    let mut order = schedule.order.clone();
    order.insert(at, node);
    Ok(Schedule {
        order,
        provenance: schedule.provenance.clone(),
    })
}

/// Removes `node` from the schedule (the graph is untouched).
pub fn remove(schedule: &Schedule, node: NodeId) -> Result<Schedule, GraphError> {
    let at = schedule
        .position_of(node)
        .ok_or(GraphError::UnknownNode(node))?;
    let mut order = schedule.order.clone();
    order.remove(at);
    Ok(Schedule {
        order,
        provenance: schedule.provenance.clone(),
    })
}

// ── Builder ──────────────────────────────────────────────────────────

/// Convenience builder used by the workload generator and tests. Nodes are
/// scheduled in insertion order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    order: Vec<NodeId>,
    next_param: u64,
    next_fragment: u64,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param(&mut self, size_bytes: u64, shard_count: u32) -> ParamId {
        let id = ParamId(self.next_param);
        self.next_param += 1;
        self.graph
            .add_parameter(Parameter {
                id,
                size_bytes,
                shard_count,
            })
            .expect("builder assigns fresh parameter ids");
        id
    }

    pub fn fragment(&mut self, size_bytes: u64) -> FragmentId {
        let id = FragmentId(self.next_fragment);
        self.next_fragment += 1;
        self.graph
            .add_fragment(OptimizerStateFragment { id, size_bytes })
            .expect("builder assigns fresh fragment ids");
        id
    }

    pub fn node(&mut self, node: Node) -> NodeId {
        let id = self.graph.insert_fresh(node);
        self.order.push(id);
        id
    }

    pub fn compute(
        &mut self,
        duration_us: u64,
        phase: Phase,
        micro_step: u32,
        param: Option<ParamId>,
        deps: &[NodeId],
    ) -> NodeId {
        self.node(Node {
            id: NodeId(0),
            kind: NodeKind::Compute,
            duration_us,
            transient_bytes: 0,
            persistent_delta_bytes: 0,
            deps: deps.iter().copied().collect(),
            param_refs: param.into_iter().map(ParamRef::Parameter).collect(),
            micro_step,
            phase,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn compute_with_memory(
        &mut self,
        duration_us: u64,
        phase: Phase,
        micro_step: u32,
        param: Option<ParamId>,
        deps: &[NodeId],
        transient_bytes: u64,
        persistent_delta_bytes: i64,
    ) -> NodeId {
        self.node(Node {
            id: NodeId(0),
            kind: NodeKind::Compute,
            duration_us,
            transient_bytes,
            persistent_delta_bytes,
            deps: deps.iter().copied().collect(),
            param_refs: param.into_iter().map(ParamRef::Parameter).collect(),
            micro_step,
            phase,
        })
    }

    pub fn marker(&mut self, kind: MarkerKind, micro_step: u32) -> NodeId {
        let phase = match kind {
            MarkerKind::ForwardBegin | MarkerKind::ForwardEnd => Phase::Forward,
            MarkerKind::BackwardBegin | MarkerKind::BackwardEnd => Phase::Backward,
            MarkerKind::StepEnd => Phase::Step,
        };
        self.node(Node {
            id: NodeId(0),
            kind: NodeKind::Marker(kind),
            duration_us: 0,
            transient_bytes: 0,
            persistent_delta_bytes: 0,
            deps: BTreeSet::new(),
            param_refs: Vec::new(),
            micro_step,
            phase,
        })
    }

    pub fn optimizer_step(&mut self, duration_us: u64, micro_step: u32, deps: &[NodeId]) -> NodeId {
        self.node(Node {
            id: NodeId(0),
            kind: NodeKind::OptimizerStep,
            duration_us,
            transient_bytes: 0,
            persistent_delta_bytes: 0,
            deps: deps.iter().copied().collect(),
            param_refs: Vec::new(),
            micro_step,
            phase: Phase::Step,
        })
    }

    pub fn finish(self) -> (Graph, Schedule) {
        (self.graph, Schedule::new(self.order))
    }
}
