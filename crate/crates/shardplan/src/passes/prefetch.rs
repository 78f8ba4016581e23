//! Proactive prefetching: a reverse scan over the schedule that floats
//! all-gathers toward the front while a profiled memory check and a group-size
//! cap both allow it, emitting each blocked group (fused where the cost model
//! says merging wins) immediately after the operator that blocked it, so no
//! gather ever lands later than where it started.
//!
//! The faithful mode checks memory only when it examines an all-gather; the
//! strict mode re-checks the pending group at every operator it floats past
//! and emits early rather than cross a position that would overflow.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::cost::{ClusterConfig, CostModel};
use crate::ir::{Graph, Node, NodeId, NodeKind, Schedule};
use crate::passes::{PassError, PassWarning};
use crate::sim::MemoryProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrefetchMode {
    /// Check memory only at examined all-gathers, using profiled
    /// before-operator memory exactly.
    #[default]
    Faithful,
    /// Re-check the pending group at every crossed operator, and charge the
    /// checkpoint operator's transient bytes and (for a gather that may stay
    /// put) its own buffer on top of the profiled value. This is what makes
    /// the post-pass simulated peak provably stay under the limit whenever
    /// the baseline's did.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchAction {
    /// Examined gather joined the pending group.
    Grouped,
    /// Pending group emitted immediately after the examined operator.
    Emitted,
    /// Remaining group emitted at the schedule front.
    EmittedFront,
}

/// One scheduling decision. For `Grouped`/`Emitted`, `group_bytes` and
/// `checkpoint_bytes` are the values of the examined check (group including
/// the candidate, and profiled memory before the previous operator plus that
/// group). For emissions, `members` lists the emitted gathers in schedule
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefetchDecision {
    pub action: PrefetchAction,
    pub node: Option<NodeId>,
    /// 1-based position of the examined operator; 0 for the front emission.
    pub position: usize,
    pub group_bytes: u64,
    pub checkpoint_bytes: Option<u64>,
    pub members: Vec<NodeId>,
}

#[derive(Debug)]
pub struct PrefetchOutcome {
    pub graph: Graph,
    pub schedule: Schedule,
    pub decisions: Vec<PrefetchDecision>,
    pub warnings: Vec<PassWarning>,
    /// Fused gather id -> original member gather ids, in schedule order.
    pub fused: BTreeMap<NodeId, Vec<NodeId>>,
}

fn is_param_gather(node: &Node) -> bool {
    node.kind == NodeKind::AllGather
}

/// Reschedules all-gathers earlier under the memory limit `M` and the group
/// cap `M_prefetch`, fusing grouped gathers pairwise in schedule order.
pub fn apply_prefetch(
    graph: &Graph,
    schedule: &Schedule,
    profile: &MemoryProfile,
    cluster: &ClusterConfig,
    cost: &CostModel,
    mode: PrefetchMode,
) -> Result<PrefetchOutcome, PassError> {
    let order = &schedule.order;
    let n = order.len();
    let limit = cluster.memory_limit_bytes;
    let group_cap = cluster.prefetch_limit_bytes;

    let mut bytes_of: BTreeMap<NodeId, u64> = BTreeMap::new();
    for &id in order {
        let node = graph.node(id)?;
        if profile.get(id).is_none() {
            return Err(PassError::ProfileMismatch(id));
        }
        if is_param_gather(node) {
            let b = graph.buffer_bytes(node)?;
            bytes_of.insert(id, b);
            let pm = profile.get(id).expect("checked above");
            if pm + b >= limit {
                return Err(PassError::InfeasibleBaseline {
                    node: id,
                    required: pm + b,
                    limit,
                });
            }
        }
    }

    // Built back-to-front while scanning in reverse; reversed at the end.
    enum Emit {
        Node(NodeId),
        Group(Vec<NodeId>), // join order (reverse schedule order)
    }
    let mut rev: Vec<Emit> = Vec::with_capacity(n + 8);
    let mut group: Vec<NodeId> = Vec::new();
    let mut group_bytes = 0u64;
    let mut decisions = Vec::new();
    let mut warnings = Vec::new();

    let members_in_schedule_order = |group: &[NodeId]| {
        let mut m = group.to_vec();
        m.reverse();
        m
    };
    // Memory charged at a checkpoint operator. Strict mode adds what the
    // profiled before-operator value misses while the operator itself runs:
    // its transient scratch and, for a gather, the buffer it allocates.
    let checkpoint_load = |id: NodeId| -> u64 {
        let pm = profile.get(id).expect("profile covers schedule");
        match mode {
            PrefetchMode::Faithful => pm,
            PrefetchMode::Strict => {
                let node = graph.node(id).expect("scheduled node exists");
                pm + node.transient_bytes + bytes_of.get(&id).copied().unwrap_or(0)
            }
        }
    };

    for i in (2..=n).rev() {
        let id = order[i - 1];
        let node = graph.node(id)?;
        if is_param_gather(node) {
            let b = bytes_of[&id];
            let vm_group = group_bytes + b;
            let checkpoint = checkpoint_load(order[i - 2]) + vm_group;
            // A gather carrying dependencies (possible in hand-written
            // inputs; never produced by the sharding pass) must not float
            // above them, so it never joins a group.
            if node.deps.is_empty() && checkpoint < limit && vm_group < group_cap {
                group.push(id);
                group_bytes += b;
                decisions.push(PrefetchDecision {
                    action: PrefetchAction::Grouped,
                    node: Some(id),
                    position: i,
                    group_bytes: vm_group,
                    checkpoint_bytes: Some(checkpoint),
                    members: Vec::new(),
                });
            } else {
                if b >= group_cap {
                    warnings.push(PassWarning::GatherExceedsPrefetchLimit { node: id, bytes: b });
                }
                decisions.push(PrefetchDecision {
                    action: PrefetchAction::Emitted,
                    node: Some(id),
                    position: i,
                    group_bytes: vm_group,
                    checkpoint_bytes: Some(checkpoint),
                    members: members_in_schedule_order(&group),
                });
                // The blocked gather keeps its position; the group lands
                // immediately after it, so group members (all from later
                // positions) never move later and the blocked gather's own
                // position is untouched.
                rev.push(Emit::Group(std::mem::take(&mut group)));
                rev.push(Emit::Node(id));
                group_bytes = 0;
            }
        } else {
            if mode == PrefetchMode::Strict && !group.is_empty() {
                let checkpoint = checkpoint_load(order[i - 2]) + group_bytes;
                if checkpoint >= limit {
                    decisions.push(PrefetchDecision {
                        action: PrefetchAction::Emitted,
                        node: Some(id),
                        position: i,
                        group_bytes,
                        checkpoint_bytes: Some(checkpoint),
                        members: members_in_schedule_order(&group),
                    });
                    rev.push(Emit::Group(std::mem::take(&mut group)));
                    rev.push(Emit::Node(id));
                    group_bytes = 0;
                    continue;
                }
            }
            rev.push(Emit::Node(id));
        }
    }
    if n >= 1 {
        // The first operator is never examined; whatever is still pending is
        // scheduled at the very front.
        rev.push(Emit::Node(order[0]));
    }
    if !group.is_empty() {
        decisions.push(PrefetchDecision {
            action: PrefetchAction::EmittedFront,
            node: None,
            position: 0,
            group_bytes,
            checkpoint_bytes: None,
            members: members_in_schedule_order(&group),
        });
        rev.push(Emit::Group(std::mem::take(&mut group)));
    }

    let mut out_graph = graph.clone();
    let mut fused: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let mut out_order: Vec<NodeId> = Vec::with_capacity(n);
    for emit in rev.iter().rev() {
        match emit {
            Emit::Node(id) => out_order.push(*id),
            Emit::Group(join_order) => {
                let members = members_in_schedule_order(join_order);
                let emitted = fuse_into(&mut out_graph, &members, cost, cluster.fusion_alpha)?;
                for (id, fused_members) in emitted {
                    out_order.push(id);
                    if let Some(m) = fused_members {
                        fused.insert(id, m);
                    }
                }
            }
        }
    }

    let schedule = Schedule {
        order: out_order,
        provenance: schedule.provenance.clone(),
    }
    .with_provenance(match mode {
        PrefetchMode::Faithful => "prefetch",
        PrefetchMode::Strict => "prefetch-strict",
    });
    Ok(PrefetchOutcome {
        graph: out_graph,
        schedule,
        decisions,
        warnings,
        fused,
    })
}

/// Folds a group pairwise in schedule order, merging two adjacent gathers
/// whenever the cost model says the combined call is cheaper than paying both
/// latencies. Returns the emitted gather ids with, for fused ones, their
/// original members. The accumulated left operand carries the sum of its
/// members' buffer sizes into the next comparison.
pub fn fuse(
    graph: &Graph,
    members: &[NodeId],
    cost: &CostModel,
    alpha: f64,
) -> Result<(Graph, Vec<NodeId>), PassError> {
    let mut out = graph.clone();
    let emitted = fuse_into(&mut out, members, cost, alpha)?;
    Ok((out, emitted.into_iter().map(|(id, _)| id).collect()))
}

type EmittedGather = (NodeId, Option<Vec<NodeId>>);

fn fuse_into(
    graph: &mut Graph,
    members: &[NodeId],
    cost: &CostModel,
    alpha: f64,
) -> Result<Vec<EmittedGather>, PassError> {
    if members.is_empty() {
        return Ok(Vec::new());
    }
    let mut segments: Vec<(Vec<NodeId>, u64)> = Vec::new();
    let mut cur = vec![members[0]];
    let mut cur_bytes = graph.buffer_bytes(graph.node(members[0])?)?;
    for &m in &members[1..] {
        let mb = graph.buffer_bytes(graph.node(m)?)?;
        if cost.should_fuse(cur_bytes, mb, alpha) {
            cur.push(m);
            cur_bytes += mb;
        } else {
            segments.push((std::mem::replace(&mut cur, vec![m]), cur_bytes));
            cur_bytes = mb;
        }
    }
    segments.push((cur, cur_bytes));

    let mut emitted = Vec::with_capacity(segments.len());
    for (seg, _) in segments {
        if seg.len() == 1 {
            emitted.push((seg[0], None));
            continue;
        }
        let mut refs = Vec::new();
        let mut deps = std::collections::BTreeSet::new();
        let first = graph.node(seg[0])?.clone();
        for &m in &seg {
            let node = graph.node(m)?;
            refs.extend(node.param_refs.iter().copied());
            deps.extend(node.deps.iter().copied());
        }
        // a member's dependency on another member would dangle once the
        // members are replaced by the fused node
        for m in &seg {
            deps.remove(m);
        }
        let fused_id = graph.insert_fresh(Node {
            id: NodeId(0),
            kind: NodeKind::AllGather,
            duration_us: 0,
            transient_bytes: 0,
            persistent_delta_bytes: 0,
            deps,
            param_refs: refs,
            micro_step: first.micro_step,
            phase: first.phase,
        });
        for &m in &seg {
            graph.redirect_deps(m, fused_id);
            graph.remove_node(m)?;
        }
        emitted.push((fused_id, Some(seg)));
    }
    Ok(emitted)
}
