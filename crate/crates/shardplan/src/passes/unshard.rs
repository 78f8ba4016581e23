//! Selective unsharding: keep chosen parameters resident in unsharded form
//! across phases and micro-steps, dropping their regathers and deferring the
//! release to after the parameter update. Candidates are ranked by
//! communication time saved per byte held, T_c(B_ag)/B_ag, so under an affine
//! cost model smaller parameters win first.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::cost::{allgather_buffer_size, ClusterConfig, CostModel};
use crate::ir::{Graph, MarkerKind, NodeId, NodeKind, ParamId, ParamRef, Schedule};
use crate::passes::PassError;
use crate::sim::MemoryProfile;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnshardDecision {
    pub param: ParamId,
    pub buffer_bytes: u64,
    pub ratio: f64,
    pub selected: bool,
    /// Total selected bytes after this decision.
    pub cumulative_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct UnshardSelection {
    /// Selected parameters in priority order.
    pub selected: Vec<ParamId>,
    pub projected_peak_bytes: u64,
    pub decisions: Vec<UnshardDecision>,
}

#[derive(Debug)]
pub struct UnshardOutcome {
    pub graph: Graph,
    pub schedule: Schedule,
}

/// Greedy selection under the memory limit: walk candidates in descending
/// T_c(B)/B and admit each parameter whose buffer still fits on top of the
/// measured peak. An empty selection is legal.
pub fn select_unshard(
    graph: &Graph,
    profile: &MemoryProfile,
    cluster: &ClusterConfig,
    cost: &CostModel,
) -> UnshardSelection {
    let mut gathered: BTreeSet<ParamId> = BTreeSet::new();
    for node in graph.nodes() {
        if node.kind == NodeKind::AllGather {
            gathered.extend(node.param_refs.iter().filter_map(|r| r.as_parameter()));
        }
    }
    let mut candidates: Vec<(ParamId, u64, f64)> = gathered
        .iter()
        .map(|&p| {
            let bytes = allgather_buffer_size(graph.param(p).expect("gather refs checked"));
            let ratio = cost.comm_time_us(bytes) / bytes as f64;
            (p, bytes, ratio)
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let limit = cluster.memory_limit_bytes;
    let mut selected = Vec::new();
    let mut cumulative = 0u64;
    let mut decisions = Vec::new();
    for (param, bytes, ratio) in candidates {
        let fits = profile.peak_bytes + cumulative + bytes <= limit;
        if fits {
            cumulative += bytes;
            selected.push(param);
        }
        decisions.push(UnshardDecision {
            param,
            buffer_bytes: bytes,
            ratio,
            selected: fits,
            cumulative_bytes: cumulative,
        });
    }
    UnshardSelection {
        selected,
        projected_peak_bytes: profile.peak_bytes + cumulative,
        decisions,
    }
}

/// Rewrites the schedule for the selected parameters: the earliest gather
/// survives, later regathers disappear (or lose the parameter, if fused with
/// others), and a single release moves past the optimizer step.
pub fn apply_unshard(
    graph: &Graph,
    schedule: &Schedule,
    selected: &[ParamId],
) -> Result<UnshardOutcome, PassError> {
    if selected.is_empty() {
        return Ok(UnshardOutcome {
            graph: graph.clone(),
            schedule: schedule.clone().with_provenance("unshard"),
        });
    }

    let step_end = schedule
        .order
        .iter()
        .rev()
        .find(|id| {
            graph
                .node(**id)
                .map(|n| n.kind == NodeKind::Marker(MarkerKind::StepEnd))
                .unwrap_or(false)
        })
        .copied();
    let optimizer_step = schedule
        .order
        .iter()
        .find(|id| {
            graph
                .node(**id)
                .map(|n| n.kind == NodeKind::OptimizerStep)
                .unwrap_or(false)
        })
        .copied();
    let anchor = step_end
        .or(optimizer_step)
        .ok_or(PassError::MissingStepMarker)?;

    let mut out = graph.clone();
    let mut order = schedule.order.clone();
    let mut deferred: Vec<NodeId> = Vec::new();

    let mut params: Vec<ParamId> = selected.to_vec();
    params.sort_unstable();
    params.dedup();
    for p in params {
        let gathers: Vec<NodeId> = order
            .iter()
            .copied()
            .filter(|id| {
                out.node(*id)
                    .map(|n| n.kind == NodeKind::AllGather && n.references_param(p))
                    .unwrap_or(false)
            })
            .collect();
        let Some((&keep, rest)) = gathers.split_first() else {
            continue; // parameter was never sharded; nothing to rewrite
        };
        for &g in rest {
            let node = out.node(g)?.clone();
            if node.param_refs == vec![ParamRef::Parameter(p)] {
                out.redirect_deps(g, keep);
                out.remove_node(g)?;
                order.retain(|&id| id != g);
            } else {
                // Fused gather shared with other parameters: detach this
                // parameter but keep the node, and rewire only p's consumers.
                out.node_mut(g)?
                    .param_refs
                    .retain(|r| *r != ParamRef::Parameter(p));
                let consumers: Vec<NodeId> = out
                    .nodes()
                    .filter(|n| {
                        n.kind == NodeKind::Compute && n.references_param(p) && n.deps.contains(&g)
                    })
                    .map(|n| n.id)
                    .collect();
                for c in consumers {
                    let deps = &mut out.node_mut(c)?.deps;
                    deps.remove(&g);
                    deps.insert(keep);
                }
            }
        }
        // Every consumer of p, in every region, depends on the kept gather.
        let consumers: Vec<NodeId> = out
            .nodes()
            .filter(|n| n.kind == NodeKind::Compute && n.references_param(p))
            .map(|n| n.id)
            .collect();
        for &c in &consumers {
            out.node_mut(c)?.deps.insert(keep);
        }

        let releases: Vec<NodeId> = order
            .iter()
            .copied()
            .filter(|id| {
                out.node(*id)
                    .map(|n| n.kind == NodeKind::Release && n.references_param(p))
                    .unwrap_or(false)
            })
            .collect();
        let Some((&survivor, removed)) = releases.split_last() else {
            continue;
        };
        for &r in removed {
            out.redirect_deps(r, survivor);
            out.remove_node(r)?;
            order.retain(|&id| id != r);
        }
        // The surviving release waits for every consumer and for the step
        // region to finish, and its buffer stays charged until then.
        {
            let node = out.node_mut(survivor)?;
            node.deps = consumers.iter().copied().collect();
            node.deps.insert(anchor);
            node.phase = crate::ir::Phase::Step;
        }
        order.retain(|&id| id != survivor);
        deferred.push(survivor);
    }

    let anchor_pos = order
        .iter()
        .position(|&id| id == anchor)
        .expect("anchor is never removed");
    for (i, &r) in deferred.iter().enumerate() {
        order.insert(anchor_pos + 1 + i, r);
    }

    Ok(UnshardOutcome {
        graph: out,
        schedule: Schedule {
            order,
            provenance: schedule.provenance.clone(),
        }
        .with_provenance("unshard"),
    })
}
