//! Fully-sharded rewrite: one all-gather immediately before a parameter's
//! first use and one release immediately after its last use, per
//! (micro-step, phase) region, so each gathered buffer lives exactly as long
//! as its consumers need it.

use std::collections::{BTreeMap, BTreeSet};

use crate::cost::ClusterConfig;
use crate::ir::{
    first_last_use, Graph, GraphError, Node, NodeId, NodeKind, ParamRef, Phase, Schedule,
};
use crate::passes::{PassError, PassWarning};

#[derive(Debug)]
pub struct ShardOutcome {
    pub graph: Graph,
    pub schedule: Schedule,
    pub warnings: Vec<PassWarning>,
}

/// Inserts AllGather/Release pairs for every parameter region. The input must
/// not already contain parameter gather or release nodes.
pub fn apply_sharding(
    graph: &Graph,
    schedule: &Schedule,
    cluster: &ClusterConfig,
) -> Result<ShardOutcome, PassError> {
    let already = graph.nodes().any(|n| {
        matches!(n.kind, NodeKind::AllGather | NodeKind::Release)
            && n.param_refs.iter().any(|r| r.as_parameter().is_some())
    });
    if already {
        return Err(PassError::AlreadySharded);
    }
    let _ = cluster; // sharding is structural; budgets matter to later passes

    let mut out = graph.clone();
    let mut warnings = Vec::new();

    // (param, region) -> (first consumer pos, last consumer pos)
    struct Region {
        param: crate::ir::ParamId,
        micro_step: u32,
        phase: Phase,
        first: usize,
        last: usize,
        consumers: Vec<NodeId>,
    }
    let mut regions: Vec<Region> = Vec::new();
    for param in graph.params() {
        match first_last_use(graph, schedule, param.id) {
            Ok(spans) => {
                for ((micro_step, phase), (first, last)) in spans {
                    let consumers = schedule.order[first..=last]
                        .iter()
                        .copied()
                        .filter(|id| {
                            let n = graph.node(*id).expect("schedule validated upstream");
                            n.kind == NodeKind::Compute
                                && n.references_param(param.id)
                                && n.micro_step == micro_step
                                && n.phase == phase
                        })
                        .collect();
                    regions.push(Region {
                        param: param.id,
                        micro_step,
                        phase,
                        first,
                        last,
                        consumers,
                    });
                }
            }
            Err(GraphError::UnusedParameter(p)) => {
                warnings.push(PassWarning::UnusedParameter { param: p });
            }
            Err(e) => return Err(e.into()),
        }
    }

    // Gathers keyed by first-consumer position, releases by last-consumer
    // position; ties broken by ascending parameter id.
    let mut gather_before: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut release_after: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in regions.iter().enumerate() {
        gather_before.entry(r.first).or_default().push(i);
        release_after.entry(r.last).or_default().push(i);
    }
    for v in gather_before.values_mut() {
        v.sort_by_key(|&i| regions[i].param);
    }
    for v in release_after.values_mut() {
        v.sort_by_key(|&i| regions[i].param);
    }

    let mut order: Vec<NodeId> = Vec::with_capacity(schedule.len() + 2 * regions.len());
    for (pos, &id) in schedule.order.iter().enumerate() {
        if let Some(idxs) = gather_before.get(&pos) {
            for &i in idxs {
                let r = &regions[i];
                let gather = out.insert_fresh(Node {
                    id: NodeId(0),
                    kind: NodeKind::AllGather,
                    duration_us: 0,
                    transient_bytes: 0,
                    persistent_delta_bytes: 0,
                    deps: BTreeSet::new(),
                    param_refs: vec![ParamRef::Parameter(r.param)],
                    micro_step: r.micro_step,
                    phase: r.phase,
                });
                for &c in &r.consumers {
                    out.node_mut(c)?.deps.insert(gather);
                }
                order.push(gather);
            }
        }
        order.push(id);
        if let Some(idxs) = release_after.get(&pos) {
            for &i in idxs {
                let r = &regions[i];
                let release = out.insert_fresh(Node {
                    id: NodeId(0),
                    kind: NodeKind::Release,
                    duration_us: 0,
                    transient_bytes: 0,
                    persistent_delta_bytes: 0,
                    deps: r.consumers.iter().copied().collect(),
                    param_refs: vec![ParamRef::Parameter(r.param)],
                    micro_step: r.micro_step,
                    phase: r.phase,
                });
                order.push(release);
            }
        }
    }

    let schedule = Schedule {
        order,
        provenance: schedule.provenance.clone(),
    }
    .with_provenance("shard");
    Ok(ShardOutcome {
        graph: out,
        schedule,
        warnings,
    })
}
