//! Deterministic discrete-event execution of a schedule on three logical
//! streams (compute, collective, host transfer) with full memory accounting.
//! Doubles as the profiler feeding the optimization passes.
//!
//! Nodes are dispatched in schedule order. The compute stream is the master
//! timeline: an asynchronous operator (collective or host transfer) begins no
//! earlier than the completion of the compute work that precedes it in the
//! schedule, as if each side-stream operator waited on an event recorded on
//! the compute stream at its program position. `TransferSync` runs on the
//! compute stream with zero duration and stalls it until the referenced
//! transfer completes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ClusterConfig, CostModel};
use crate::ir::{validate, Graph, Node, NodeId, NodeKind, Schedule, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Collective,
    HostTransfer,
}

impl Stream {
    fn index(self) -> usize {
        match self {
            Stream::Compute => 0,
            Stream::Collective => 1,
            Stream::HostTransfer => 2,
        }
    }
}

pub fn stream_of(kind: NodeKind) -> Stream {
    match kind {
        NodeKind::AllGather | NodeKind::ReduceScatter => Stream::Collective,
        NodeKind::OffloadStart | NodeKind::ReloadStart => Stream::HostTransfer,
        NodeKind::Compute
        | NodeKind::Release
        | NodeKind::TransferSync
        | NodeKind::OptimizerStep
        | NodeKind::Marker(_) => Stream::Compute,
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule invalid: {0} violation(s), first: {1}")]
    InvalidSchedule(usize, Violation),
    #[error("graph error: {0}")]
    Graph(#[from] crate::ir::GraphError),
    #[error("resident memory went negative at t={time_us}us after node {node}")]
    NegativeResidency { time_us: u64, node: NodeId },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    /// Whether optimizer-state fragments are resident at iteration start.
    /// They are, once the first training step has allocated them.
    pub optimizer_resident: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub node: NodeId,
    pub kind: NodeKind,
    pub stream: Stream,
    pub start_us: u64,
    pub end_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryOverflow {
    pub time_us: u64,
    pub resident_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub iteration_time_us: u64,
    pub peak_memory_bytes: u64,
    pub timeline: Vec<TimelineEvent>,
    /// Resident bytes after each memory event, preceded by the initial state.
    pub memory_trace: Vec<(u64, u64)>,
    pub total_collective_bytes: u64,
    /// Collective busy time overlapped with compute, over total collective
    /// busy time. Zero when there is no collective traffic.
    pub overlap_fraction: f64,
    /// Times at which the trace crossed above `device_memory_bytes`.
    pub overflows: Vec<MemoryOverflow>,
}

/// Resident memory immediately before each node of a profiled schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryProfile {
    pub mem_before: BTreeMap<NodeId, u64>,
    /// max over nodes of (mem_before + transient_bytes).
    pub peak_bytes: u64,
}

impl MemoryProfile {
    pub fn get(&self, id: NodeId) -> Option<u64> {
        self.mem_before.get(&id).copied()
    }
}

/// Runs the schedule and returns the full report.
pub fn simulate(
    graph: &Graph,
    schedule: &Schedule,
    cost: &CostModel,
    cluster: &ClusterConfig,
    opts: SimOptions,
) -> Result<SimReport, SimError> {
    Ok(run(graph, schedule, cost, cluster, opts)?.0)
}

/// Runs the schedule and returns the memory profile: P_mem per node plus peak.
pub fn profile(
    graph: &Graph,
    schedule: &Schedule,
    cost: &CostModel,
    cluster: &ClusterConfig,
    opts: SimOptions,
) -> Result<MemoryProfile, SimError> {
    Ok(run(graph, schedule, cost, cluster, opts)?.1)
}

pub fn simulate_and_profile(
    graph: &Graph,
    schedule: &Schedule,
    cost: &CostModel,
    cluster: &ClusterConfig,
    opts: SimOptions,
) -> Result<(SimReport, MemoryProfile), SimError> {
    run(graph, schedule, cost, cluster, opts)
}

/// Whether a `TransferSync` waits on an offload (frees device memory at sync)
/// or a reload (no memory effect at sync).
fn sync_frees_memory(graph: &Graph, node: &Node) -> bool {
    node.deps.iter().any(|d| {
        graph
            .node(*d)
            .map(|n| n.kind == NodeKind::OffloadStart)
            .unwrap_or(false)
    })
}

fn node_duration_us(graph: &Graph, node: &Node, cost: &CostModel) -> Result<u64, SimError> {
    let us = match node.kind {
        NodeKind::Compute | NodeKind::OptimizerStep => node.duration_us as f64,
        NodeKind::AllGather | NodeKind::ReduceScatter => {
            cost.comm_time_us(graph.buffer_bytes(node)?)
        }
        NodeKind::OffloadStart | NodeKind::ReloadStart => {
            cost.host_transfer_time_us(graph.buffer_bytes(node)?)
        }
        NodeKind::Release | NodeKind::TransferSync | NodeKind::Marker(_) => 0.0,
    };
    Ok(us.round() as u64)
}

fn initial_residency(graph: &Graph, opts: SimOptions) -> u64 {
    let shards: u64 = graph.params().map(|p| p.shard_bytes()).sum();
    let states: u64 = if opts.optimizer_resident {
        graph.fragments().map(|f| f.size_bytes).sum()
    } else {
        0
    };
    shards + states
}

fn run(
    graph: &Graph,
    schedule: &Schedule,
    cost: &CostModel,
    cluster: &ClusterConfig,
    opts: SimOptions,
) -> Result<(SimReport, MemoryProfile), SimError> {
    let violations = validate(graph, schedule);
    if let Some(first) = violations.first() {
        return Err(SimError::InvalidSchedule(violations.len(), first.clone()));
    }

    let mut ready = [0u64; 3];
    let mut end_time: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut timeline = Vec::with_capacity(schedule.len());
    let mut total_collective_bytes = 0u64;

    for &id in &schedule.order {
        let node = graph.node(id)?;
        let stream = stream_of(node.kind);
        let dur = node_duration_us(graph, node, cost)?;
        let deps_end = node.deps.iter().map(|d| end_time[d]).max().unwrap_or(0);
        let issue = match stream {
            Stream::Compute => ready[Stream::Compute.index()],
            s => ready[s.index()].max(ready[Stream::Compute.index()]),
        };
        let start = issue.max(deps_end);
        let end = start + dur;
        ready[stream.index()] = end;
        end_time.insert(id, end);
        if matches!(node.kind, NodeKind::AllGather | NodeKind::ReduceScatter) {
            total_collective_bytes += graph.buffer_bytes(node)?;
        }
        timeline.push(TimelineEvent {
            node: id,
            kind: node.kind,
            stream,
            start_us: start,
            end_us: end,
        });
    }

    let iteration_time_us = timeline.iter().map(|e| e.end_us).max().unwrap_or(0);
    let overlap_fraction = collective_overlap(&timeline);

    // Memory accounting. Events ordered by (time, end-before-start, schedule
    // position); a zero-duration node's start and end effects apply as one
    // event so its own release never precedes its P_mem snapshot.
    #[derive(Clone, Copy)]
    struct MemEvent {
        time_us: u64,
        phase: u8, // 0 = end, 1 = start (or merged zero-duration)
        pos: usize,
        delta: i64,
        starts: Option<NodeId>,
    }
    let mut events: Vec<MemEvent> = Vec::with_capacity(2 * timeline.len());
    for (pos, ev) in timeline.iter().enumerate() {
        let node = graph.node(ev.node)?;
        let mut start_delta = node.transient_bytes as i64;
        match node.kind {
            NodeKind::AllGather => start_delta += graph.buffer_bytes(node)? as i64,
            NodeKind::ReloadStart => start_delta += graph.buffer_bytes(node)? as i64,
            _ => {}
        }
        let mut end_delta = -(node.transient_bytes as i64) + node.persistent_delta_bytes;
        match node.kind {
            NodeKind::Release => end_delta -= graph.buffer_bytes(node)? as i64,
            NodeKind::TransferSync if sync_frees_memory(graph, node) => {
                end_delta -= graph.buffer_bytes(node)? as i64;
            }
            _ => {}
        }
        if ev.start_us == ev.end_us {
            events.push(MemEvent {
                time_us: ev.start_us,
                phase: 1,
                pos,
                delta: start_delta + end_delta,
                starts: Some(ev.node),
            });
        } else {
            events.push(MemEvent {
                time_us: ev.start_us,
                phase: 1,
                pos,
                delta: start_delta,
                starts: Some(ev.node),
            });
            events.push(MemEvent {
                time_us: ev.end_us,
                phase: 0,
                pos,
                delta: end_delta,
                starts: None,
            });
        }
    }
    events.sort_by_key(|e| (e.time_us, e.phase, e.pos));

    let initial = initial_residency(graph, opts);
    let mut resident = initial as i64;
    let mut mem_before: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut memory_trace: Vec<(u64, u64)> = Vec::with_capacity(events.len() + 1);
    memory_trace.push((0, initial));
    let mut peak_trace = initial;
    let mut overflows = Vec::new();
    let mut above_limit = initial > cluster.device_memory_bytes;
    if above_limit {
        overflows.push(MemoryOverflow {
            time_us: 0,
            resident_bytes: initial,
        });
    }
    for ev in &events {
        if let Some(id) = ev.starts {
            mem_before.insert(id, resident as u64);
        }
        resident += ev.delta;
        if resident < 0 {
            let node = ev.starts.unwrap_or_else(|| timeline[ev.pos].node);
            return Err(SimError::NegativeResidency {
                time_us: ev.time_us,
                node,
            });
        }
        let r = resident as u64;
        memory_trace.push((ev.time_us, r));
        peak_trace = peak_trace.max(r);
        if r > cluster.device_memory_bytes {
            if !above_limit {
                overflows.push(MemoryOverflow {
                    time_us: ev.time_us,
                    resident_bytes: r,
                });
                above_limit = true;
            }
        } else {
            above_limit = false;
        }
    }

    let peak_bytes = schedule
        .order
        .iter()
        .map(|id| {
            let n = graph.node(*id).expect("validated");
            mem_before.get(id).copied().unwrap_or(initial) + n.transient_bytes
        })
        .max()
        .unwrap_or(initial);

    let report = SimReport {
        iteration_time_us,
        peak_memory_bytes: peak_trace,
        timeline,
        memory_trace,
        total_collective_bytes,
        overlap_fraction,
        overflows,
    };
    Ok((
        report,
        MemoryProfile {
            mem_before,
            peak_bytes,
        },
    ))
}

/// Fraction of collective busy time that runs while the compute stream is
/// busy. Both streams are serial, so their busy intervals are sorted and
/// disjoint.
fn collective_overlap(timeline: &[TimelineEvent]) -> f64 {
    let busy = |s: Stream| -> Vec<(u64, u64)> {
        timeline
            .iter()
            .filter(|e| e.stream == s && e.end_us > e.start_us)
            .map(|e| (e.start_us, e.end_us))
            .collect()
    };
    let coll = busy(Stream::Collective);
    let comp = busy(Stream::Compute);
    let total: u64 = coll.iter().map(|(a, b)| b - a).sum();
    if total == 0 {
        return 0.0;
    }
    let mut overlapped = 0u64;
    let mut j = 0usize;
    for &(a, b) in &coll {
        while j < comp.len() && comp[j].1 <= a {
            j += 1;
        }
        let mut k = j;
        while k < comp.len() && comp[k].0 < b {
            overlapped += comp[k].1.min(b) - comp[k].0.max(a);
            k += 1;
        }
    }
    overlapped as f64 / total as f64
}

/// Timeline rows as `node_id,kind,stream,start_us,end_us`.
pub fn timeline_csv(report: &SimReport) -> String {
    let mut out = String::from("node_id,kind,stream,start_us,end_us\n");
    for ev in &report.timeline {
        let stream = match ev.stream {
            Stream::Compute => "compute",
            Stream::Collective => "collective",
            Stream::HostTransfer => "host_transfer",
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            ev.node.0, ev.kind, stream, ev.start_us, ev.end_us
        ));
    }
    out
}

/// Memory trace rows as `time_us,resident_bytes`.
pub fn memory_trace_csv(report: &SimReport) -> String {
    let mut out = String::from("time_us,resident_bytes\n");
    for (t, r) in &report.memory_trace {
        out.push_str(&format!("{t},{r}\n"));
    }
    out
}
