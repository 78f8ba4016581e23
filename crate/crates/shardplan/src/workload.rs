//! Synthetic layered training workloads: an unrolled forward+backward DAG per
//! gradient-accumulation micro-step, phase markers, per-layer parameters and
//! activation deltas, and optimizer-state fragments sized as a multiple of the
//! total parameter bytes.

use serde::{Deserialize, Serialize};

use crate::ir::{Graph, GraphBuilder, MarkerKind, NodeId, ParamId, Phase, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub layers: u32,
    /// Forward compute per layer, microseconds.
    pub compute_us: u64,
    /// Backward compute per layer, microseconds.
    pub backward_us: u64,
    pub param_bytes: u64,
    /// Per-layer override; falls back to `param_bytes` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_bytes_per_layer: Option<Vec<u64>>,
    /// Activation bytes retained per forward layer, freed by its backward.
    pub activation_bytes: u64,
    /// Scratch held only while a compute node runs.
    pub transient_bytes: u64,
    pub accumulation_steps: u32,
    /// Optimizer state size as a multiple of total parameter bytes
    /// (2.0 models momentum + variance).
    pub optimizer_multiplier: f64,
    /// How many equal fragments the optimizer state is split into.
    pub fragment_count: u32,
    pub optimizer_step_us: u64,
    pub shard_count: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            compute_us: 10_000,
            backward_us: 10_000,
            param_bytes: 1_000_000,
            param_bytes_per_layer: None,
            activation_bytes: 100_000,
            transient_bytes: 0,
            accumulation_steps: 1,
            optimizer_multiplier: 2.0,
            fragment_count: 32,
            optimizer_step_us: 1_000,
            shard_count: 8,
        }
    }
}

impl WorkloadSpec {
    fn layer_param_bytes(&self, layer: usize) -> u64 {
        match &self.param_bytes_per_layer {
            Some(v) => v[layer % v.len()],
            None => self.param_bytes,
        }
    }
}

/// Emits the layered graph and its natural schedule: per micro-step, a forward
/// chain then a backward chain (reverse layer order), delimited by markers; an
/// optimizer step and a step-end marker close the iteration.
pub fn generate(spec: &WorkloadSpec) -> (Graph, Schedule) {
    let mut b = GraphBuilder::new();
    let params: Vec<ParamId> = (0..spec.layers)
        .map(|l| b.param(spec.layer_param_bytes(l as usize), spec.shard_count))
        .collect();

    let total_param_bytes: u64 = (0..spec.layers as usize)
        .map(|l| spec.layer_param_bytes(l))
        .sum();
    let optimizer_bytes = (spec.optimizer_multiplier * total_param_bytes as f64).round() as u64;
    if optimizer_bytes > 0 && spec.fragment_count > 0 {
        let count = u64::from(spec.fragment_count).min(optimizer_bytes);
        let base = optimizer_bytes / count;
        let rem = optimizer_bytes % count;
        for i in 0..count {
            b.fragment(base + u64::from(i < rem));
        }
    }

    let mut prev: Option<NodeId> = None;
    for m in 0..spec.accumulation_steps {
        b.marker(MarkerKind::ForwardBegin, m);
        for &p in &params {
            let deps: Vec<NodeId> = prev.into_iter().collect();
            prev = Some(b.compute_with_memory(
                spec.compute_us,
                Phase::Forward,
                m,
                Some(p),
                &deps,
                spec.transient_bytes,
                spec.activation_bytes as i64,
            ));
        }
        b.marker(MarkerKind::ForwardEnd, m);
        b.marker(MarkerKind::BackwardBegin, m);
        for &p in params.iter().rev() {
            let deps: Vec<NodeId> = prev.into_iter().collect();
            prev = Some(b.compute_with_memory(
                spec.backward_us,
                Phase::Backward,
                m,
                Some(p),
                &deps,
                spec.transient_bytes,
                -(spec.activation_bytes as i64),
            ));
        }
        b.marker(MarkerKind::BackwardEnd, m);
    }
    let last_micro = spec.accumulation_steps.saturating_sub(1);
    let deps: Vec<NodeId> = prev.into_iter().collect();
    b.optimizer_step(spec.optimizer_step_us, last_micro, &deps);
    b.marker(MarkerKind::StepEnd, last_micro);

    b.finish()
}
