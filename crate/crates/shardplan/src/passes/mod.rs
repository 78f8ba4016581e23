//! Schedule rewrite passes: fully-sharded insertion, proactive prefetching,
//! selective unsharding, and adaptive offloading of optimizer state.
//!
//! Passes are pure functions from (graph, schedule, profile) to new values;
//! they never mutate their inputs. Each pass emits a decision log that tests
//! and the report command re-check against the contract it claims to enforce.

use serde::Serialize;
use thiserror::Error;

use crate::ir::{FragmentId, NodeId, ParamId};

mod offload;
mod prefetch;
mod shard;
mod unshard;

pub use offload::{
    apply_offload_all_sync, apply_offload_forward, apply_reload_backward, OffloadAction,
    OffloadDecision, OffloadOutcome, ReloadOutcome,
};
pub use prefetch::{
    apply_prefetch, fuse, PrefetchAction, PrefetchDecision, PrefetchMode, PrefetchOutcome,
};
pub use shard::{apply_sharding, ShardOutcome};
pub use unshard::{
    apply_unshard, select_unshard, UnshardDecision, UnshardOutcome, UnshardSelection,
};

#[derive(Debug, Error)]
pub enum PassError {
    #[error("graph already contains gather/release nodes for parameters")]
    AlreadySharded,
    #[error("memory profile does not cover node {0}")]
    ProfileMismatch(NodeId),
    #[error(
        "baseline schedule already violates the memory limit at gather {node}: \
         {required} bytes resident against limit {limit}"
    )]
    InfeasibleBaseline {
        node: NodeId,
        required: u64,
        limit: u64,
    },
    #[error("graph has no optimizer step or step-end marker to host the deferred release")]
    MissingStepMarker,
    #[error("no backward region markers found")]
    MissingBackwardRegion,
    #[error(
        "infeasible: memory before node {node} needs {required} bytes against limit {limit} \
         even with every optimizer-state fragment offloaded"
    )]
    Infeasible {
        node: NodeId,
        required: u64,
        limit: u64,
    },
    #[error("host memory too small for offload: need {needed} bytes, have {available}")]
    InsufficientHostCapacity { needed: u64, available: u64 },
    #[error(transparent)]
    Graph(#[from] crate::ir::GraphError),
}

/// Non-fatal findings surfaced alongside a pass result.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PassWarning {
    /// Parameter never consumed by a compute node; no gathers inserted.
    UnusedParameter { param: ParamId },
    /// One gather's buffer alone reaches the prefetch group cap; it stays at
    /// its original position, unfused.
    GatherExceedsPrefetchLimit { node: NodeId, bytes: u64 },
    /// Fragment could not be reloaded ahead of time; reloaded synchronously
    /// right before the optimizer step.
    ReloadFallback { fragment: FragmentId },
}
