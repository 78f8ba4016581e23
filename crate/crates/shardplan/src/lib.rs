//! Schedule compiler and deterministic simulator for fully sharded training
//! graphs.
//!
//! The crate takes a lowered computation graph with per-node time and memory
//! annotations, rewrites its schedule through a sequence of profiling-guided
//! passes (fully-sharded gather/release insertion, proactive prefetching,
//! selective unsharding, adaptive optimizer-state offloading), and verifies
//! the effect of every rewrite with a three-stream discrete-event simulator
//! that doubles as the profiler feeding the next pass.

pub mod cost;
pub mod ir;
pub mod model;
pub mod par;
pub mod passes;
pub mod pipeline;
pub mod sim;
pub mod workload;

pub use cost::{allgather_buffer_size, ClusterConfig, CostModel};
pub use ir::{
    first_last_use, insert_after, insert_before, remove, validate, FragmentId, Graph, GraphBuilder,
    MarkerKind, Node, NodeId, NodeKind, OptimizerStateFragment, ParamId, ParamRef, Parameter,
    Phase, Schedule, Violation,
};
pub use passes::{
    apply_offload_all_sync, apply_offload_forward, apply_prefetch, apply_reload_backward,
    apply_sharding, apply_unshard, fuse, select_unshard, PassError, PassWarning, PrefetchMode,
};
pub use pipeline::{run_pipeline, PassKind, PipelineConfig, PipelineError, PipelineOutcome};
pub use sim::{profile, simulate, simulate_and_profile, MemoryProfile, SimOptions, SimReport};
pub use workload::{generate, WorkloadSpec};
