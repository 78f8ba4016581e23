//! On-disk formats: the strict model-specification JSON, the compiled
//! schedule bundle, the cluster/cost configuration (JSON or TOML), and size
//! strings with unit suffixes.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{
    default_memory_limit, ClusterConfig, ConfigError, CostModel, DEFAULT_FUSION_ALPHA,
    DEFAULT_PREFETCH_LIMIT_BYTES,
};
use crate::ir::{
    FragmentId, Graph, GraphError, MarkerKind, Node, NodeId, NodeKind, OptimizerStateFragment,
    ParamId, ParamRef, Parameter, Phase, Schedule,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("json parse error at line {line} column {column}: {message}")]
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("toml parse error: {0}")]
    Toml(String),
    #[error("model error: {0}")]
    Semantic(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

fn json_err(e: serde_json::Error) -> ModelError {
    ModelError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

// ── Model specification ──────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub parameters: Vec<ParamEntry>,
    #[serde(default)]
    pub optimizer_fragments: Vec<FragmentEntry>,
    pub nodes: Vec<NodeEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub id: u64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FragmentEntry {
    pub id: u64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: u64,
    pub kind: String,
    #[serde(default)]
    pub duration_us: u64,
    #[serde(default)]
    pub transient_bytes: u64,
    #[serde(default)]
    pub persistent_delta_bytes: i64,
    #[serde(default)]
    pub deps: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_ref: Option<u64>,
    #[serde(default)]
    pub micro_step: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
}

pub fn parse_kind(s: &str) -> Result<NodeKind, ModelError> {
    Ok(match s {
        "compute" => NodeKind::Compute,
        "allgather" => NodeKind::AllGather,
        "reduce_scatter" => NodeKind::ReduceScatter,
        "release" => NodeKind::Release,
        "offload_start" => NodeKind::OffloadStart,
        "reload_start" => NodeKind::ReloadStart,
        "transfer_sync" => NodeKind::TransferSync,
        "optimizer_step" => NodeKind::OptimizerStep,
        "marker_forward_begin" => NodeKind::Marker(MarkerKind::ForwardBegin),
        "marker_forward_end" => NodeKind::Marker(MarkerKind::ForwardEnd),
        "marker_backward_begin" => NodeKind::Marker(MarkerKind::BackwardBegin),
        "marker_backward_end" => NodeKind::Marker(MarkerKind::BackwardEnd),
        "marker_step_end" => NodeKind::Marker(MarkerKind::StepEnd),
        other => return Err(ModelError::Semantic(format!("unknown node kind '{other}'"))),
    })
}

fn parse_phase(s: &str) -> Result<Phase, ModelError> {
    Ok(match s {
        "forward" => Phase::Forward,
        "backward" => Phase::Backward,
        "step" => Phase::Step,
        other => return Err(ModelError::Semantic(format!("unknown phase '{other}'"))),
    })
}

fn default_phase(kind: NodeKind) -> Phase {
    match kind {
        NodeKind::Marker(MarkerKind::ForwardBegin) | NodeKind::Marker(MarkerKind::ForwardEnd) => {
            Phase::Forward
        }
        NodeKind::Marker(MarkerKind::BackwardBegin) | NodeKind::Marker(MarkerKind::BackwardEnd) => {
            Phase::Backward
        }
        NodeKind::Marker(MarkerKind::StepEnd) | NodeKind::OptimizerStep => Phase::Step,
        _ => Phase::Forward,
    }
}

/// Builds the graph and the initial schedule (the file's node order) from a
/// parsed model. `device_count` fixes the shard count of every parameter.
pub fn graph_from_model(
    model: &ModelFile,
    device_count: u32,
) -> Result<(Graph, Schedule), ModelError> {
    let mut graph = Graph::new();
    for p in &model.parameters {
        graph.add_parameter(Parameter {
            id: ParamId(p.id),
            size_bytes: p.size_bytes,
            shard_count: device_count,
        })?;
    }
    for f in &model.optimizer_fragments {
        graph.add_fragment(OptimizerStateFragment {
            id: FragmentId(f.id),
            size_bytes: f.size_bytes,
        })?;
    }
    let mut order = Vec::with_capacity(model.nodes.len());
    for n in &model.nodes {
        let kind = parse_kind(&n.kind)?;
        let phase = match &n.phase {
            Some(p) => parse_phase(p)?,
            None => default_phase(kind),
        };
        let param_refs = match n.param_ref {
            None => Vec::new(),
            Some(raw) => vec![if kind.references_fragment() {
                ParamRef::Fragment(FragmentId(raw))
            } else {
                ParamRef::Parameter(ParamId(raw))
            }],
        };
        let id = graph.insert_node(Node {
            id: NodeId(n.id),
            kind,
            duration_us: n.duration_us,
            transient_bytes: n.transient_bytes,
            persistent_delta_bytes: n.persistent_delta_bytes,
            deps: n.deps.iter().map(|d| NodeId(*d)).collect(),
            param_refs,
            micro_step: n.micro_step,
            phase,
        })?;
        order.push(id);
    }
    graph.check_structure()?;
    Ok((graph, Schedule::new(order)))
}

/// Serializes a graph back into the model format. Only graphs whose nodes
/// carry at most one buffer reference are representable (pass-produced fused
/// gathers are not; use the schedule bundle for those).
pub fn model_from_graph(graph: &Graph, schedule: &Schedule) -> Result<ModelFile, ModelError> {
    let mut nodes = Vec::with_capacity(schedule.len());
    let mut listed: BTreeSet<NodeId> = BTreeSet::new();
    for &id in &schedule.order {
        let n = graph.node(id)?;
        listed.insert(id);
        if n.param_refs.len() > 1 {
            return Err(ModelError::Semantic(format!(
                "node {id} carries {} buffer refs; not representable in the model format",
                n.param_refs.len()
            )));
        }
        let param_ref = n.param_refs.first().map(|r| match r {
            ParamRef::Parameter(p) => p.0,
            ParamRef::Fragment(f) => f.0,
        });
        nodes.push(NodeEntry {
            id: id.0,
            kind: n.kind.to_string(),
            duration_us: n.duration_us,
            transient_bytes: n.transient_bytes,
            persistent_delta_bytes: n.persistent_delta_bytes,
            deps: n.deps.iter().map(|d| d.0).collect(),
            param_ref,
            micro_step: n.micro_step,
            phase: Some(n.phase.to_string()),
        });
    }
    if listed.len() != graph.node_count() {
        return Err(ModelError::Semantic(
            "schedule does not cover every graph node".to_string(),
        ));
    }
    Ok(ModelFile {
        parameters: graph
            .params()
            .map(|p| ParamEntry {
                id: p.id.0,
                size_bytes: p.size_bytes,
            })
            .collect(),
        optimizer_fragments: graph
            .fragments()
            .map(|f| FragmentEntry {
                id: f.id.0,
                size_bytes: f.size_bytes,
            })
            .collect(),
        nodes,
    })
}

pub fn load_model(path: &Path, device_count: u32) -> Result<(Graph, Schedule), ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let model: ModelFile = serde_json::from_str(&text).map_err(json_err)?;
    graph_from_model(&model, device_count)
}

pub fn save_model(model: &ModelFile, path: &Path) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(model).map_err(json_err)?;
    std::fs::write(path, text + "\n").map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ── Compiled schedule bundle ─────────────────────────────────────────

/// Self-contained compiled artifact: the rewritten graph plus its schedule.
/// Unlike the model format this representation round-trips fused gathers and
/// transfer operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBundle {
    pub graph: Graph,
    pub schedule: Schedule,
}

pub fn save_schedule(bundle: &ScheduleBundle, path: &Path) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(bundle).map_err(json_err)?;
    std::fs::write(path, text + "\n").map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_schedule(path: &Path) -> Result<ScheduleBundle, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bundle: ScheduleBundle = serde_json::from_str(&text).map_err(json_err)?;
    bundle.graph.check_structure()?;
    Ok(bundle)
}

// ── Cluster / cost configuration ─────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub cluster: ClusterSection,
    pub cost_model: CostSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub device_count: u32,
    pub device_memory_bytes: u64,
    #[serde(default)]
    pub reserved_bytes: u64,
    /// Defaults to 90% of (device memory - reserve).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit_bytes: Option<u64>,
    /// Defaults to 2 GiB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefetch_limit_bytes: Option<u64>,
    /// Defaults to 1.5.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accumulation_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_memory_bytes: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub collective_latency_us: u64,
    pub collective_bandwidth_bps: u64,
    pub host_latency_us: u64,
    pub host_bandwidth_bps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise_collective: Option<Vec<(u64, u64)>>,
}

impl ClusterFile {
    pub fn into_configs(self) -> Result<(ClusterConfig, CostModel), ModelError> {
        let c = self.cluster;
        let cluster = ClusterConfig {
            device_count: c.device_count,
            device_memory_bytes: c.device_memory_bytes,
            reserved_bytes: c.reserved_bytes,
            memory_limit_bytes: c
                .memory_limit_bytes
                .unwrap_or_else(|| default_memory_limit(c.device_memory_bytes, c.reserved_bytes)),
            prefetch_limit_bytes: c
                .prefetch_limit_bytes
                .unwrap_or(DEFAULT_PREFETCH_LIMIT_BYTES),
            fusion_alpha: c.fusion_alpha.unwrap_or(DEFAULT_FUSION_ALPHA),
            accumulation_steps: c.accumulation_steps.unwrap_or(1),
            host_memory_bytes: c.host_memory_bytes,
        };
        cluster.validate()?;
        let m = self.cost_model;
        let cost = CostModel {
            collective_latency_us: m.collective_latency_us,
            collective_bandwidth_bps: m.collective_bandwidth_bps,
            host_latency_us: m.host_latency_us,
            host_bandwidth_bps: m.host_bandwidth_bps,
            piecewise_collective: m.piecewise_collective,
        };
        cost.validate()?;
        Ok((cluster, cost))
    }
}

/// Loads cluster + cost configuration from JSON or TOML, chosen by extension.
pub fn load_cluster(path: &Path) -> Result<(ClusterConfig, CostModel), ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ClusterFile = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| ModelError::Toml(e.to_string()))?,
        _ => serde_json::from_str(&text).map_err(json_err)?,
    };
    file.into_configs()
}

// ── Pipeline configuration ───────────────────────────────────────────

/// Pipeline run configuration: pass list, warmup iterations, strict-mode
/// flag, and where the decision logs go (relative to the output directory).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineFile {
    #[serde(default = "default_pass_list")]
    pub passes: Vec<String>,
    #[serde(default = "default_warmup")]
    pub warmup_iterations: u32,
    #[serde(default)]
    pub strict_prefetch: bool,
    #[serde(default = "default_prefetch_log")]
    pub prefetch_log: String,
    #[serde(default = "default_unshard_log")]
    pub unshard_log: String,
    #[serde(default = "default_offload_log")]
    pub offload_log: String,
}

fn default_pass_list() -> Vec<String> {
    vec!["shard".into(), "prefetch".into(), "unshard".into()]
}

fn default_warmup() -> u32 {
    5
}

fn default_prefetch_log() -> String {
    "prefetch_decisions.jsonl".into()
}

fn default_unshard_log() -> String {
    "unshard_decisions.jsonl".into()
}

fn default_offload_log() -> String {
    "offload_decisions.jsonl".into()
}

impl Default for PipelineFile {
    fn default() -> Self {
        Self {
            passes: default_pass_list(),
            warmup_iterations: default_warmup(),
            strict_prefetch: false,
            prefetch_log: default_prefetch_log(),
            unshard_log: default_unshard_log(),
            offload_log: default_offload_log(),
        }
    }
}

pub fn load_pipeline(path: &Path) -> Result<PipelineFile, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| ModelError::Toml(e.to_string())),
        _ => serde_json::from_str(&text).map_err(json_err),
    }
}

// ── Size strings ─────────────────────────────────────────────────────

/// Parses "4096", "64KB", "2MB", "1.5GB" (powers of 1024) into bytes.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (num, mult) = if let Some(v) = lower.strip_suffix("tb") {
        (v, 1u64 << 40)
    } else if let Some(v) = lower.strip_suffix("gb") {
        (v, 1u64 << 30)
    } else if let Some(v) = lower.strip_suffix("mb") {
        (v, 1u64 << 20)
    } else if let Some(v) = lower.strip_suffix("kb") {
        (v, 1u64 << 10)
    } else if let Some(v) = lower.strip_suffix('b') {
        (v, 1)
    } else {
        (lower.as_str(), 1)
    };
    let num = num.trim();
    if num.is_empty() {
        return Err(format!("invalid size '{s}'"));
    }
    if mult == 1 && !num.contains('.') {
        return num
            .parse::<u64>()
            .map_err(|e| format!("invalid size '{s}': {e}"));
    }
    let value: f64 = num
        .parse()
        .map_err(|e| format!("invalid size '{s}': {e}"))?;
    if value < 0.0 || !value.is_finite() {
        return Err(format!("invalid size '{s}'"));
    }
    Ok((value * mult as f64).round() as u64)
}
