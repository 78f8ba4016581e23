//! The two-level optimization loop: an inner loop of pass -> re-profile so
//! every pass sees the memory effects of the previous one, and an outer loop
//! of short simulated training iterations that flips optimizer-state
//! residency on before the offload group runs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{ClusterConfig, ConfigError, CostModel};
use crate::ir::{validate, Graph, GraphError, Schedule, Violation};
use crate::passes::{
    apply_offload_forward, apply_prefetch, apply_reload_backward, apply_sharding, apply_unshard,
    select_unshard, OffloadDecision, PassError, PrefetchDecision, PrefetchMode, UnshardDecision,
};
use crate::sim::{simulate_and_profile, MemoryProfile, SimError, SimOptions, SimReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Shard,
    Prefetch,
    Unshard,
    Offload,
}

impl fmt::Display for PassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PassKind::Shard => f.write_str("shard"),
            PassKind::Prefetch => f.write_str("prefetch"),
            PassKind::Unshard => f.write_str("unshard"),
            PassKind::Offload => f.write_str("offload"),
        }
    }
}

impl std::str::FromStr for PassKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "shard" => Ok(PassKind::Shard),
            "prefetch" => Ok(PassKind::Prefetch),
            "unshard" => Ok(PassKind::Unshard),
            "offload" => Ok(PassKind::Offload),
            other => Err(format!(
                "unknown pass '{other}' (expected shard|prefetch|unshard|offload)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub passes: Vec<PassKind>,
    /// Simulated training iterations between the pre-update passes and the
    /// offload group.
    pub warmup_iterations: u32,
    /// Use the strict prefetch variant that re-checks memory at every
    /// crossed operator.
    pub strict_prefetch: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            passes: vec![PassKind::Shard, PassKind::Prefetch, PassKind::Unshard],
            warmup_iterations: 5,
            strict_prefetch: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub optimizer_resident: bool,
    pub report: SimReport,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub graph: Graph,
    pub schedule: Schedule,
    pub stages: Vec<StageReport>,
    pub warnings: Vec<String>,
    pub prefetch_decisions: Vec<PrefetchDecision>,
    pub unshard_decisions: Vec<UnshardDecision>,
    pub offload_decisions: Vec<OffloadDecision>,
}

impl PipelineOutcome {
    pub fn stage(&self, name: &str) -> Option<&StageReport> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn final_report(&self) -> &SimReport {
        &self
            .stages
            .last()
            .expect("pipeline always records the baseline stage")
            .report
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("schedule validation failed: {count} violation(s), first: {first}")]
    Validation { count: usize, first: Violation },
    #[error("shard pass must come first in the pass list")]
    ShardNotFirst,
    #[error("pass list contains duplicates")]
    DuplicatePass,
    #[error("{stage} pass failed: {source}")]
    Pass { stage: String, source: PassError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl PipelineError {
    /// Whether the failure is a memory-infeasibility rather than bad input.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            PipelineError::Pass {
                source: PassError::Infeasible { .. }
                    | PassError::InfeasibleBaseline { .. }
                    | PassError::InsufficientHostCapacity { .. },
                ..
            }
        )
    }
}

pub fn run_pipeline(
    graph: &Graph,
    schedule: &Schedule,
    cluster: &ClusterConfig,
    cost: &CostModel,
    config: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    cluster.validate()?;
    cost.validate()?;
    graph.check_structure()?;
    check_valid(graph, schedule)?;

    let mut seen = Vec::new();
    for p in &config.passes {
        if seen.contains(p) {
            return Err(PipelineError::DuplicatePass);
        }
        seen.push(*p);
    }
    if let Some(idx) = config.passes.iter().position(|p| *p == PassKind::Shard) {
        if idx != 0 {
            return Err(PipelineError::ShardNotFirst);
        }
    }

    let mut warnings: Vec<String> = Vec::new();
    let prefetch_idx = config.passes.iter().position(|p| *p == PassKind::Prefetch);
    let unshard_idx = config.passes.iter().position(|p| *p == PassKind::Unshard);
    if let (Some(u), Some(p)) = (unshard_idx, prefetch_idx) {
        if u < p {
            warnings.push(
                "unsharding scheduled before prefetching: unsharded buffers consume the \
                 headroom prefetching would use, so most prefetch opportunities are lost; \
                 the recommended order is prefetch, then unshard"
                    .to_string(),
            );
        }
    }

    let mut cur_graph = graph.clone();
    let mut cur_schedule = schedule.clone();
    let mut stages: Vec<StageReport> = Vec::new();
    let mut prefetch_decisions = Vec::new();
    let mut unshard_decisions = Vec::new();
    let mut offload_decisions = Vec::new();

    let pre_update = SimOptions {
        optimizer_resident: false,
    };
    let (report, mut cur_profile) =
        simulate_and_profile(&cur_graph, &cur_schedule, cost, cluster, pre_update)?;
    stages.push(StageReport {
        stage: "baseline".into(),
        optimizer_resident: false,
        report,
    });

    let prefetch_mode = if config.strict_prefetch {
        PrefetchMode::Strict
    } else {
        PrefetchMode::Faithful
    };

    for pass in config.passes.iter().filter(|p| **p != PassKind::Offload) {
        match pass {
            PassKind::Shard => {
                let out = apply_sharding(&cur_graph, &cur_schedule, cluster).map_err(|source| {
                    PipelineError::Pass {
                        stage: "shard".into(),
                        source,
                    }
                })?;
                for w in &out.warnings {
                    warnings.push(format!("shard: {}", serde_json::to_string(w).unwrap()));
                }
                cur_graph = out.graph;
                cur_schedule = out.schedule;
            }
            PassKind::Prefetch => {
                let out = apply_prefetch(
                    &cur_graph,
                    &cur_schedule,
                    &cur_profile,
                    cluster,
                    cost,
                    prefetch_mode,
                )
                .map_err(|source| PipelineError::Pass {
                    stage: "prefetch".into(),
                    source,
                })?;
                for w in &out.warnings {
                    warnings.push(format!("prefetch: {}", serde_json::to_string(w).unwrap()));
                }
                prefetch_decisions = out.decisions;
                cur_graph = out.graph;
                cur_schedule = out.schedule;
            }
            PassKind::Unshard => {
                let selection = select_unshard(&cur_graph, &cur_profile, cluster, cost);
                unshard_decisions = selection.decisions.clone();
                let out = apply_unshard(&cur_graph, &cur_schedule, &selection.selected).map_err(
                    |source| PipelineError::Pass {
                        stage: "unshard".into(),
                        source,
                    },
                )?;
                cur_graph = out.graph;
                cur_schedule = out.schedule;
            }
            PassKind::Offload => unreachable!("filtered out"),
        }
        check_valid(&cur_graph, &cur_schedule)?;
        let (report, profile) =
            simulate_and_profile(&cur_graph, &cur_schedule, cost, cluster, pre_update)?;
        stages.push(StageReport {
            stage: pass.to_string(),
            optimizer_resident: false,
            report,
        });
        cur_profile = profile;
    }

    if config.passes.contains(&PassKind::Offload) {
        // Outer loop: run the warmup iterations. The first training step
        // allocates the optimizer state, so residency flips on and the
        // schedule is re-profiled before the offload group runs.
        let mut warmup_report = None;
        for i in 0..config.warmup_iterations.max(1) {
            let opts = SimOptions {
                optimizer_resident: i > 0,
            };
            let (report, _) = simulate_and_profile(&cur_graph, &cur_schedule, cost, cluster, opts)?;
            warmup_report = Some(report);
        }
        let resident = SimOptions {
            optimizer_resident: true,
        };
        let (resident_report, _) =
            simulate_and_profile(&cur_graph, &cur_schedule, cost, cluster, resident)?;
        stages.push(StageReport {
            stage: "warmup".into(),
            optimizer_resident: true,
            report: warmup_report.unwrap_or(resident_report),
        });

        // The forward algorithm accounts for optimizer bytes explicitly, so
        // it consumes the optimizer-excluded profile of the current schedule.
        let fwd = apply_offload_forward(&cur_graph, &cur_schedule, &cur_profile, cluster).map_err(
            |source| PipelineError::Pass {
                stage: "offload".into(),
                source,
            },
        )?;
        offload_decisions = fwd.decisions.clone();
        check_valid(&fwd.graph, &fwd.schedule)?;
        let (fwd_report, fwd_profile) =
            simulate_and_profile(&fwd.graph, &fwd.schedule, cost, cluster, resident)?;
        stages.push(StageReport {
            stage: "offload-forward".into(),
            optimizer_resident: true,
            report: fwd_report,
        });

        let reload = apply_reload_backward(
            &fwd.graph,
            &fwd.schedule,
            &fwd_profile,
            &fwd.offloaded,
            &fwd.sync_of,
            cluster,
        )
        .map_err(|source| PipelineError::Pass {
            stage: "offload".into(),
            source,
        })?;
        for w in &reload.warnings {
            warnings.push(format!("offload: {}", serde_json::to_string(w).unwrap()));
        }
        offload_decisions.extend(reload.decisions.iter().copied());
        cur_graph = reload.graph;
        cur_schedule = reload.schedule;
        check_valid(&cur_graph, &cur_schedule)?;
        let (report, _) = simulate_and_profile(&cur_graph, &cur_schedule, cost, cluster, resident)?;
        stages.push(StageReport {
            stage: "offload".into(),
            optimizer_resident: true,
            report,
        });
    }

    Ok(PipelineOutcome {
        graph: cur_graph,
        schedule: cur_schedule,
        stages,
        warnings,
        prefetch_decisions,
        unshard_decisions,
        offload_decisions,
    })
}

fn check_valid(graph: &Graph, schedule: &Schedule) -> Result<(), PipelineError> {
    let violations = validate(graph, schedule);
    if let Some(first) = violations.first() {
        return Err(PipelineError::Validation {
            count: violations.len(),
            first: first.clone(),
        });
    }
    Ok(())
}

/// Convenience used by tests and the report command: profile of the current
/// schedule without optimizer-state residency.
pub fn profile_without_optimizer(
    graph: &Graph,
    schedule: &Schedule,
    cluster: &ClusterConfig,
    cost: &CostModel,
) -> Result<MemoryProfile, SimError> {
    crate::sim::profile(
        graph,
        schedule,
        cost,
        cluster,
        SimOptions {
            optimizer_resident: false,
        },
    )
}
