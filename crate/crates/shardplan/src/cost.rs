//! Communication/transfer cost model and cluster configuration. The single
//! source of all time and size arithmetic used by the passes and the
//! simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::Parameter;

pub const DEFAULT_PREFETCH_LIMIT_BYTES: u64 = 2 * 1024 * 1024 * 1024;
pub const DEFAULT_FUSION_ALPHA: f64 = 1.5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("cost model: {0}")]
    BadCostModel(String),
    #[error("cluster config: {0}")]
    BadCluster(String),
}

/// Affine latency/bandwidth model for collectives and host transfers, with an
/// optional piecewise (size, time) table that overrides the affine collective
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fixed per-call cost of a collective, microseconds.
    pub collective_latency_us: u64,
    /// Collective bandwidth, bytes per second.
    pub collective_bandwidth_bps: u64,
    /// Fixed per-call cost of a host transfer, microseconds.
    pub host_latency_us: u64,
    /// Host link bandwidth, bytes per second.
    pub host_bandwidth_bps: u64,
    /// Measured (size_bytes, time_us) points. Strictly increasing in size,
    /// nondecreasing in time. When present, collective times interpolate this
    /// table instead of the affine model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise_collective: Option<Vec<(u64, u64)>>,
}

impl CostModel {
    pub fn affine(
        collective_latency_us: u64,
        collective_bandwidth_bps: u64,
        host_latency_us: u64,
        host_bandwidth_bps: u64,
    ) -> Self {
        Self {
            collective_latency_us,
            collective_bandwidth_bps,
            host_latency_us,
            host_bandwidth_bps,
            piecewise_collective: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.collective_bandwidth_bps == 0 || self.host_bandwidth_bps == 0 {
            return Err(ConfigError::BadCostModel("bandwidths must be > 0".into()));
        }
        if let Some(table) = &self.piecewise_collective {
            if table.is_empty() {
                return Err(ConfigError::BadCostModel(
                    "piecewise table must be nonempty".into(),
                ));
            }
            for w in table.windows(2) {
                if w[1].0 <= w[0].0 {
                    return Err(ConfigError::BadCostModel(
                        "piecewise sizes must be strictly increasing".into(),
                    ));
                }
                if w[1].1 < w[0].1 {
                    return Err(ConfigError::BadCostModel(
                        "piecewise times must be nondecreasing".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Communication time for a `bytes`-sized collective, in microseconds.
    /// Affine: latency + bytes/bandwidth. Tabular: flat at the first point
    /// below it, linear interpolation between points, and the last segment's
    /// slope extended beyond the table.
    pub fn comm_time_us(&self, bytes: u64) -> f64 {
        match &self.piecewise_collective {
            None => {
                self.collective_latency_us as f64
                    + bytes as f64 * 1e6 / self.collective_bandwidth_bps as f64
            }
            Some(table) => {
                let (s0, t0) = table[0];
                if bytes <= s0 {
                    return t0 as f64;
                }
                for w in table.windows(2) {
                    let (sa, ta) = w[0];
                    let (sb, tb) = w[1];
                    if bytes <= sb {
                        let frac = (bytes - sa) as f64 / (sb - sa) as f64;
                        return ta as f64 + frac * (tb - ta) as f64;
                    }
                }
                let (slast, tlast) = *table.last().unwrap();
                let slope = match table.len() {
                    1 => 0.0,
                    n => {
                        let (sprev, tprev) = table[n - 2];
                        (tlast - tprev) as f64 / (slast - sprev) as f64
                    }
                };
                tlast as f64 + slope * (bytes - slast) as f64
            }
        }
    }

    /// Host transfer time for `bytes`, microseconds. Always affine.
    pub fn host_transfer_time_us(&self, bytes: u64) -> f64 {
        self.host_latency_us as f64 + bytes as f64 * 1e6 / self.host_bandwidth_bps as f64
    }

    /// Whether merging two gathers beats issuing them separately:
    /// time(v1) + time(v2) > alpha * time(v1 + v2).
    pub fn should_fuse(&self, v1: u64, v2: u64, alpha: f64) -> bool {
        self.comm_time_us(v1) + self.comm_time_us(v2) > alpha * self.comm_time_us(v1 + v2)
    }
}

/// The full unsharded buffer materialized on each device by an all-gather.
pub fn allgather_buffer_size(param: &Parameter) -> u64 {
    param.size_bytes
}

/// Device counts, memory budgets, and scheduling knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub device_count: u32,
    pub device_memory_bytes: u64,
    /// Bytes set aside for runtime overhead before the memory limit is derived.
    #[serde(default)]
    pub reserved_bytes: u64,
    /// Total memory usage limit the passes schedule against.
    pub memory_limit_bytes: u64,
    /// Cap on the summed buffer size of one prefetch group.
    pub prefetch_limit_bytes: u64,
    /// Fusion aggressiveness threshold; >= 1.
    pub fusion_alpha: f64,
    /// Gradient accumulation micro-steps per iteration.
    pub accumulation_steps: u32,
    /// Host memory available for offloaded fragments; `None` means unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_memory_bytes: Option<u64>,
}

impl ClusterConfig {
    /// Config with the default budgets: limit = 90% of (device memory minus
    /// reserve), prefetch group cap 2 GiB, alpha 1.5.
    pub fn with_defaults(device_count: u32, device_memory_bytes: u64) -> Self {
        Self {
            device_count,
            device_memory_bytes,
            reserved_bytes: 0,
            memory_limit_bytes: default_memory_limit(device_memory_bytes, 0),
            prefetch_limit_bytes: DEFAULT_PREFETCH_LIMIT_BYTES,
            fusion_alpha: DEFAULT_FUSION_ALPHA,
            accumulation_steps: 1,
            host_memory_bytes: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.device_count == 0 {
            return Err(ConfigError::BadCluster("device_count must be >= 1".into()));
        }
        if self.memory_limit_bytes == 0 || self.memory_limit_bytes > self.device_memory_bytes {
            return Err(ConfigError::BadCluster(
                "memory limit must satisfy 0 < M <= device_memory_bytes".into(),
            ));
        }
        if self.prefetch_limit_bytes == 0 {
            return Err(ConfigError::BadCluster("prefetch limit must be > 0".into()));
        }
        if self.fusion_alpha < 1.0 {
            return Err(ConfigError::BadCluster("fusion alpha must be >= 1".into()));
        }
        if self.accumulation_steps == 0 {
            return Err(ConfigError::BadCluster(
                "accumulation steps must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub fn default_memory_limit(device_memory_bytes: u64, reserved_bytes: u64) -> u64 {
    let usable = device_memory_bytes.saturating_sub(reserved_bytes);
    usable / 10 * 9
}
