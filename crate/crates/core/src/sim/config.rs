use serde::{Deserialize, Serialize};

use crate::dispatch::{DEFAULT_RESUME_WATERMARK, DEFAULT_SLOT_LEN};
use crate::error::{Error, Result};
use crate::model::InstanceId;
use crate::profiler::ConvergenceConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceProfile {
    /// KV-cache capacity in tokens.
    pub capacity: f64,
    /// Decode speed of one request, tokens per second.
    pub decode_rate: f64,
    /// Prompt tokens processed per second.
    pub prefill_rate: f64,
    pub max_batch: usize,
}

impl Default for InstanceProfile {
    fn default() -> Self {
        Self {
            capacity: 12_000.0,
            decode_rate: 30.0,
            prefill_rate: 8_000.0,
            max_batch: 32,
        }
    }
}

impl InstanceProfile {
    pub fn validate(&self, id: InstanceId) -> Result<()> {
        let ok = self.capacity > 0.0
            && self.decode_rate > 0.0
            && self.prefill_rate > 0.0
            && self.max_batch > 0
            && [self.capacity, self.decode_rate, self.prefill_rate]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("instance {id}: profile values must be positive")))
        }
    }

    /// Engine time of an unpreempted call.
    pub fn exec_time(&self, prompt: u32, output: u32) -> f64 {
        prompt as f64 / self.prefill_rate + output as f64 / self.decode_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Kairos,
    Fcfs,
    TopoDepth,
    Oracle,
    /// FCFS ordering with the rest of the stack unchanged.
    KairosWoPriority,
}

impl SchedulerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerKind::Kairos => "kairos",
            SchedulerKind::Fcfs => "fcfs",
            SchedulerKind::TopoDepth => "topo_depth",
            SchedulerKind::Oracle => "oracle",
            SchedulerKind::KairosWoPriority => "kairos_wo_priority",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatcherKind {
    TimeSlot,
    RoundRobin,
    StaticThreshold,
    /// Round-robin placement with the rest of the stack unchanged.
    KairosWoPacking,
}

impl DispatcherKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DispatcherKind::TimeSlot => "time_slot",
            DispatcherKind::RoundRobin => "round_robin",
            DispatcherKind::StaticThreshold => "static_threshold",
            DispatcherKind::KairosWoPacking => "kairos_wo_packing",
        }
    }

    pub fn is_round_robin(self) -> bool {
        matches!(self, DispatcherKind::RoundRobin | DispatcherKind::KairosWoPacking)
    }
}

/// Source of the expected execution time used by the time-slot ledger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    /// Mode (or median) of the agent's profiled execution latency.
    #[default]
    Profiled,
    /// The request's true duration.
    Perfect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub dispatch_tick: f64,
    pub slot_len: f64,
    pub resume_watermark: f64,
    /// Live-usage fraction below which the static-threshold dispatcher admits.
    pub static_threshold: f64,
    /// Fraction of generated tokens to regenerate after a preemption; the
    /// rest are restored by prefill.
    pub recompute_fraction: f64,
    /// Expected execution time for agents without any samples yet.
    pub cold_start_exec: f64,
    /// Completed workflow instances between priority-table rebuilds; a newly
    /// converged agent also triggers one.
    pub priority_refresh: usize,
    /// Keep scanning the queue past a request that fits nowhere.
    pub backfill: bool,
    /// Upper bound on queue entries evaluated per dispatch round.
    pub scan_limit: usize,
    pub prediction: PredictionMode,
    /// Re-predict the end of a request that outlives its expected duration
    /// from the agent's execution distribution conditioned on the time
    /// already spent, instead of dropping it from the ledger.
    pub overrun_reestimate: bool,
    pub convergence: ConvergenceConfig,
    pub log_decisions: bool,
    pub log_events: bool,
    pub measure_overhead: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dispatch_tick: 0.1,
            slot_len: DEFAULT_SLOT_LEN,
            resume_watermark: DEFAULT_RESUME_WATERMARK,
            static_threshold: 0.9,
            recompute_fraction: 1.0,
            cold_start_exec: 10.0,
            priority_refresh: 256,
            backfill: true,
            scan_limit: 256,
            prediction: PredictionMode::Profiled,
            overrun_reestimate: true,
            convergence: ConvergenceConfig::default(),
            log_decisions: false,
            log_events: false,
            measure_overhead: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.dispatch_tick, self.slot_len, self.cold_start_exec];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("engine intervals must be positive".into()));
        }
        for (name, v) in [
            ("resume_watermark", self.resume_watermark),
            ("static_threshold", self.static_threshold),
            ("recompute_fraction", self.recompute_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be within [0, 1]")));
            }
        }
        if self.priority_refresh == 0 {
            return Err(Error::Config("priority_refresh must be at least 1".into()));
        }
        if self.scan_limit == 0 {
            return Err(Error::Config("scan_limit must be at least 1".into()));
        }
        Ok(())
    }
}
