//! Discrete-event simulation of a cluster of LLM instances.
//!
//! Each running request holds `prompt` KV tokens from admission and grows by
//! `decode_rate` tokens per second once prefill ends. Memory is piecewise
//! linear between events, so overflow times are computed exactly instead of
//! stepping token by token.

pub mod config;
pub mod engine;

pub use config::{DispatcherKind, EngineConfig, InstanceProfile, PredictionMode, SchedulerKind};
pub use engine::{
    DecisionRow, EventKind, InstanceStatus, Overhead, RequestOutcome, SimEvent, SimOutput, Simulation,
    StatusSnapshot, WorkflowOutcome,
};
