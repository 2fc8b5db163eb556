pub mod dispatch;
pub mod error;
pub mod model;
pub mod priority;
pub mod profiler;
pub mod sim;
pub mod stats;
pub mod workflow;
pub mod workload;

pub use error::{Error, Result};
pub use model::{AgentId, InstanceId, MessageId, MessageIdGen, PendingRequest, RequestRecord};
