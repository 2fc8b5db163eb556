//! Shared domain types: identifiers, request records and the trace file format.
//!
//! A trace is newline-delimited JSON, one [`RequestRecord`] per line. The
//! simulator writes traces in this format and the analyzers read them back.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of a role-specialized agent. Equality is exact string match.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AgentId(String);

impl AgentId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::EmptyAgentName);
        }
        Ok(Self(name))
    }

    /// Convenience constructor for literals.
    ///
    /// # Panics
    /// Panics if `name` is empty.
    pub fn named(name: &str) -> Self {
        Self::new(name).expect("agent name must be non-empty")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AgentId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<AgentId> for String {
    fn from(value: AgentId) -> Self {
        value.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier shared by every agent request spawned from one user request.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(String);

impl MessageId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Monotone message id issuer. Ids are `"{prefix}-{n}"` with `n` counting from zero.
#[derive(Clone, Debug)]
pub struct MessageIdGen {
    prefix: String,
    next: u64,
}

impl MessageIdGen {
    pub fn new() -> Self {
        Self::with_prefix("m")
    }

    pub fn with_prefix(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            next: 0,
        }
    }

    pub fn issued(&self) -> u64 {
        self.next
    }

    pub fn next_id(&mut self) -> MessageId {
        let id = MessageId(format!("{}-{}", self.prefix, self.next));
        self.next += 1;
        id
    }
}

impl Default for MessageIdGen {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub usize);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

/// One completed agent-level LLM call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub msg_id: MessageId,
    pub agent: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upstream: Option<AgentId>,
    pub exec_start: f64,
    pub exec_end: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub app_start: f64,
    /// When the request first entered the scheduling queue. Absent in traces
    /// that only carry engine timestamps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue_enter: Option<f64>,
}

impl RequestRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = self.app_start >= 0.0
            && self.exec_start >= self.app_start
            && self.exec_end >= self.exec_start
            && self.prompt_tokens >= 1
            && self.output_tokens >= 1
            && self.queue_enter.is_none_or(|q| q >= self.app_start && q <= self.exec_start);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "malformed record for {} / {}",
                self.msg_id, self.agent
            )))
        }
    }

    pub fn exec_latency(&self) -> f64 {
        self.exec_end - self.exec_start
    }
}

/// Queue-side view of a request before it executes.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingRequest {
    /// Run-unique request key. Distinguishes repeated calls to the same agent
    /// within one workflow instance.
    pub id: u64,
    pub msg_id: MessageId,
    pub agent: AgentId,
    pub prompt_tokens: u32,
    pub app_start: f64,
    pub queue_enter: f64,
}

pub fn write_trace<W: Write>(mut out: W, records: &[RequestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<RequestRecord>> {
    let mut records = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let record: RequestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Trace {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| Error::Trace {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn load_trace(path: &Path) -> Result<Vec<RequestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(std::io::BufReader::new(file))
}

pub fn save_trace(path: &Path, records: &[RequestRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_trace(&mut out, records)?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn first_message_id_is_m0() {
        let mut ids = MessageIdGen::new();
        assert_eq!(ids.next_id().as_str(), "m-0");
        assert_ne!(ids.next_id(), ids.next_id());
    }

    #[test]
    fn million_ids_are_distinct() {
        let mut ids = MessageIdGen::with_prefix("w");
        let set: HashSet<_> = (0..1_000_000).map(|_| ids.next_id()).collect();
        assert_eq!(set.len(), 1_000_000);
    }

    #[test]
    fn empty_agent_name_rejected() {
        assert!(matches!(AgentId::new(""), Err(Error::EmptyAgentName)));
        assert!(serde_json::from_str::<AgentId>("\"\"").is_err());
    }

    fn record() -> RequestRecord {
        RequestRecord {
            msg_id: MessageId::new("m-3"),
            agent: AgentId::named("Math"),
            upstream: Some(AgentId::named("Router")),
            exec_start: 1.5,
            exec_end: 4.25,
            prompt_tokens: 120,
            output_tokens: 80,
            app_start: 0.5,
            queue_enter: Some(1.0),
        }
    }

    #[test]
    fn validation_catches_time_inversions() {
        assert!(record().validate().is_ok());
        let mut r = record();
        r.exec_end = 1.0;
        assert!(r.validate().is_err());
        let mut r = record();
        r.app_start = 2.0;
        assert!(r.validate().is_err());
        let mut r = record();
        r.output_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn trace_lines_parse_back() {
        let mut entry = record();
        entry.upstream = None;
        entry.queue_enter = None;
        let records = vec![record(), entry];
        let mut buf = Vec::new();
        write_trace(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().nth(1).unwrap().contains("upstream"));
        assert_eq!(read_trace(&buf[..]).unwrap(), records);
    }

    #[test]
    fn bad_trace_line_reports_line_number() {
        let text = "\n{\"msg_id\":\"m\"}\n";
        match read_trace(text.as_bytes()) {
            Err(Error::Trace { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
