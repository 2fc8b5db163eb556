//! Online workflow reconstruction.
//!
//! Records sharing a message id form one workflow instance. Each record's
//! upstream name yields an edge; when one agent calls several distinct
//! downstream agents inside an instance, the execution spans of those calls
//! decide whether the fan-out is parallel or sequential.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AgentId, MessageId, RequestRecord};

/// Spans closer than this are treated as touching, not overlapping.
pub const OVERLAP_EPSILON: f64 = 1e-9;

/// Default bound on feedback-edge traversals when enumerating paths.
pub const DEFAULT_MAX_LOOP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FanoutKind {
    /// Exactly one downstream agent.
    Single,
    /// At least two downstream calls were observed running concurrently.
    Parallel,
    /// Downstream calls co-occur in an instance but never overlap in time.
    Sequential,
    /// Several downstream agents, but never more than one per instance
    /// (a runtime routing decision).
    Branch,
}

impl FanoutKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FanoutKind::Single => "single",
            FanoutKind::Parallel => "parallel",
            FanoutKind::Sequential => "sequential",
            FanoutKind::Branch => "branch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Span {
    pub agent: AgentId,
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(agent: AgentId, start: f64, end: f64) -> Self {
        Self { agent, start, end }
    }
}

/// Sweep over spans sorted by start time, tracking the furthest end seen so
/// far. Two spans overlap when the later start falls strictly before both
/// ends (by more than [`OVERLAP_EPSILON`]).
pub fn classify_fanout(spans: &[Span]) -> Result<FanoutKind> {
    if spans.len() < 2 {
        return Err(Error::InvalidInput(
            "fan-out classification needs at least two spans".into(),
        ));
    }
    if let Some(bad) = spans.iter().find(|s| !(s.end >= s.start)) {
        return Err(Error::InvalidInput(format!(
            "span for {} ends before it starts",
            bad.agent
        )));
    }
    let mut order: Vec<&Span> = spans.iter().collect();
    order.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));

    let mut max_end = f64::NEG_INFINITY;
    for span in order {
        let cut = span.start + OVERLAP_EPSILON;
        if cut < span.end && cut < max_end {
            return Ok(FanoutKind::Parallel);
        }
        max_end = max_end.max(span.end);
    }
    Ok(FanoutKind::Sequential)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkflowEdge {
    pub from: AgentId,
    pub to: AgentId,
    pub observations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FanoutPattern {
    pub node: AgentId,
    pub downstreams: BTreeSet<AgentId>,
    pub kind: FanoutKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Votes {
    parallel: u64,
    sequential: u64,
}

/// Problems found while ingesting an instance. The instance is still stored.
#[derive(Clone, Debug, PartialEq)]
pub enum Diagnostic {
    ConflictingEntry {
        msg_id: MessageId,
        entries: Vec<AgentId>,
    },
    MalformedRecord {
        msg_id: MessageId,
        agent: AgentId,
    },
    BadSpan {
        msg_id: MessageId,
        node: AgentId,
    },
}

/// Node/edge/fan-out structure with observation counts stripped, for
/// comparing a reconstruction against a template.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphShape {
    pub nodes: BTreeSet<AgentId>,
    pub edges: BTreeSet<(AgentId, AgentId)>,
    pub entries: BTreeSet<AgentId>,
    pub fanouts: BTreeMap<AgentId, FanoutKind>,
    pub feedback: BTreeSet<(AgentId, AgentId)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkflowGraph {
    nodes: BTreeSet<AgentId>,
    edges: BTreeMap<(AgentId, AgentId), u64>,
    entries: BTreeMap<AgentId, u64>,
    votes: BTreeMap<AgentId, Votes>,
    instances: u64,
}

impl WorkflowGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn instances(&self) -> u64 {
        self.instances
    }

    pub fn nodes(&self) -> &BTreeSet<AgentId> {
        &self.nodes
    }

    pub fn contains(&self, agent: &AgentId) -> bool {
        self.nodes.contains(agent)
    }

    pub fn edges(&self) -> Vec<WorkflowEdge> {
        self.edges
            .iter()
            .map(|((from, to), &n)| WorkflowEdge {
                from: from.clone(),
                to: to.clone(),
                observations: n,
            })
            .collect()
    }

    pub fn edge_count(&self, from: &AgentId, to: &AgentId) -> u64 {
        self.edges
            .get(&(from.clone(), to.clone()))
            .copied()
            .unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = &AgentId> {
        self.entries.keys()
    }

    /// The entry agent when the graph has exactly one.
    pub fn entry(&self) -> Option<&AgentId> {
        if self.entries.len() == 1 {
            self.entries.keys().next()
        } else {
            None
        }
    }

    pub fn add_node(&mut self, agent: AgentId) {
        self.nodes.insert(agent);
    }

    pub fn add_edge(&mut self, from: AgentId, to: AgentId, observations: u64) {
        self.nodes.insert(from.clone());
        self.nodes.insert(to.clone());
        *self.edges.entry((from, to)).or_insert(0) += observations;
    }

    pub fn mark_entry(&mut self, agent: AgentId) {
        self.nodes.insert(agent.clone());
        *self.entries.entry(agent).or_insert(0) += 1;
    }

    /// Adds one parallel/sequential observation for `node`'s fan-out.
    pub fn vote(&mut self, node: AgentId, kind: FanoutKind) {
        let votes = self.votes.entry(node).or_default();
        match kind {
            FanoutKind::Parallel => votes.parallel += 1,
            FanoutKind::Sequential => votes.sequential += 1,
            FanoutKind::Single | FanoutKind::Branch => {}
        }
    }

    fn downstreams(&self, node: &AgentId) -> BTreeSet<AgentId> {
        self.edges
            .keys()
            .filter(|(from, _)| from == node)
            .map(|(_, to)| to.clone())
            .collect()
    }

    pub fn fanout(&self, node: &AgentId) -> Option<FanoutPattern> {
        let downstreams = self.downstreams(node);
        if downstreams.is_empty() {
            return None;
        }
        let kind = if downstreams.len() == 1 {
            FanoutKind::Single
        } else {
            match self.votes.get(node) {
                None => FanoutKind::Branch,
                Some(v) if v.parallel == 0 && v.sequential == 0 => FanoutKind::Branch,
                // majority vote, ties resolve to parallel
                Some(v) if v.parallel >= v.sequential => FanoutKind::Parallel,
                Some(_) => FanoutKind::Sequential,
            }
        };
        Some(FanoutPattern {
            node: node.clone(),
            downstreams,
            kind,
        })
    }

    pub fn fanouts(&self) -> BTreeMap<AgentId, FanoutPattern> {
        self.nodes
            .iter()
            .filter_map(|n| self.fanout(n).map(|f| (n.clone(), f)))
            .collect()
    }

    /// Edges that close a cycle in a depth-first walk started from the entries
    /// (then from any node not reached), visiting neighbours in name order.
    pub fn feedback_edges(&self) -> BTreeSet<(AgentId, AgentId)> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Fresh,
            OnStack,
            Done,
        }
        let adjacency: BTreeMap<&AgentId, Vec<&AgentId>> = self
            .nodes
            .iter()
            .map(|n| {
                let outs = self
                    .edges
                    .keys()
                    .filter(|(f, _)| f == n)
                    .map(|(_, t)| t)
                    .collect();
                (n, outs)
            })
            .collect();
        let mut marks: BTreeMap<&AgentId, Mark> =
            self.nodes.iter().map(|n| (n, Mark::Fresh)).collect();
        let mut back = BTreeSet::new();

        let roots: Vec<&AgentId> = self.entries.keys().chain(self.nodes.iter()).collect();
        for root in roots {
            if marks[root] != Mark::Fresh {
                continue;
            }
            // iterative DFS: (node, next child index)
            let mut stack: Vec<(&AgentId, usize)> = vec![(root, 0)];
            marks.insert(root, Mark::OnStack);
            while let Some(top) = stack.last_mut() {
                let node = top.0;
                let children = &adjacency[node];
                if top.1 < children.len() {
                    let child = children[top.1];
                    top.1 += 1;
                    match marks[child] {
                        Mark::Fresh => {
                            marks.insert(child, Mark::OnStack);
                            stack.push((child, 0));
                        }
                        Mark::OnStack => {
                            back.insert((node.clone(), child.clone()));
                        }
                        Mark::Done => {}
                    }
                } else {
                    marks.insert(node, Mark::Done);
                    stack.pop();
                }
            }
        }
        back
    }

    /// All paths from `agent` to a point where the workflow can end. A path
    /// ends at a node without forward (non-feedback) successors; feedback edges
    /// may be followed at most `max_loop` times per path. Paths list the nodes
    /// after `agent`, so a terminal agent yields one empty path.
    pub fn downstream_paths(&self, agent: &AgentId, max_loop: usize) -> Result<Vec<Vec<AgentId>>> {
        if !self.nodes.contains(agent) {
            return Err(Error::UnknownAgent(agent.clone()));
        }
        let feedback = self.feedback_edges();
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.walk(agent, max_loop, &feedback, &mut path, &mut out);
        Ok(out)
    }

    fn walk(
        &self,
        node: &AgentId,
        loops_left: usize,
        feedback: &BTreeSet<(AgentId, AgentId)>,
        path: &mut Vec<AgentId>,
        out: &mut Vec<Vec<AgentId>>,
    ) {
        let succ = self.downstreams(node);
        let (back, forward): (Vec<_>, Vec<_>) = succ
            .into_iter()
            .partition(|to| feedback.contains(&(node.clone(), to.clone())));
        if forward.is_empty() {
            out.push(path.clone());
        }
        for to in forward {
            path.push(to.clone());
            self.walk(&to, loops_left, feedback, path, out);
            path.pop();
        }
        if loops_left > 0 {
            for to in back {
                path.push(to.clone());
                self.walk(&to, loops_left - 1, feedback, path, out);
                path.pop();
            }
        }
    }

    /// Folds one completed workflow instance into the graph.
    pub fn ingest_instance(&mut self, records: &[RequestRecord]) -> Vec<Diagnostic> {
        let mut diagnostics = Vec::new();
        let Some(first) = records.first() else {
            return diagnostics;
        };
        let msg_id = first.msg_id.clone();

        for r in records {
            if r.validate().is_err() {
                diagnostics.push(Diagnostic::MalformedRecord {
                    msg_id: msg_id.clone(),
                    agent: r.agent.clone(),
                });
            }
            self.nodes.insert(r.agent.clone());
            if let Some(up) = &r.upstream {
                self.add_edge(up.clone(), r.agent.clone(), 1);
            }
        }

        let mut roots: BTreeSet<AgentId> = records
            .iter()
            .filter(|r| r.upstream.is_none())
            .map(|r| r.agent.clone())
            .collect();
        if roots.is_empty() {
            // No upstream-less record: fall back to callers that are never called.
            let called: BTreeSet<&AgentId> = records.iter().map(|r| &r.agent).collect();
            roots = records
                .iter()
                .filter_map(|r| r.upstream.as_ref())
                .filter(|u| !called.contains(u))
                .cloned()
                .collect();
        }
        if roots.len() > 1 {
            diagnostics.push(Diagnostic::ConflictingEntry {
                msg_id: msg_id.clone(),
                entries: roots.iter().cloned().collect(),
            });
        }
        for root in roots {
            self.mark_entry(root);
        }

        let mut by_upstream: BTreeMap<&AgentId, Vec<Span>> = BTreeMap::new();
        for r in records {
            if let Some(up) = &r.upstream {
                by_upstream
                    .entry(up)
                    .or_default()
                    .push(Span::new(r.agent.clone(), r.exec_start, r.exec_end));
            }
        }
        for (node, spans) in by_upstream {
            let distinct: BTreeSet<&AgentId> = spans.iter().map(|s| &s.agent).collect();
            if distinct.len() < 2 {
                continue;
            }
            match classify_fanout(&spans) {
                Ok(kind) => self.vote(node.clone(), kind),
                Err(_) => diagnostics.push(Diagnostic::BadSpan {
                    msg_id: msg_id.clone(),
                    node: node.clone(),
                }),
            }
        }
        self.instances += 1;
        diagnostics
    }

    pub fn shape(&self) -> GraphShape {
        GraphShape {
            nodes: self.nodes.clone(),
            edges: self.edges.keys().cloned().collect(),
            entries: self.entries.keys().cloned().collect(),
            fanouts: self
                .fanouts()
                .into_iter()
                .map(|(k, f)| (k, f.kind))
                .collect(),
            feedback: self.feedback_edges(),
        }
    }

    /// Plain-text dump: nodes, edges with counts, fan-out kinds.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "instances: {}", self.instances);
        let entries: Vec<&str> = self.entries.keys().map(|a| a.as_str()).collect();
        let _ = writeln!(s, "entries: {}", entries.join(", "));
        let _ = writeln!(s, "nodes:");
        for n in &self.nodes {
            let _ = writeln!(s, "  {n}");
        }
        let feedback = self.feedback_edges();
        let _ = writeln!(s, "edges:");
        for ((from, to), count) in &self.edges {
            let tag = if feedback.contains(&(from.clone(), to.clone())) {
                " (feedback)"
            } else {
                ""
            };
            let _ = writeln!(s, "  {from} -> {to} x{count}{tag}");
        }
        let _ = writeln!(s, "fanouts:");
        for (node, f) in self.fanouts() {
            let ds: Vec<&str> = f.downstreams.iter().map(|a| a.as_str()).collect();
            let _ = writeln!(s, "  {node}: {} [{}]", f.kind.as_str(), ds.join(", "));
        }
        s
    }
}

/// Buffers records per message id and folds each instance into the graph
/// once it is complete.
#[derive(Clone, Debug, Default)]
pub struct WorkflowAnalyzer {
    graph: WorkflowGraph,
    pending: BTreeMap<MessageId, Vec<RequestRecord>>,
    diagnostics: Vec<Diagnostic>,
}

impl WorkflowAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, record: RequestRecord) {
        self.pending
            .entry(record.msg_id.clone())
            .or_default()
            .push(record);
    }

    /// Marks `msg_id` complete and returns its records after folding them in.
    pub fn complete(&mut self, msg_id: &MessageId) -> Vec<RequestRecord> {
        let records = self.pending.remove(msg_id).unwrap_or_default();
        let diags = self.graph.ingest_instance(&records);
        self.diagnostics.extend(diags);
        records
    }

    /// Groups a whole trace by message id and ingests every group.
    pub fn ingest_trace(&mut self, records: &[RequestRecord]) {
        let mut groups: BTreeMap<&MessageId, Vec<RequestRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(&r.msg_id).or_default().push(r.clone());
        }
        for (_, group) in groups {
            let diags = self.graph.ingest_instance(&group);
            self.diagnostics.extend(diags);
        }
    }

    pub fn graph(&self) -> &WorkflowGraph {
        &self.graph
    }

    pub fn snapshot(&self) -> WorkflowGraph {
        self.graph.clone()
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }
}
