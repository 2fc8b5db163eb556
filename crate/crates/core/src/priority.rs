//! Agent-level priorities from remaining-latency distributions.
//!
//! Pairwise W1 distances between agents (plus a synthetic zero-latency
//! anchor) are embedded on a line with classical MDS. An agent's priority is
//! its distance from the anchor on that line: nearer means shorter expected
//! remaining latency, which dequeues first.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AgentId, MessageId, PendingRequest};
use crate::profiler::{wasserstein_1d, RemainingLatencyDistribution};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Label {
    Agent(AgentId),
    /// Point mass at zero latency.
    Anchor,
}

/// Symmetric W1 distance matrix. The anchor is always the last label.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    labels: Vec<Label>,
    d: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Builds the matrix from sorted sample sets, adding the anchor.
    pub fn from_samples(agents: &[(AgentId, &[f64])]) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::NoConvergedAgents);
        }
        let n = agents.len() + 1;
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..agents.len() {
            for j in (i + 1)..agents.len() {
                let w = wasserstein_1d(agents[i].1, agents[j].1)?;
                d[i][j] = w;
                d[j][i] = w;
            }
            let w = wasserstein_1d(agents[i].1, &[0.0])?;
            d[i][n - 1] = w;
            d[n - 1][i] = w;
        }
        let mut labels: Vec<Label> = agents.iter().map(|(a, _)| Label::Agent(a.clone())).collect();
        labels.push(Label::Anchor);
        Ok(Self { labels, d })
    }

    /// Raw constructor; the last label must be the anchor.
    pub fn from_parts(labels: Vec<Label>, d: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        let square = d.len() == n && d.iter().all(|row| row.len() == n);
        if n < 2 || !square || labels.last() != Some(&Label::Anchor) {
            return Err(Error::InvalidInput("malformed distance matrix".into()));
        }
        for i in 0..n {
            for j in 0..n {
                let ok = d[i][j] >= 0.0 && (d[i][j] - d[j][i]).abs() <= 1e-12 * (1.0 + d[i][j]);
                if !ok || (i == j && d[i][j] != 0.0) {
                    return Err(Error::InvalidInput("distance matrix must be symmetric, non-negative, zero-diagonal".into()));
                }
            }
        }
        Ok(Self { labels, d })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }

    pub fn index_of(&self, agent: &AgentId) -> Option<usize> {
        self.labels
            .iter()
            .position(|l| matches!(l, Label::Agent(a) if a == agent))
    }
}

/// Distance matrix over the converged remaining-latency distributions.
pub fn build_distance_matrix(
    dists: &BTreeMap<AgentId, RemainingLatencyDistribution>,
) -> Result<DistanceMatrix> {
    let converged: Vec<(AgentId, &[f64])> = dists
        .iter()
        .filter(|(_, d)| d.dist.is_converged())
        .map(|(a, d)| (a.clone(), d.dist.samples()))
        .collect();
    DistanceMatrix::from_samples(&converged)
}

/// One-dimensional coordinates by classical (Torgerson) MDS.
///
/// Double-centres the squared distances and scales the leading eigenvector
/// by the square root of its eigenvalue. The sign is fixed so the anchor
/// never sits on the positive side, which keeps output deterministic; the
/// priority order itself only depends on distances to the anchor.
pub fn mds_coordinates(m: &DistanceMatrix) -> Vec<f64> {
    let n = m.len();
    let sq = DMatrix::from_fn(n, n, |i, j| m.get(i, j) * m.get(i, j));
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let total_mean = row_mean.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + total_mean)
    });
    let eig = SymmetricEigen::new(b);
    let (mut top, mut lambda) = (0, f64::NEG_INFINITY);
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        if v > lambda {
            lambda = v;
            top = k;
        }
    }
    let scale = sq.iter().cloned().fold(0.0, f64::max);
    if !(lambda > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return vec![0.0; n];
    }
    let root = lambda.sqrt();
    let mut coords: Vec<f64> = eig.eigenvectors.column(top).iter().map(|v| v * root).collect();
    if coords[n - 1] > 0.0 {
        coords.iter_mut().for_each(|c| *c = -*c);
    }
    coords
}

pub fn mds_embed_1d(m: &DistanceMatrix, version: u64) -> Result<PriorityTable> {
    if m.len() < 2 {
        return Err(Error::InvalidInput("MDS needs at least two points".into()));
    }
    let coords = mds_coordinates(m);
    let anchor_coord = coords[m.len() - 1];
    let coord = m
        .labels()
        .iter()
        .zip(&coords)
        .filter_map(|(l, &c)| match l {
            Label::Agent(a) => Some((a.clone(), c)),
            Label::Anchor => None,
        })
        .collect();
    Ok(PriorityTable {
        coord,
        anchor_coord,
        version,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PriorityRow {
    pub version: u64,
    pub agent: String,
    pub coordinate: f64,
    pub anchor_distance: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorityTable {
    coord: BTreeMap<AgentId, f64>,
    anchor_coord: f64,
    version: u64,
}

impl PriorityTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Rebuilds from the converged remaining-latency distributions.
    pub fn build(
        dists: &BTreeMap<AgentId, RemainingLatencyDistribution>,
        version: u64,
    ) -> Result<Self> {
        let m = build_distance_matrix(dists)?;
        mds_embed_1d(&m, version)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_empty(&self) -> bool {
        self.coord.is_empty()
    }

    pub fn len(&self) -> usize {
        self.coord.len()
    }

    pub fn coordinate(&self, agent: &AgentId) -> Option<f64> {
        self.coord.get(agent).copied()
    }

    pub fn anchor_coordinate(&self) -> f64 {
        self.anchor_coord
    }

    pub fn anchor_distance(&self, agent: &AgentId) -> Option<f64> {
        self.coord.get(agent).map(|c| (c - self.anchor_coord).abs())
    }

    /// Median anchor distance among known agents, used for agents that have
    /// not converged yet.
    pub fn cold_start_distance(&self) -> Option<f64> {
        let mut d: Vec<f64> = self
            .coord
            .values()
            .map(|c| (c - self.anchor_coord).abs())
            .collect();
        d.sort_by(f64::total_cmp);
        crate::stats::quantile_sorted(&d, 0.5)
    }

    /// Distance used for ordering `agent`'s requests.
    pub fn class_of(&self, agent: &AgentId) -> f64 {
        self.anchor_distance(agent)
            .or_else(|| self.cold_start_distance())
            .unwrap_or(0.0)
    }

    /// Agents ordered by anchor distance (name breaks ties), rank from 1.
    pub fn rows(&self) -> Vec<PriorityRow> {
        let mut rows: Vec<PriorityRow> = self
            .coord
            .iter()
            .map(|(a, &c)| PriorityRow {
                version: self.version,
                agent: a.to_string(),
                coordinate: c,
                anchor_distance: (c - self.anchor_coord).abs(),
                rank: 0,
            })
            .collect();
        rows.sort_by(|x, y| {
            x.anchor_distance
                .total_cmp(&y.anchor_distance)
                .then_with(|| x.agent.cmp(&y.agent))
        });
        for (i, r) in rows.iter_mut().enumerate() {
            r.rank = i + 1;
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Total order used by every queue: smaller dequeues first.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderKey {
    pub class: f64,
    pub app_start: f64,
    pub queue_enter: f64,
    pub msg_id: MessageId,
    pub id: u64,
}

impl Eq for OrderKey {}

impl Ord for OrderKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.class
            .total_cmp(&other.class)
            .then_with(|| self.app_start.total_cmp(&other.app_start))
            .then_with(|| self.queue_enter.total_cmp(&other.queue_enter))
            .then_with(|| self.msg_id.cmp(&other.msg_id))
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for OrderKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub trait QueueOrder {
    fn key(&self, r: &PendingRequest) -> OrderKey;

    /// Changes whenever keys of already-queued requests may have changed.
    fn version(&self) -> u64 {
        0
    }
}

pub(crate) fn fcfs_key(r: &PendingRequest) -> OrderKey {
    OrderKey {
        class: 0.0,
        app_start: 0.0,
        queue_enter: r.queue_enter,
        msg_id: r.msg_id.clone(),
        id: r.id,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Fcfs;

impl QueueOrder for Fcfs {
    fn key(&self, r: &PendingRequest) -> OrderKey {
        fcfs_key(r)
    }
}

/// Agent priority first, then application-level start time. Falls back to
/// FCFS while the table is empty.
#[derive(Clone, Debug, Default)]
pub struct AgentPriority {
    pub table: Arc<PriorityTable>,
}

impl AgentPriority {
    pub fn new(table: Arc<PriorityTable>) -> Self {
        Self { table }
    }
}

impl QueueOrder for AgentPriority {
    fn key(&self, r: &PendingRequest) -> OrderKey {
        if self.table.is_empty() {
            return fcfs_key(r);
        }
        OrderKey {
            class: self.table.class_of(&r.agent),
            app_start: r.app_start,
            queue_enter: r.queue_enter,
            msg_id: r.msg_id.clone(),
            id: r.id,
        }
    }

    fn version(&self) -> u64 {
        self.table.version() + 1
    }
}

/// Pending requests, re-sorted lazily when the ordering version changes.
#[derive(Clone, Debug, Default)]
pub struct ReadyQueue {
    entries: Vec<PendingRequest>,
    keys: Vec<OrderKey>,
    sorted_for: Option<u64>,
}

impl ReadyQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn enqueue(&mut self, r: PendingRequest, order: &dyn QueueOrder) {
        if self.sorted_for == Some(order.version()) {
            let key = order.key(&r);
            let pos = self.keys.partition_point(|k| k <= &key);
            self.keys.insert(pos, key);
            self.entries.insert(pos, r);
        } else {
            self.keys.push(order.key(&r));
            self.entries.push(r);
            self.sorted_for = None;
        }
    }

    fn ensure_sorted(&mut self, order: &dyn QueueOrder) {
        if self.sorted_for == Some(order.version()) {
            return;
        }
        let mut paired: Vec<(OrderKey, PendingRequest)> = self
            .entries
            .drain(..)
            .map(|r| (order.key(&r), r))
            .collect();
        paired.sort_by(|a, b| a.0.cmp(&b.0));
        self.keys.clear();
        for (k, r) in paired {
            self.keys.push(k);
            self.entries.push(r);
        }
        self.sorted_for = Some(order.version());
    }

    /// Entries in dequeue order.
    pub fn ordered(&mut self, order: &dyn QueueOrder) -> &[PendingRequest] {
        self.ensure_sorted(order);
        &self.entries
    }

    pub fn peek(&mut self, order: &dyn QueueOrder) -> Option<&PendingRequest> {
        self.ordered(order).first()
    }

    pub fn dequeue(&mut self, order: &dyn QueueOrder) -> Option<PendingRequest> {
        self.ensure_sorted(order);
        if self.entries.is_empty() {
            return None;
        }
        self.keys.remove(0);
        Some(self.entries.remove(0))
    }

    /// Removes the entry at `index` of the current order.
    pub fn take_at(&mut self, index: usize) -> PendingRequest {
        self.keys.remove(index);
        self.entries.remove(index)
    }

    pub fn drain_ordered(&mut self, order: &dyn QueueOrder) -> Vec<PendingRequest> {
        self.ensure_sorted(order);
        self.keys.clear();
        std::mem::take(&mut self.entries)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PendingRequest> {
        self.entries.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PairScope {
    /// Only pairs whose requests come from different agents.
    #[default]
    CrossAgent,
    All,
}

/// Fraction of request pairs where the earlier-scheduled request has the
/// smaller true remaining latency; equal latencies score one half. `None`
/// when no eligible pair exists. Requests missing from `truth` are skipped.
pub fn pairwise_sorting_accuracy(
    order: &[PendingRequest],
    truth: &HashMap<u64, f64>,
    scope: PairScope,
) -> Option<f64> {
    let known: Vec<(&PendingRequest, f64)> = order
        .iter()
        .filter_map(|r| truth.get(&r.id).map(|&t| (r, t)))
        .collect();
    let mut pairs = 0u64;
    let mut score = 0.0;
    for i in 0..known.len() {
        for j in (i + 1)..known.len() {
            let (ri, ti) = known[i];
            let (rj, tj) = known[j];
            if scope == PairScope::CrossAgent && ri.agent == rj.agent {
                continue;
            }
            pairs += 1;
            score += match ti.total_cmp(&tj) {
                Ordering::Less => 1.0,
                Ordering::Equal => 0.5,
                Ordering::Greater => 0.0,
            };
        }
    }
    (pairs > 0).then(|| score / pairs as f64)
}
