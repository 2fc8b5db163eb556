//! Metrics over a finished simulation.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{AgentId, PendingRequest};
use crate::priority::{pairwise_sorting_accuracy, PairScope, PriorityTable};
use crate::sim::SimOutput;
use crate::stats::{mean, quantile};

#[derive(Clone, Debug, Serialize)]
pub struct AgentMetrics {
    pub agent: AgentId,
    pub requests: usize,
    pub mean_exec: f64,
    pub mean_queue: f64,
    pub mean_remaining: f64,
    pub preemptions: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunMetrics {
    pub strategy: String,
    pub seed: u64,
    pub workflows: usize,
    pub requests: usize,
    /// Program-level token latency, seconds per token.
    pub mean_token_latency: f64,
    pub p90_token_latency: f64,
    pub p95_token_latency: f64,
    pub p99_token_latency: f64,
    /// Total queueing time over total end-to-end time of the requests.
    pub queue_ratio: f64,
    /// Share of requests preempted at least once.
    pub preemption_rate: f64,
    pub preempted_requests: usize,
    pub preemptions: u64,
    /// Discarded KV tokens over all KV tokens ever allocated.
    pub wasted_memory_fraction: f64,
    /// Share of engine time spent decoding.
    pub decode_share: f64,
    #[serde(skip)]
    pub per_agent: Vec<AgentMetrics>,
}

/// Workflows counted in the metrics: completed and arrived at or after `warmup`.
fn measured(out: &SimOutput, warmup: f64) -> Vec<usize> {
    out.workflows
        .iter()
        .filter(|w| w.arrival >= warmup)
        .map(|w| w.index)
        .collect()
}

pub fn compute_metrics(
    out: &SimOutput,
    strategy: &str,
    seed: u64,
    warmup: f64,
    per_request_token_latency: bool,
) -> RunMetrics {
    let keep: std::collections::BTreeSet<usize> = measured(out, warmup).into_iter().collect();
    let requests: Vec<_> = out.requests.iter().filter(|r| keep.contains(&r.workflow)).collect();
    let latencies: Vec<f64> = if per_request_token_latency {
        requests.iter().map(|r| r.e2e() / r.output_tokens as f64).collect()
    } else {
        out.workflows
            .iter()
            .filter(|w| keep.contains(&w.index))
            .map(|w| (w.end - w.arrival) / w.output_tokens as f64)
            .collect()
    };
    let q = |p| quantile(&latencies, p).unwrap_or(f64::NAN);
    let queue: f64 = requests.iter().map(|r| r.queue_time).sum();
    let e2e: f64 = requests.iter().map(|r| r.e2e()).sum();
    let preempted = requests.iter().filter(|r| r.preemptions > 0).count();
    let wasted: f64 = requests.iter().map(|r| r.wasted_tokens).sum();
    let useful: f64 = requests
        .iter()
        .map(|r| (r.prompt_tokens + r.output_tokens) as f64)
        .sum();
    let decode: f64 = requests.iter().map(|r| r.decode_time).sum();
    let engine: f64 = requests.iter().map(|r| r.engine_time()).sum();

    let ends: HashMap<usize, f64> = out.workflows.iter().map(|w| (w.index, w.end)).collect();
    let mut by_agent: BTreeMap<&AgentId, Vec<_>> = BTreeMap::new();
    for r in &requests {
        by_agent.entry(&r.agent).or_default().push(*r);
    }
    let per_agent = by_agent
        .into_iter()
        .map(|(agent, rs)| {
            let n = rs.len() as f64;
            AgentMetrics {
                agent: agent.clone(),
                requests: rs.len(),
                mean_exec: rs.iter().map(|r| r.exec_end - r.exec_start).sum::<f64>() / n,
                mean_queue: rs.iter().map(|r| r.queue_time).sum::<f64>() / n,
                mean_remaining: rs.iter().map(|r| ends[&r.workflow] - r.exec_start).sum::<f64>() / n,
                preemptions: rs.iter().map(|r| r.preemptions).sum(),
            }
        })
        .collect();

    RunMetrics {
        strategy: strategy.to_string(),
        seed,
        workflows: keep.len(),
        requests: requests.len(),
        mean_token_latency: mean(&latencies).unwrap_or(f64::NAN),
        p90_token_latency: q(0.90),
        p95_token_latency: q(0.95),
        p99_token_latency: q(0.99),
        queue_ratio: if e2e > 0.0 { queue / e2e } else { 0.0 },
        preemption_rate: if requests.is_empty() {
            0.0
        } else {
            preempted as f64 / requests.len() as f64
        },
        preempted_requests: preempted,
        preemptions: requests.iter().map(|r| r.preemptions as u64).sum(),
        wasted_memory_fraction: if wasted + useful > 0.0 { wasted / (wasted + useful) } else { 0.0 },
        decode_share: if engine > 0.0 { decode / engine } else { 0.0 },
        per_agent,
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SortingAccuracy {
    pub kairos: f64,
    pub topo_depth: f64,
    pub fcfs: f64,
    pub pairs_sampled: usize,
}

/// Pairwise ordering accuracy of the three queue policies on requests of one
/// run. A seeded sample of post-warmup requests is shuffled to stand in for
/// arrival order (FCFS); the agent-priority order and the stage-depth order
/// are stable sorts of that sequence. Truth is each request's observed time
/// from execution start to the end of its workflow. Only pairs from
/// different agents count.
pub fn sorting_accuracy(
    out: &SimOutput,
    table: &PriorityTable,
    depths: &BTreeMap<AgentId, usize>,
    warmup: f64,
    sample: usize,
    seed: u64,
) -> Option<SortingAccuracy> {
    let ends: HashMap<usize, f64> = out
        .workflows
        .iter()
        .filter(|w| w.arrival >= warmup)
        .map(|w| (w.index, w.end))
        .collect();
    let mut pool: Vec<PendingRequest> = out
        .requests
        .iter()
        .filter(|r| ends.contains_key(&r.workflow))
        .map(|r| PendingRequest {
            id: r.id,
            msg_id: r.msg_id.clone(),
            agent: r.agent.clone(),
            prompt_tokens: r.prompt_tokens,
            app_start: 0.0,
            queue_enter: 0.0,
        })
        .collect();
    let truth: HashMap<u64, f64> = out
        .requests
        .iter()
        .filter_map(|r| ends.get(&r.workflow).map(|e| (r.id, e - r.exec_start)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a17_ac00);
    pool.shuffle(&mut rng);
    pool.truncate(sample);

    let fcfs = pairwise_sorting_accuracy(&pool, &truth, PairScope::CrossAgent)?;
    let mut by_priority = pool.clone();
    by_priority.sort_by(|a, b| table.class_of(&a.agent).total_cmp(&table.class_of(&b.agent)));
    let kairos = pairwise_sorting_accuracy(&by_priority, &truth, PairScope::CrossAgent)?;
    let mut by_depth = pool.clone();
    by_depth.sort_by_key(|r| depths.get(&r.agent).copied().unwrap_or(usize::MAX));
    let topo_depth = pairwise_sorting_accuracy(&by_depth, &truth, PairScope::CrossAgent)?;
    Some(SortingAccuracy {
        kairos,
        topo_depth,
        fcfs,
        pairs_sampled: pool.len(),
    })
}
