//! Paired-seed experiment matrix, load calibration and overhead measurement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AgentId, MessageIdGen};
use crate::profiler::LatencyProfiler;
use crate::sim::{EngineConfig, InstanceProfile, SimOutput, Simulation};
use crate::stats::{mean, quantile};
use crate::workload::arrival::{ingest_arrival_trace, poisson_arrivals};
use crate::workload::config::{stage_depths, ArrivalConfig, ExperimentConfig, StrategyConfig};
use crate::workload::metrics::{compute_metrics, RunMetrics};
use crate::workload::plan::{instantiate_workflow, WorkflowPlan};
use crate::workload::spec::AppSpec;

/// A validated experiment, ready to generate workloads and run strategies.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    apps: Vec<(AppSpec, f64)>,
    depths: BTreeMap<AgentId, usize>,
    profiles: Vec<InstanceProfile>,
    trace: Option<Arc<Vec<f64>>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: usize,
    pub mean_token_latency: f64,
    pub p90_token_latency: f64,
    pub p95_token_latency: f64,
    pub p99_token_latency: f64,
    pub queue_ratio: f64,
    pub preemption_rate: f64,
    pub wasted_memory_fraction: f64,
    pub decode_share: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    /// One row per (strategy, seed), strategies in config order.
    pub runs: Vec<RunMetrics>,
    pub summary: Vec<StrategySummary>,
}

impl ExperimentReport {
    /// Aggregates per-cell metrics; summary rows follow `strategies`.
    pub fn from_runs(strategies: &[StrategyConfig], runs: Vec<RunMetrics>) -> Self {
        let summary = strategies
            .iter()
            .map(|st| {
                let label = st.label();
                let rs: Vec<&RunMetrics> = runs.iter().filter(|r| r.strategy == label).collect();
                summarize(&label, &rs)
            })
            .collect();
        Self { runs, summary }
    }

    pub fn run(&self, strategy: &str, seed: u64) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }

    pub fn strategy(&self, strategy: &str) -> Vec<&RunMetrics> {
        self.runs.iter().filter(|r| r.strategy == strategy).collect()
    }

    pub fn write_runs_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.runs {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.summary {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_agents_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            strategy: &'a str,
            seed: u64,
            agent: &'a str,
            requests: usize,
            mean_exec: f64,
            mean_queue: f64,
            mean_remaining: f64,
            preemptions: u32,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.runs {
            for a in &r.per_agent {
                w.serialize(Row {
                    strategy: &r.strategy,
                    seed: r.seed,
                    agent: a.agent.as_str(),
                    requests: a.requests,
                    mean_exec: a.mean_exec,
                    mean_queue: a.mean_queue,
                    mean_remaining: a.mean_remaining,
                    preemptions: a.preemptions,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<22} {:>5} {:>10} {:>10} {:>10} {:>8} {:>8} {:>8}",
            "strategy", "seeds", "mean s/tok", "p90", "p99", "queue", "preempt", "wasted"
        );
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{:<22} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>7.1}% {:>7.2}% {:>7.2}%",
                r.strategy,
                r.seeds,
                r.mean_token_latency,
                r.p90_token_latency,
                r.p99_token_latency,
                r.queue_ratio * 100.0,
                r.preemption_rate * 100.0,
                r.wasted_memory_fraction * 100.0
            );
        }
        s
    }

    /// Writes `runs.csv`, `summary.csv`, `agents.csv` and `summary.txt`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        self.write_runs_csv(create("runs.csv")?)?;
        self.write_summary_csv(create("summary.csv")?)?;
        self.write_agents_csv(create("agents.csv")?)?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, self.summary_text()).map_err(|e| Error::io(p, e))
    }
}

fn summarize(label: &str, runs: &[&RunMetrics]) -> StrategySummary {
    let avg = |f: fn(&RunMetrics) -> f64| mean(&runs.iter().map(|r| f(r)).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    StrategySummary {
        strategy: label.to_string(),
        seeds: runs.len(),
        mean_token_latency: avg(|r| r.mean_token_latency),
        p90_token_latency: avg(|r| r.p90_token_latency),
        p95_token_latency: avg(|r| r.p95_token_latency),
        p99_token_latency: avg(|r| r.p99_token_latency),
        queue_ratio: avg(|r| r.queue_ratio),
        preemption_rate: avg(|r| r.preemption_rate),
        wasted_memory_fraction: avg(|r| r.wasted_memory_fraction),
        decode_share: avg(|r| r.decode_share),
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let apps = config.validate()?;
        let depths = stage_depths(&apps)?;
        let profiles = config.instances.profiles();
        let trace = match &config.arrival {
            ArrivalConfig::Trace { path, scale } => Some(Arc::new(ingest_arrival_trace(path, *scale)?)),
            ArrivalConfig::Poisson { .. } => None,
        };
        Ok(Self {
            config,
            apps,
            depths,
            profiles,
            trace,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn apps(&self) -> &[(AppSpec, f64)] {
        &self.apps
    }

    pub fn depths(&self) -> &BTreeMap<AgentId, usize> {
        &self.depths
    }

    pub fn profiles(&self) -> &[InstanceProfile] {
        &self.profiles
    }

    /// Same experiment at a different load multiplier.
    pub fn with_load(&self, load: f64) -> Result<Self> {
        if !(load > 0.0 && load.is_finite()) {
            return Err(Error::Config("load must be positive".into()));
        }
        let mut e = self.clone();
        e.config.load = load;
        Ok(e)
    }

    /// Arrival times for `seed`, scaled by the load multiplier.
    pub fn arrivals(&self, seed: u64) -> Result<Vec<f64>> {
        let load = self.config.load;
        match (&self.config.arrival, &self.trace) {
            (ArrivalConfig::Poisson { rate }, _) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                poisson_arrivals(rate * load, self.config.duration, &mut rng)
            }
            (ArrivalConfig::Trace { .. }, Some(ts)) => Ok(ts
                .iter()
                .map(|t| t / load)
                .take_while(|t| *t < self.config.duration)
                .collect()),
            (ArrivalConfig::Trace { .. }, None) => unreachable!("trace loaded in new"),
        }
    }

    /// Workflow instances for `seed`. Every strategy replays exactly these.
    pub fn workload(&self, seed: u64) -> Result<Vec<WorkflowPlan>> {
        let arrivals = self.arrivals(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xa11c);
        let total: f64 = self.apps.iter().map(|(_, w)| w).sum();
        let mut ids = MessageIdGen::new();
        Ok(arrivals
            .into_iter()
            .map(|t| {
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut app = &self.apps[self.apps.len() - 1].0;
                for (a, w) in &self.apps {
                    acc += w;
                    if u < acc {
                        app = a;
                        break;
                    }
                }
                instantiate_workflow(app, ids.next_id(), t, &mut rng)
            })
            .collect())
    }

    pub fn engine_for(&self, strategy: &StrategyConfig) -> EngineConfig {
        let mut engine = self.config.engine.clone();
        if let Some(p) = strategy.prediction {
            engine.prediction = p;
        }
        engine
    }

    /// Profiler state after the history pass for `seed`, if enabled.
    pub fn history(&self, seed: u64) -> Result<Option<LatencyProfiler>> {
        let h = &self.config.history;
        if !h.enabled() {
            return Ok(None);
        }
        let mut e = self.clone();
        e.config.duration = h.duration;
        e.config.load = self.config.load * h.load;
        let plans = e.workload(seed.wrapping_add(h.seed_offset))?;
        let out = e.simulate(&StrategyConfig::without_priority(), plans, None)?;
        Ok(Some(out.profiler))
    }

    pub fn simulate(
        &self,
        strategy: &StrategyConfig,
        plans: Vec<WorkflowPlan>,
        history: Option<&LatencyProfiler>,
    ) -> Result<SimOutput> {
        let mut sim = Simulation::new(
            plans,
            &self.profiles,
            strategy.scheduler,
            strategy.dispatcher,
            self.engine_for(strategy),
            self.depths.clone(),
        )?;
        if let Some(p) = history {
            sim = sim.with_history(p.clone());
        }
        Ok(sim.run())
    }

    pub fn metrics(&self, strategy: &StrategyConfig, seed: u64, out: &SimOutput) -> RunMetrics {
        compute_metrics(
            out,
            &strategy.label(),
            seed,
            self.config.warmup,
            self.config.metrics.per_request_token_latency,
        )
    }

    pub fn run_cell(&self, strategy: &StrategyConfig, seed: u64) -> Result<(RunMetrics, SimOutput)> {
        let history = self.history(seed)?;
        let out = self.simulate(strategy, self.workload(seed)?, history.as_ref())?;
        Ok((self.metrics(strategy, seed, &out), out))
    }

    /// Runs every configured strategy on every configured seed.
    pub fn run(&self) -> Result<ExperimentReport> {
        self.run_matrix(&self.config.strategies, &self.config.seeds)
    }

    /// Cells run in parallel; results are assembled in (strategy, seed) order.
    pub fn run_matrix(&self, strategies: &[StrategyConfig], seeds: &[u64]) -> Result<ExperimentReport> {
        let workloads: Vec<(Arc<Vec<WorkflowPlan>>, Option<LatencyProfiler>)> = seeds
            .par_iter()
            .map(|&s| Ok((Arc::new(self.workload(s)?), self.history(s)?)))
            .collect::<Result<_>>()?;
        let cells: Vec<(usize, usize)> = (0..strategies.len())
            .flat_map(|s| (0..seeds.len()).map(move |k| (s, k)))
            .collect();
        let runs: Vec<RunMetrics> = cells
            .par_iter()
            .map(|&(s, k)| {
                let (plans, history) = &workloads[k];
                let out = self.simulate(&strategies[s], plans.as_ref().clone(), history.as_ref())?;
                Ok(self.metrics(&strategies[s], seeds[k], &out))
            })
            .collect::<Result<_>>()?;
        Ok(ExperimentReport::from_runs(strategies, runs))
    }

    /// Mean queueing ratio of `strategy` over `seeds` at the current load.
    pub fn queue_ratio(&self, strategy: &StrategyConfig, seeds: &[u64]) -> Result<f64> {
        let ratios: Vec<f64> = seeds
            .par_iter()
            .map(|&s| self.run_cell(strategy, s).map(|(m, _)| m.queue_ratio))
            .collect::<Result<_>>()?;
        Ok(mean(&ratios).unwrap_or(0.0))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationStep {
    pub load: f64,
    pub queue_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Calibration {
    pub load: f64,
    pub queue_ratio: f64,
    pub steps: Vec<CalibrationStep>,
}

/// Bisection over the load multiplier so that `strategy` sees a mean queueing
/// ratio of `target` across `seeds`. The bracket starts at `[lo, hi]` and is
/// widened geometrically if it does not contain the target.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    experiment: &Experiment,
    strategy: &StrategyConfig,
    target: f64,
    seeds: &[u64],
    mut lo: f64,
    mut hi: f64,
    tolerance: f64,
    max_steps: usize,
) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidInput("target queueing ratio must lie in [0, 1)".into()));
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidInput("need 0 < lo < hi".into()));
    }
    let mut steps = Vec::new();
    let eval = |load: f64, steps: &mut Vec<CalibrationStep>| -> Result<f64> {
        let r = experiment.with_load(load)?.queue_ratio(strategy, seeds)?;
        steps.push(CalibrationStep { load, queue_ratio: r });
        Ok(r)
    };
    let mut r_lo = eval(lo, &mut steps)?;
    for _ in 0..8 {
        if r_lo <= target {
            break;
        }
        lo /= 2.0;
        r_lo = eval(lo, &mut steps)?;
    }
    let mut r_hi = eval(hi, &mut steps)?;
    for _ in 0..8 {
        if r_hi >= target {
            break;
        }
        hi *= 2.0;
        r_hi = eval(hi, &mut steps)?;
    }
    let mut best = if (r_lo - target).abs() < (r_hi - target).abs() {
        (lo, r_lo)
    } else {
        (hi, r_hi)
    };
    for _ in 0..max_steps {
        if (best.1 - target).abs() <= tolerance {
            break;
        }
        let mid = (lo * hi).sqrt();
        let r = eval(mid, &mut steps)?;
        if (r - target).abs() < (best.1 - target).abs() {
            best = (mid, r);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Calibration {
        load: best.0,
        queue_ratio: best.1,
        steps,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OverheadReport {
    pub rounds: usize,
    pub decisions: usize,
    pub mean_sort_seconds: f64,
    pub p99_sort_seconds: f64,
    pub mean_slot_eval_seconds: f64,
    pub p99_slot_eval_seconds: f64,
    /// (queue-length bucket upper bound, mean sort seconds)
    pub sort_by_queue_len: Vec<(usize, f64)>,
}

/// Wall-clock cost of queue ordering and slot evaluation recorded during a
/// run with `measure_overhead` enabled. Informational only.
pub fn measure_overhead(out: &SimOutput) -> OverheadReport {
    let sorts: Vec<f64> = out.overhead.sort.iter().map(|s| s.1).collect();
    let evals: Vec<f64> = out.overhead.slot_eval.iter().map(|s| s.1).collect();
    let mut buckets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &(len, t) in &out.overhead.sort {
        buckets.entry(len.max(1).next_power_of_two()).or_default().push(t);
    }
    OverheadReport {
        rounds: sorts.len(),
        decisions: evals.len(),
        mean_sort_seconds: mean(&sorts).unwrap_or(0.0),
        p99_sort_seconds: quantile(&sorts, 0.99).unwrap_or(0.0),
        mean_slot_eval_seconds: mean(&evals).unwrap_or(0.0),
        p99_slot_eval_seconds: quantile(&evals, 0.99).unwrap_or(0.0),
        sort_by_queue_len: buckets
            .into_iter()
            .map(|(b, v)| (b, mean(&v).unwrap_or(0.0)))
            .collect(),
    }
}
