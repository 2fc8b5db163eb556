//! Per-agent latency distributions with doubling-checkpoint convergence.
//!
//! Two families are kept per agent: single-request execution latency (feeds
//! the memory model's expected execution time) and remaining end-to-end
//! latency (feeds agent priorities).

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentId, RequestRecord};
use crate::stats::{mean, quantile_sorted};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Samples required before the first checkpoint.
    pub min_samples: usize,
    /// Converged once W1 between successive checkpoints drops below this
    /// fraction of the current sample mean.
    pub relative_threshold: f64,
    /// Keep only the most recent `window` samples.
    pub window: Option<usize>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            min_samples: 16,
            relative_threshold: 0.05,
            window: Some(4096),
        }
    }
}

/// 1-Wasserstein distance between two empirical distributions given as
/// ascending sample slices.
///
/// Walks the merged quantile grid. Breakpoints of `a` sit at multiples of
/// `1/n` and those of `b` at multiples of `1/m`; both are exact integers on a
/// common `1/(n*m)` grid, so every segment weight is exact.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySamples);
    }
    debug_assert!(a.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(b.windows(2).all(|w| w[0] <= w[1]));
    let (n, m) = (a.len() as u128, b.len() as u128);
    if n == m {
        let total: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / a.len() as f64);
    }
    let (mut i, mut j) = (0usize, 0usize);
    let mut cursor: u128 = 0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - cursor) as f64 * (a[i] - b[j]).abs();
        cursor = next;
        if next == next_a {
            i += 1;
        }
        if next == next_b {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeEstimate {
    pub value: f64,
    /// True when there were too few samples and the median was used.
    pub median_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct EmpiricalDistribution {
    sorted: Vec<f64>,
    arrivals: VecDeque<f64>,
    inserted: u64,
    next_checkpoint: u64,
    last_snapshot: Vec<f64>,
    last_distance: Option<f64>,
    converged: bool,
    config: ConvergenceConfig,
}

impl EmpiricalDistribution {
    pub fn new(config: ConvergenceConfig) -> Self {
        Self {
            sorted: Vec::new(),
            arrivals: VecDeque::new(),
            inserted: 0,
            next_checkpoint: config.min_samples.max(1) as u64,
            last_snapshot: Vec::new(),
            last_distance: None,
            converged: false,
            config,
        }
    }

    pub fn from_samples(config: ConvergenceConfig, samples: &[f64]) -> Result<Self> {
        let mut d = Self::new(config);
        for &s in samples {
            d.insert(s)?;
        }
        Ok(d)
    }

    pub fn samples(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn last_snapshot(&self) -> &[f64] {
        &self.last_snapshot
    }

    /// W1 measured at the most recent checkpoint.
    pub fn last_distance(&self) -> Option<f64> {
        self.last_distance
    }

    pub fn mean(&self) -> Option<f64> {
        mean(&self.sorted)
    }

    pub fn quantile(&self, q: f64) -> Option<f64> {
        quantile_sorted(&self.sorted, q)
    }

    /// Quantile of the samples strictly greater than `above`.
    pub fn conditional_quantile(&self, above: f64, q: f64) -> Option<f64> {
        let idx = self.sorted.partition_point(|v| *v <= above);
        quantile_sorted(&self.sorted[idx..], q)
    }

    /// Inserts a sample. Returns `true` when this insertion made the
    /// distribution converge.
    pub fn insert(&mut self, value: f64) -> Result<bool> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "latency sample must be finite and non-negative, got {value}"
            )));
        }
        let idx = self.sorted.partition_point(|v| *v <= value);
        self.sorted.insert(idx, value);
        self.arrivals.push_back(value);
        if let Some(window) = self.config.window {
            while self.arrivals.len() > window {
                let old = self.arrivals.pop_front().expect("non-empty");
                let pos = self.sorted.partition_point(|v| *v < old);
                self.sorted.remove(pos);
            }
        }
        self.inserted += 1;

        if self.inserted < self.next_checkpoint {
            return Ok(false);
        }
        self.next_checkpoint = self.next_checkpoint.saturating_mul(2);
        let mut newly = false;
        if !self.last_snapshot.is_empty() {
            let d = wasserstein_1d(&self.last_snapshot, &self.sorted)?;
            self.last_distance = Some(d);
            let scale = self.mean().unwrap_or(0.0);
            if !self.converged
                && self.sorted.len() >= self.config.min_samples
                && d < self.config.relative_threshold * scale
            {
                self.converged = true;
                newly = true;
            }
        }
        self.last_snapshot = self.sorted.clone();
        Ok(newly)
    }

    /// Most probable value from a histogram of the samples.
    ///
    /// Bin width follows Freedman–Diaconis (`2 * IQR / n^(1/3)`), or 64 equal
    /// bins when the IQR is zero. The estimate is the mean of the samples in
    /// the fullest bin (lowest bin on ties), which stays inside that bin and
    /// is exact for point masses.
    pub fn mode_estimate(&self) -> Result<ModeEstimate> {
        let n = self.sorted.len();
        if n == 0 {
            return Err(Error::EmptySamples);
        }
        if n < self.config.min_samples {
            return Ok(ModeEstimate {
                value: self.quantile(0.5).expect("non-empty"),
                median_fallback: true,
            });
        }
        let lo = self.sorted[0];
        let hi = self.sorted[n - 1];
        if hi <= lo {
            return Ok(ModeEstimate {
                value: lo,
                median_fallback: false,
            });
        }
        let iqr = self.quantile(0.75).unwrap() - self.quantile(0.25).unwrap();
        let (bins, width) = if iqr > 0.0 {
            let w = 2.0 * iqr / (n as f64).cbrt();
            let bins = (((hi - lo) / w).ceil() as usize).clamp(1, 1 << 16);
            (bins, (hi - lo) / bins as f64)
        } else {
            (64, (hi - lo) / 64.0)
        };
        let mut counts = vec![0usize; bins];
        let mut sums = vec![0.0f64; bins];
        for &x in &self.sorted {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
            sums[b] += x;
        }
        let mut best = 0;
        for b in 1..bins {
            if counts[b] > counts[best] {
                best = b;
            }
        }
        Ok(ModeEstimate {
            value: sums[best] / counts[best] as f64,
            median_fallback: false,
        })
    }
}

/// Remaining end-to-end latency samples of one agent.
#[derive(Clone, Debug)]
pub struct RemainingLatencyDistribution {
    pub agent: AgentId,
    pub dist: EmpiricalDistribution,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistributionSummary {
    pub kind: &'static str,
    pub agent: String,
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub mode: f64,
    pub p90: f64,
    pub max: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct LatencyProfiler {
    exec: BTreeMap<AgentId, EmpiricalDistribution>,
    /// `expected_exec_time` per agent, refreshed on every execution sample.
    expected: BTreeMap<AgentId, f64>,
    remaining: BTreeMap<AgentId, RemainingLatencyDistribution>,
    config: ConvergenceConfig,
}

impl Default for LatencyProfiler {
    fn default() -> Self {
        Self::new(ConvergenceConfig::default())
    }
}

impl LatencyProfiler {
    pub fn new(config: ConvergenceConfig) -> Self {
        Self {
            exec: BTreeMap::new(),
            expected: BTreeMap::new(),
            remaining: BTreeMap::new(),
            config,
        }
    }

    pub fn config(&self) -> ConvergenceConfig {
        self.config
    }

    pub fn record_execution(&mut self, agent: &AgentId, latency: f64) -> Result<bool> {
        let config = self.config;
        let d = self
            .exec
            .entry(agent.clone())
            .or_insert_with(|| EmpiricalDistribution::new(config));
        let newly = d.insert(latency)?;
        let expected = if d.is_converged() {
            d.mode_estimate().ok().map(|m| m.value)
        } else {
            d.quantile(0.5)
        };
        if let Some(v) = expected {
            self.expected.insert(agent.clone(), v);
        }
        Ok(newly)
    }

    /// Adds one remaining-latency sample per record of a completed instance:
    /// the instance's last completion minus the record's execution start.
    /// Returns agents whose remaining distribution converged on this call.
    pub fn record_remaining(&mut self, instance: &[RequestRecord]) -> Result<Vec<AgentId>> {
        let Some(finish) = instance.iter().map(|r| r.exec_end).reduce(f64::max) else {
            return Ok(Vec::new());
        };
        let mut newly = Vec::new();
        let config = self.config;
        for r in instance {
            let entry = self
                .remaining
                .entry(r.agent.clone())
                .or_insert_with(|| RemainingLatencyDistribution {
                    agent: r.agent.clone(),
                    dist: EmpiricalDistribution::new(config),
                });
            if entry.dist.insert(finish - r.exec_start)? {
                newly.push(r.agent.clone());
            }
        }
        Ok(newly)
    }

    /// Replays a whole trace (grouped by message id) into the profiler.
    pub fn ingest_trace(&mut self, records: &[RequestRecord]) -> Result<()> {
        let mut groups: BTreeMap<&crate::model::MessageId, Vec<RequestRecord>> = BTreeMap::new();
        for r in records {
            self.record_execution(&r.agent, r.exec_latency())?;
            groups.entry(&r.msg_id).or_default().push(r.clone());
        }
        for group in groups.values() {
            self.record_remaining(group)?;
        }
        Ok(())
    }

    pub fn execution(&self, agent: &AgentId) -> Option<&EmpiricalDistribution> {
        self.exec.get(agent)
    }

    pub fn remaining(&self, agent: &AgentId) -> Option<&RemainingLatencyDistribution> {
        self.remaining.get(agent)
    }

    pub fn remaining_all(&self) -> &BTreeMap<AgentId, RemainingLatencyDistribution> {
        &self.remaining
    }

    /// Expected single-request execution time: the histogram mode once the
    /// execution distribution has converged, the median before that.
    pub fn expected_exec_time(&self, agent: &AgentId) -> Option<f64> {
        self.expected.get(agent).copied()
    }

    /// Expected further execution time of a request that has already run for
    /// `elapsed` seconds: conditional median of the profiled execution
    /// latencies beyond `elapsed`, minus `elapsed`.
    pub fn expected_residual_exec(&self, agent: &AgentId, elapsed: f64) -> Option<f64> {
        let d = self.exec.get(agent)?;
        d.conditional_quantile(elapsed, 0.5).map(|q| q - elapsed)
    }

    pub fn summaries(&self) -> Vec<DistributionSummary> {
        let summarize = |kind, agent: &AgentId, d: &EmpiricalDistribution| {
            let mode = d.mode_estimate().map(|m| m.value).unwrap_or(f64::NAN);
            DistributionSummary {
                kind,
                agent: agent.to_string(),
                count: d.len(),
                min: d.quantile(0.0).unwrap_or(f64::NAN),
                median: d.quantile(0.5).unwrap_or(f64::NAN),
                mode,
                p90: d.quantile(0.9).unwrap_or(f64::NAN),
                max: d.quantile(1.0).unwrap_or(f64::NAN),
                converged: d.is_converged(),
            }
        };
        let mut out: Vec<_> = self
            .exec
            .iter()
            .map(|(a, d)| summarize("execution", a, d))
            .collect();
        out.extend(
            self.remaining
                .iter()
                .map(|(a, d)| summarize("remaining", a, &d.dist)),
        );
        out
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in self.summaries() {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MessageId;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(samples: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::from_samples(ConvergenceConfig::default(), samples).unwrap()
    }

    #[test]
    fn inserts_keep_order() {
        let d = dist(&[1.0]);
        assert_eq!(d.samples(), &[1.0]);
        assert!(!d.is_converged());
        let d = dist(&[0.5, 1.5, 1.0]);
        assert_eq!(d.samples(), &[0.5, 1.0, 1.5]);
    }

    #[test]
    fn negative_latency_rejected() {
        let mut d = dist(&[]);
        assert!(d.insert(-0.1).is_err());
        assert!(d.insert(f64::NAN).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 1.0);
        // unequal sizes: {0,1} vs {0,0,3}. Quantile grid in sixths:
        // [0,2/6): 0 vs 0, [2/6,3/6): 0 vs 0, [3/6,4/6): 1 vs 0, [4/6,1): 1 vs 3
        let d = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.0, 3.0]).unwrap();
        assert!((d - (1.0 / 6.0 + 2.0 * 2.0 / 6.0)).abs() < 1e-12);
        assert!(matches!(wasserstein_1d(&[], &[1.0]), Err(Error::EmptySamples)));
    }

    #[test]
    fn window_drops_oldest() {
        let cfg = ConvergenceConfig {
            window: Some(3),
            ..ConvergenceConfig::default()
        };
        let d = EmpiricalDistribution::from_samples(cfg, &[5.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(d.samples(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn converges_at_doubling_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..64).map(|_| 10.0 + rng.random::<f64>()).collect();
        let mut d = dist(&[]);
        let mut converged_at = None;
        for (i, s) in samples.iter().enumerate() {
            if d.insert(*s).unwrap() {
                converged_at = Some(i + 1);
            }
        }
        // recompute the 32-sample checkpoint distance independently
        let mut first16 = samples[..16].to_vec();
        first16.sort_by(f64::total_cmp);
        let mut first32 = samples[..32].to_vec();
        first32.sort_by(f64::total_cmp);
        let w = wasserstein_1d(&first16, &first32).unwrap();
        let m32 = first32.iter().sum::<f64>() / 32.0;
        assert!(w < 0.05 * m32, "tight distribution converges at 32");
        assert_eq!(converged_at, Some(32));
        assert_eq!(d.last_snapshot().len(), 64);
    }

    #[test]
    fn mode_examples() {
        let flat = dist(&[2.0; 20]);
        assert_eq!(flat.mode_estimate().unwrap().value, 2.0);

        let cfg = ConvergenceConfig {
            min_samples: 5,
            ..ConvergenceConfig::default()
        };
        let skew = EmpiricalDistribution::from_samples(cfg, &[1.0, 1.0, 1.0, 1.0, 10.0]).unwrap();
        assert_eq!(skew.mode_estimate().unwrap().value, 1.0);

        let mut bimodal = vec![1.0; 50];
        bimodal.extend(std::iter::repeat_n(5.0, 49));
        let b = dist(&bimodal);
        let m = b.mode_estimate().unwrap();
        assert_eq!(m.value, 1.0);
        assert!(!m.median_fallback);
    }

    #[test]
    fn few_samples_fall_back_to_median() {
        let d = dist(&[1.0, 2.0, 9.0]);
        let m = d.mode_estimate().unwrap();
        assert!(m.median_fallback);
        assert_eq!(m.value, 2.0);
    }

    fn rec(agent: &str, s: f64, e: f64) -> RequestRecord {
        RequestRecord {
            msg_id: MessageId::new("m-0"),
            agent: AgentId::named(agent),
            upstream: None,
            exec_start: s,
            exec_end: e,
            prompt_tokens: 1,
            output_tokens: 1,
            app_start: 0.0,
            queue_enter: None,
        }
    }

    #[test]
    fn remaining_samples_for_sequential_instance() {
        let mut p = LatencyProfiler::default();
        p.record_remaining(&[rec("Researcher", 0.0, 4.0), rec("Writer", 4.0, 10.0)])
            .unwrap();
        let r = p.remaining(&AgentId::named("Researcher")).unwrap();
        assert_eq!(r.dist.samples(), &[10.0]);
        let w = p.remaining(&AgentId::named("Writer")).unwrap();
        assert_eq!(w.dist.samples(), &[6.0]);

        let mut single = LatencyProfiler::default();
        single.record_remaining(&[rec("Solo", 2.0, 5.0)]).unwrap();
        assert_eq!(
            single.remaining(&AgentId::named("Solo")).unwrap().dist.samples(),
            &[3.0]
        );
    }

    #[test]
    fn expected_exec_time_uses_median_until_converged() {
        let mut p = LatencyProfiler::default();
        let agent = AgentId::named("Math");
        assert_eq!(p.expected_exec_time(&agent), None);
        for x in [1.0, 2.0, 30.0] {
            p.record_execution(&agent, x).unwrap();
        }
        assert_eq!(p.expected_exec_time(&agent), Some(2.0));
    }

    #[test]
    fn summary_csv_has_header_and_rows() {
        let mut p = LatencyProfiler::default();
        p.record_execution(&AgentId::named("A"), 1.0).unwrap();
        let mut buf = Vec::new();
        p.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,agent,count,min,median,mode,p90,max,converged"));
        assert!(text.contains("execution,A,1,"));
    }
}
