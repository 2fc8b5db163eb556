//! Experiment configuration file (TOML).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentId, InstanceId};
use crate::sim::{DispatcherKind, EngineConfig, InstanceProfile, PredictionMode, SchedulerKind};
use crate::workload::spec::{templates, AgentSpec, AppSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalConfig {
    /// Workflow instances per second.
    Poisson { rate: f64 },
    /// Timestamp file; gaps are multiplied by `scale`. Relative paths are
    /// resolved against the config file.
    Trace {
        path: PathBuf,
        #[serde(default = "unit")]
        scale: f64,
    },
}

fn unit() -> f64 {
    1.0
}

/// One co-located application: a built-in template (with optional
/// parameters) or a full inline description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppEntry {
    pub template: Option<String>,
    /// Share of arrivals that belong to this app.
    #[serde(default = "unit")]
    pub weight: f64,
    pub math_probability: Option<f64>,
    pub feedback_probability: Option<f64>,
    pub max_iterations: Option<u32>,
    pub name: Option<String>,
    pub entry: Option<AgentId>,
    pub agents: Option<Vec<AgentSpec>>,
}

impl AppEntry {
    pub fn template(name: &str) -> Self {
        Self {
            template: Some(name.into()),
            weight: 1.0,
            ..Self::default()
        }
    }

    pub fn inline(app: AppSpec, weight: f64) -> Self {
        Self {
            weight,
            name: Some(app.name),
            entry: Some(app.entry),
            agents: Some(app.agents),
            ..Self::default()
        }
    }

    pub fn resolve(&self) -> Result<AppSpec> {
        let app = match (&self.template, &self.agents) {
            (Some(t), None) => {
                let mut app = match t.as_str() {
                    "qa" => templates::qa(self.math_probability.unwrap_or(0.5)),
                    "rg" => templates::rg(),
                    "cg" => templates::cg(
                        self.feedback_probability.unwrap_or(0.3),
                        self.max_iterations.unwrap_or(2),
                    ),
                    other => return Err(Error::Config(format!("unknown template {other:?}"))),
                };
                if let Some(n) = &self.name {
                    app.name = n.clone();
                }
                app
            }
            (None, Some(agents)) => AppSpec {
                name: self.name.clone().unwrap_or_else(|| "custom".into()),
                entry: self
                    .entry
                    .clone()
                    .ok_or_else(|| Error::Config("inline app needs an entry".into()))?,
                agents: agents.clone(),
            },
            _ => {
                return Err(Error::Config(
                    "each app needs exactly one of `template` or `agents`".into(),
                ))
            }
        };
        app.validate()?;
        Ok(app)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstancesConfig {
    pub count: usize,
    pub capacity: f64,
    pub decode_rate: f64,
    pub prefill_rate: f64,
    pub max_batch: usize,
}

impl Default for InstancesConfig {
    fn default() -> Self {
        let p = InstanceProfile::default();
        Self {
            count: 4,
            capacity: p.capacity,
            decode_rate: p.decode_rate,
            prefill_rate: p.prefill_rate,
            max_batch: p.max_batch,
        }
    }
}

impl InstancesConfig {
    pub fn profiles(&self) -> Vec<InstanceProfile> {
        vec![
            InstanceProfile {
                capacity: self.capacity,
                decode_rate: self.decode_rate,
                prefill_rate: self.prefill_rate,
                max_batch: self.max_batch,
            };
            self.count
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub scheduler: SchedulerKind,
    pub dispatcher: DispatcherKind,
    /// Overrides the engine's prediction mode for this strategy.
    #[serde(default)]
    pub prediction: Option<PredictionMode>,
}

impl StrategyConfig {
    pub fn new(scheduler: SchedulerKind, dispatcher: DispatcherKind) -> Self {
        Self {
            name: None,
            scheduler,
            dispatcher,
            prediction: None,
        }
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn kairos() -> Self {
        Self::new(SchedulerKind::Kairos, DispatcherKind::TimeSlot).named("kairos")
    }

    /// FCFS queue with round-robin placement.
    pub fn fcfs_rr() -> Self {
        Self::new(SchedulerKind::Fcfs, DispatcherKind::RoundRobin).named("fcfs_rr")
    }

    /// Fewest-remaining-stages queue with round-robin placement.
    pub fn topo_rr() -> Self {
        Self::new(SchedulerKind::TopoDepth, DispatcherKind::RoundRobin).named("topo_rr")
    }

    pub fn oracle() -> Self {
        Self::new(SchedulerKind::Oracle, DispatcherKind::TimeSlot).named("oracle")
    }

    pub fn without_priority() -> Self {
        Self::new(SchedulerKind::KairosWoPriority, DispatcherKind::TimeSlot).named("kairos_wo_priority")
    }

    pub fn without_packing() -> Self {
        Self::new(SchedulerKind::Kairos, DispatcherKind::KairosWoPacking).named("kairos_wo_packing")
    }

    /// Built-in strategies by their default names.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "kairos" => Self::kairos(),
            "fcfs_rr" => Self::fcfs_rr(),
            "topo_rr" => Self::topo_rr(),
            "oracle" => Self::oracle(),
            "kairos_wo_priority" => Self::without_priority(),
            "kairos_wo_packing" => Self::without_packing(),
            _ => return None,
        })
    }

    pub fn label(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}+{}", self.scheduler.as_str(), self.dispatcher.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Divide each request's latency by its own tokens instead of using the
    /// workflow-level ratio.
    pub per_request_token_latency: bool,
    /// Records sampled for pairwise sorting accuracy.
    pub accuracy_sample: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            per_request_token_latency: false,
            accuracy_sample: 300,
        }
    }
}

fn default_duration() -> f64 {
    1800.0
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_strategies() -> Vec<StrategyConfig> {
    vec![
        StrategyConfig::fcfs_rr(),
        StrategyConfig::topo_rr(),
        StrategyConfig::kairos(),
    ]
}

fn default_apps() -> Vec<AppEntry> {
    ["qa", "rg", "cg"].iter().map(|t| AppEntry::template(t)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Arrivals are generated on `[0, duration)`.
    #[serde(default = "default_duration")]
    pub duration: f64,
    /// Workflows arriving before this time are excluded from metrics.
    #[serde(default)]
    pub warmup: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Multiplies the arrival rate (calibration adjusts this).
    #[serde(default = "unit")]
    pub load: f64,
    pub arrival: ArrivalConfig,
    #[serde(default = "default_apps")]
    pub apps: Vec<AppEntry>,
    #[serde(default)]
    pub instances: InstancesConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub history: HistoryConfig,
}

/// Profiling pass whose profiler state seeds every measured run, standing in
/// for execution history collected before the measurement window. It replays
/// an independent workload (seed shifted by `seed_offset`) at `load` times the
/// experiment load, under FCFS with time-slot dispatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoryConfig {
    /// Seconds of profiled history; 0 disables the pass.
    pub duration: f64,
    pub load: f64,
    pub seed_offset: u64,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            duration: 1200.0,
            load: 0.5,
            seed_offset: 1_000_003,
        }
    }
}

impl HistoryConfig {
    pub fn disabled() -> Self {
        Self {
            duration: 0.0,
            ..Self::default()
        }
    }

    pub fn enabled(&self) -> bool {
        self.duration > 0.0
    }
}

impl ExperimentConfig {
    /// Co-located QA, RG and CG on the default cluster at `rate` workflows/s.
    pub fn colocated(rate: f64) -> Self {
        Self {
            duration: default_duration(),
            warmup: 300.0,
            seeds: default_seeds(),
            load: 1.0,
            arrival: ArrivalConfig::Poisson { rate },
            apps: default_apps(),
            instances: InstancesConfig::default(),
            engine: EngineConfig::default(),
            strategies: default_strategies(),
            metrics: MetricsConfig::default(),
            history: HistoryConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads a config file; relative trace paths become relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let ArrivalConfig::Trace { path: trace, .. } = &mut cfg.arrival {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    *trace = dir.join(&*trace);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_apps(&self) -> Result<Vec<(AppSpec, f64)>> {
        if self.apps.is_empty() {
            return Err(Error::Config("at least one app is required".into()));
        }
        let mut seen: BTreeSet<AgentId> = BTreeSet::new();
        let mut out = Vec::new();
        for entry in &self.apps {
            if !(entry.weight > 0.0 && entry.weight.is_finite()) {
                return Err(Error::Config("app weights must be positive".into()));
            }
            let app = entry.resolve()?;
            for a in &app.agents {
                if !seen.insert(a.name.clone()) {
                    return Err(Error::Config(format!(
                        "agent {} appears in more than one app; names must be unique",
                        a.name
                    )));
                }
            }
            out.push((app, entry.weight));
        }
        Ok(out)
    }

    /// Checks everything that can be checked before running.
    pub fn validate(&self) -> Result<Vec<(AppSpec, f64)>> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.duration) {
            return Err(Error::Config("warmup must lie within [0, duration)".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let h = &self.history;
        if !(h.duration >= 0.0 && h.duration.is_finite()) || !(h.load > 0.0 && h.load.is_finite()) {
            return Err(Error::Config("history duration must be non-negative and load positive".into()));
        }
        if !(self.load > 0.0 && self.load.is_finite()) {
            return Err(Error::Config("load must be positive".into()));
        }
        match &self.arrival {
            ArrivalConfig::Poisson { rate } if !(*rate > 0.0 && rate.is_finite()) => {
                return Err(Error::Config("poisson rate must be positive".into()));
            }
            ArrivalConfig::Trace { scale, .. } if !(*scale > 0.0 && scale.is_finite()) => {
                return Err(Error::Config("trace scale must be positive".into()));
            }
            _ => {}
        }
        if self.instances.count == 0 {
            return Err(Error::Config("at least one instance is required".into()));
        }
        for (i, p) in self.instances.profiles().iter().enumerate() {
            p.validate(InstanceId(i))?;
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        let labels: BTreeSet<String> = self.strategies.iter().map(|s| s.label()).collect();
        if labels.len() != self.strategies.len() {
            return Err(Error::Config("strategy labels must be unique".into()));
        }
        self.engine.validate()?;
        let apps = self.resolve_apps()?;
        for (app, _) in &apps {
            let peak = app.max_request_tokens() as f64;
            if peak > self.instances.capacity {
                return Err(Error::Config(format!(
                    "app {}: a request can reach {peak} KV tokens, above instance capacity {}",
                    app.name, self.instances.capacity
                )));
            }
        }
        Ok(apps)
    }
}

/// Remaining stage count of every agent across the apps' template graphs.
pub fn stage_depths(apps: &[(AppSpec, f64)]) -> Result<BTreeMap<AgentId, usize>> {
    let mut out = BTreeMap::new();
    for (app, _) in apps {
        let g = app.static_graph();
        for a in &app.agents {
            out.insert(a.name.clone(), crate::workload::spec::topo_depth_priority(&g, &a.name)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
duration = 300.0
warmup = 30.0
seeds = [1, 2]

[arrival]
kind = "poisson"
rate = 0.8

[[apps]]
template = "qa"
math_probability = 0.7

[[apps]]
template = "cg"
weight = 0.5
feedback_probability = 0.2

[[apps]]
name = "pair"
entry = "Asker"

[[apps.agents]]
name = "Asker"
prompt = { kind = "fixed", value = 50 }
output = { kind = "uniform", min = 10, max = 20 }
downstream = { kind = "next", agent = "Answerer" }

[[apps.agents]]
name = "Answerer"
prompt = { kind = "fixed", value = 50 }
output = { kind = "log_normal", median = 100.0, sigma = 0.5, max = 400 }

[instances]
count = 2
capacity = 16000

[engine]
slot_len = 0.25

[[strategies]]
scheduler = "kairos"
dispatcher = "time_slot"

[[strategies]]
name = "parrot"
scheduler = "fcfs"
dispatcher = "round_robin"
"#;

    #[test]
    fn parses_documented_schema() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let apps = cfg.validate().unwrap();
        assert_eq!(apps.len(), 3);
        assert_eq!(apps[2].0.agents.len(), 2);
        assert_eq!(cfg.instances.count, 2);
        assert_eq!(cfg.instances.max_batch, 32);
        assert_eq!(cfg.engine.slot_len, 0.25);
        assert_eq!(cfg.engine.dispatch_tick, 0.1);
        assert_eq!(cfg.strategies[0].label(), "kairos+time_slot");
        assert_eq!(cfg.strategies[1].label(), "parrot");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::colocated(1.0);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(ExperimentConfig::from_toml("bogus = 1\n[arrival]\nkind='poisson'\nrate=1.0").is_err());
        let mut cfg = ExperimentConfig::colocated(1.0);
        cfg.instances.capacity = 500.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::colocated(1.0);
        cfg.apps.push(AppEntry::template("qa"));
        assert!(cfg.validate().is_err(), "duplicate agents across apps");
        let mut cfg = ExperimentConfig::colocated(1.0);
        cfg.apps[0].template = Some("nope".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn depths_cover_all_agents() {
        let cfg = ExperimentConfig::colocated(1.0);
        let d = stage_depths(&cfg.validate().unwrap()).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d[&AgentId::named("Writer")], 1);
        assert_eq!(d[&AgentId::named("Router")], 2);
    }
}
