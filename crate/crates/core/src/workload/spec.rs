//! Agent and application descriptions, plus the built-in QA / RG / CG templates.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentId;
use crate::workflow::{FanoutKind, WorkflowGraph};

/// Token-length generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LengthDist {
    Fixed {
        value: u32,
    },
    Uniform {
        min: u32,
        max: u32,
    },
    /// Log-normal with the given median, clamped to `[min, max]`.
    LogNormal {
        median: f64,
        sigma: f64,
        #[serde(default = "one")]
        min: u32,
        max: u32,
    },
}

fn one() -> u32 {
    1
}

impl LengthDist {
    pub fn fixed(value: u32) -> Self {
        LengthDist::Fixed { value }
    }

    pub fn log_normal(median: f64, sigma: f64, max: u32) -> Self {
        LengthDist::LogNormal {
            median,
            sigma,
            min: 1,
            max,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
            LengthDist::LogNormal {
                median,
                sigma,
                min,
                max,
            } => {
                let d = LogNormal::new(median.ln(), sigma).expect("validated parameters");
                let v: f64 = d.sample(rng);
                (v.round() as u32).clamp(min, max)
            }
        }
    }

    pub fn max_value(&self) -> u32 {
        match *self {
            LengthDist::Fixed { value } => value,
            LengthDist::Uniform { max, .. } | LengthDist::LogNormal { max, .. } => max,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let bad = match *self {
            LengthDist::Fixed { value } => value == 0,
            LengthDist::Uniform { min, max } => min == 0 || min > max,
            LengthDist::LogNormal {
                median,
                sigma,
                min,
                max,
            } => !(median > 0.0 && median.is_finite() && sigma >= 0.0 && sigma.is_finite()) || min == 0 || min > max,
        };
        if bad {
            return Err(Error::Config(format!("invalid length distribution for {what}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOption {
    pub agent: AgentId,
    pub probability: f64,
}

/// What an agent does after it finishes.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Downstream {
    #[default]
    None,
    /// Hand off to exactly one agent.
    Next { agent: AgentId },
    /// Pick one option at random.
    Choice { options: Vec<BranchOption> },
    /// Call all agents concurrently.
    Parallel { agents: Vec<AgentId> },
    /// Call the agents one after another; each starts when the previous call ends.
    Sequential { agents: Vec<AgentId> },
}

impl Downstream {
    pub fn targets(&self) -> Vec<&AgentId> {
        match self {
            Downstream::None => vec![],
            Downstream::Next { agent } => vec![agent],
            Downstream::Choice { options } => options.iter().map(|o| &o.agent).collect(),
            Downstream::Parallel { agents } | Downstream::Sequential { agents } => agents.iter().collect(),
        }
    }

    /// Fan-out kind a reconstruction from traces should report.
    pub fn expected_fanout(&self) -> Option<FanoutKind> {
        match self {
            Downstream::None => None,
            Downstream::Next { .. } => Some(FanoutKind::Single),
            Downstream::Choice { options } if options.len() == 1 => Some(FanoutKind::Single),
            Downstream::Choice { .. } => Some(FanoutKind::Branch),
            Downstream::Parallel { agents } if agents.len() == 1 => Some(FanoutKind::Single),
            Downstream::Parallel { .. } => Some(FanoutKind::Parallel),
            Downstream::Sequential { agents } if agents.len() == 1 => Some(FanoutKind::Single),
            Downstream::Sequential { .. } => Some(FanoutKind::Sequential),
        }
    }
}

/// Loop back to `target` with `probability`, at most `max_iterations` times
/// per workflow instance. Taking the loop replaces the regular downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feedback {
    pub target: AgentId,
    pub probability: f64,
    pub max_iterations: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: AgentId,
    /// Own prompt tokens (system prompt plus task text).
    pub prompt: LengthDist,
    pub output: LengthDist,
    #[serde(default)]
    pub downstream: Downstream,
    #[serde(default)]
    pub feedback: Option<Feedback>,
    /// Whether the upstream agent's output is appended to the prompt.
    #[serde(default = "yes")]
    pub include_upstream: bool,
}

fn yes() -> bool {
    true
}

impl AgentSpec {
    pub fn new(name: &str, prompt: LengthDist, output: LengthDist) -> Self {
        Self {
            name: AgentId::named(name),
            prompt,
            output,
            downstream: Downstream::None,
            feedback: None,
            include_upstream: true,
        }
    }

    pub fn then(mut self, downstream: Downstream) -> Self {
        self.downstream = downstream;
        self
    }

    pub fn next(self, agent: &str) -> Self {
        self.then(Downstream::Next {
            agent: AgentId::named(agent),
        })
    }

    pub fn with_feedback(mut self, target: &str, probability: f64, max_iterations: u32) -> Self {
        self.feedback = Some(Feedback {
            target: AgentId::named(target),
            probability,
            max_iterations,
        });
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: String,
    pub entry: AgentId,
    pub agents: Vec<AgentSpec>,
}

impl AppSpec {
    pub fn agent(&self, name: &AgentId) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| &a.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(format!("app {}: {m}", self.name)));
        let names: BTreeSet<&AgentId> = self.agents.iter().map(|a| &a.name).collect();
        if names.len() != self.agents.len() {
            return cfg("duplicate agent name".into());
        }
        if !names.contains(&self.entry) {
            return cfg(format!("entry {} is not defined", self.entry));
        }
        for a in &self.agents {
            a.prompt.validate(a.name.as_str())?;
            a.output.validate(a.name.as_str())?;
            for t in a.downstream.targets() {
                if !names.contains(t) {
                    return cfg(format!("{} calls undefined agent {t}", a.name));
                }
            }
            match &a.downstream {
                Downstream::Choice { options } => {
                    if options.is_empty() || options.iter().any(|o| !(o.probability >= 0.0)) {
                        return cfg(format!("{}: bad choice options", a.name));
                    }
                    let sum: f64 = options.iter().map(|o| o.probability).sum();
                    if (sum - 1.0).abs() > 1e-6 {
                        return cfg(format!("{}: choice probabilities sum to {sum}", a.name));
                    }
                }
                Downstream::Parallel { agents } | Downstream::Sequential { agents } if agents.is_empty() => {
                    return cfg(format!("{}: empty fan-out", a.name));
                }
                _ => {}
            }
            if let Some(f) = &a.feedback {
                if !names.contains(&f.target) {
                    return cfg(format!("{} loops back to undefined agent {}", a.name, f.target));
                }
                if f.max_iterations < 1 || !(0.0..=1.0).contains(&f.probability) {
                    return cfg(format!("{}: bad feedback parameters", a.name));
                }
            }
        }
        // forward edges must form a DAG
        let mut indegree: BTreeMap<&AgentId, usize> = names.iter().map(|n| (*n, 0)).collect();
        for a in &self.agents {
            for t in a.downstream.targets() {
                *indegree.get_mut(t).expect("checked") += 1;
            }
        }
        let mut ready: Vec<&AgentId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for t in self.agent(n).expect("known").downstream.targets() {
                let d = indegree.get_mut(t).expect("checked");
                *d -= 1;
                if *d == 0 {
                    ready.push(t);
                }
            }
        }
        if seen != names.len() {
            return cfg("downstream edges contain a cycle; declare loops as feedback".into());
        }
        Ok(())
    }

    /// Largest prompt + output a single call can reach.
    pub fn max_request_tokens(&self) -> u64 {
        let max_out: u64 = self.agents.iter().map(|a| a.output.max_value() as u64).max().unwrap_or(0);
        self.agents
            .iter()
            .map(|a| {
                let upstream = if a.include_upstream { max_out } else { 0 };
                a.prompt.max_value() as u64 + upstream + a.output.max_value() as u64
            })
            .max()
            .unwrap_or(0)
    }

    /// The workflow graph the template describes, with feedback edges as
    /// ordinary edges (they are found again as back edges).
    pub fn static_graph(&self) -> WorkflowGraph {
        let mut g = WorkflowGraph::new();
        g.mark_entry(self.entry.clone());
        for a in &self.agents {
            g.add_node(a.name.clone());
            for t in a.downstream.targets() {
                g.add_edge(a.name.clone(), t.clone(), 1);
            }
            if let Some(f) = &a.feedback {
                g.add_edge(a.name.clone(), f.target.clone(), 1);
            }
            if let Some(kind) = a.downstream.expected_fanout() {
                g.vote(a.name.clone(), kind);
            }
        }
        g
    }
}

/// Remaining stage count: the longest path from `agent` to a workflow end,
/// counting `agent` itself, with feedback loops unrolled once.
pub fn topo_depth_priority(graph: &WorkflowGraph, agent: &AgentId) -> Result<usize> {
    let paths = graph.downstream_paths(agent, 1)?;
    Ok(paths.iter().map(Vec::len).max().unwrap_or(0) + 1)
}

/// Default per-agent output scales follow the qualitative pattern of
/// production multi-agent apps: routers answer in a few dozen tokens, writers
/// and engineers in many hundreds.
pub mod templates {
    use super::*;

    fn prompt(median: f64) -> LengthDist {
        LengthDist::log_normal(median, 0.3, (median * 4.0) as u32)
    }

    fn output(median: f64, sigma: f64) -> LengthDist {
        LengthDist::log_normal(median, sigma, (median * 4.0) as u32)
    }

    /// Question answering: a router sends each question to one expert.
    pub fn qa(math_probability: f64) -> AppSpec {
        let choice = Downstream::Choice {
            options: vec![
                BranchOption {
                    agent: AgentId::named("Math"),
                    probability: math_probability,
                },
                BranchOption {
                    agent: AgentId::named("Humanities"),
                    probability: 1.0 - math_probability,
                },
            ],
        };
        AppSpec {
            name: "qa".into(),
            entry: AgentId::named("Router"),
            agents: vec![
                AgentSpec::new("Router", prompt(250.0), output(30.0, 0.3)).then(choice),
                AgentSpec::new("Math", prompt(200.0), output(150.0, 0.5)),
                AgentSpec::new("Humanities", prompt(200.0), output(400.0, 0.5)),
            ],
        }
    }

    /// Report generation: research, then write.
    pub fn rg() -> AppSpec {
        AppSpec {
            name: "rg".into(),
            entry: AgentId::named("Researcher"),
            agents: vec![
                AgentSpec::new("Researcher", prompt(300.0), output(500.0, 0.4)).next("Writer"),
                AgentSpec::new("Writer", prompt(200.0), output(750.0, 0.4)),
            ],
        }
    }

    /// Code generation: a five-role pipeline where QA can send work back to
    /// the engineer.
    pub fn cg(feedback_probability: f64, max_iterations: u32) -> AppSpec {
        AppSpec {
            name: "cg".into(),
            entry: AgentId::named("ProductManager"),
            agents: vec![
                AgentSpec::new("ProductManager", prompt(300.0), output(400.0, 0.4)).next("Architect"),
                AgentSpec::new("Architect", prompt(200.0), output(500.0, 0.4)).next("ProjectManager"),
                AgentSpec::new("ProjectManager", prompt(200.0), output(300.0, 0.4)).next("Engineer"),
                AgentSpec::new("Engineer", prompt(200.0), output(600.0, 0.4)).next("QAEngineer"),
                AgentSpec::new("QAEngineer", prompt(200.0), output(150.0, 0.4)).with_feedback(
                    "Engineer",
                    feedback_probability,
                    max_iterations,
                ),
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<AppSpec> {
        match name {
            "qa" => Some(qa(0.5)),
            "rg" => Some(rg()),
            "cg" => Some(cg(0.3, 2)),
            _ => None,
        }
    }
}
