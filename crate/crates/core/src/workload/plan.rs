//! Sampling concrete workflow instances from an application description.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::model::{AgentId, MessageId};
use crate::workload::spec::{AppSpec, Downstream};

/// One agent call of a workflow instance, with its true lengths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlannedCall {
    pub agent: AgentId,
    /// Call whose output this call consumes.
    pub upstream: Option<usize>,
    /// Call whose completion releases this one. Differs from `upstream` for
    /// the later members of a sequential fan-out.
    pub trigger: Option<usize>,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkflowPlan {
    pub app: String,
    pub msg_id: MessageId,
    pub arrival: f64,
    pub calls: Vec<PlannedCall>,
}

impl WorkflowPlan {
    pub fn total_output_tokens(&self) -> u64 {
        self.calls.iter().map(|c| c.output_tokens as u64).sum()
    }

    /// Indices of calls released by the completion of `index`.
    pub fn released_by(&self, index: usize) -> impl Iterator<Item = usize> + '_ {
        self.calls
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.trigger == Some(index))
            .map(|(i, _)| i)
    }

    /// Pure execution time left from the start of each call to the end of
    /// the instance along its slowest chain of released calls.
    pub fn critical_path(&self, exec_time: impl Fn(&PlannedCall) -> f64) -> Vec<f64> {
        let mut rem = vec![0.0; self.calls.len()];
        for i in (0..self.calls.len()).rev() {
            let tail = self.released_by(i).map(|c| rem[c]).fold(0.0, f64::max);
            rem[i] = exec_time(&self.calls[i]) + tail;
        }
        rem
    }
}

struct Expander<'a, R: Rng + ?Sized> {
    app: &'a AppSpec,
    rng: &'a mut R,
    calls: Vec<PlannedCall>,
    loops: BTreeMap<AgentId, u32>,
}

impl<R: Rng + ?Sized> Expander<'_, R> {
    fn expand(&mut self, agent: &AgentId, upstream: Option<usize>, trigger: Option<usize>) -> usize {
        let spec = self.app.agent(agent).expect("validated app");
        let context = match upstream {
            Some(u) if spec.include_upstream => self.calls[u].output_tokens,
            _ => 0,
        };
        let prompt_tokens = spec.prompt.sample(self.rng) + context;
        let output_tokens = spec.output.sample(self.rng);
        let idx = self.calls.len();
        self.calls.push(PlannedCall {
            agent: agent.clone(),
            upstream,
            trigger,
            prompt_tokens,
            output_tokens,
        });

        if let Some(f) = &spec.feedback {
            let coin: f64 = self.rng.random();
            let used = self.loops.entry(agent.clone()).or_insert(0);
            if *used < f.max_iterations && coin < f.probability {
                *used += 1;
                let target = f.target.clone();
                self.expand(&target, Some(idx), Some(idx));
                return idx;
            }
        }

        match &spec.downstream {
            Downstream::None => {}
            Downstream::Next { agent } => {
                self.expand(agent, Some(idx), Some(idx));
            }
            Downstream::Choice { options } => {
                let u: f64 = self.rng.random();
                let mut acc = 0.0;
                let mut pick = &options[options.len() - 1].agent;
                for o in options {
                    acc += o.probability;
                    if u < acc {
                        pick = &o.agent;
                        break;
                    }
                }
                self.expand(pick, Some(idx), Some(idx));
            }
            Downstream::Parallel { agents } => {
                for a in agents {
                    self.expand(a, Some(idx), Some(idx));
                }
            }
            Downstream::Sequential { agents } => {
                let mut previous = idx;
                for a in agents {
                    previous = self.expand(a, Some(idx), Some(previous));
                }
            }
        }
        idx
    }
}

/// Samples one workflow instance. The entry call comes first; every other
/// call appears after the call that releases it.
pub fn instantiate_workflow<R: Rng + ?Sized>(
    app: &AppSpec,
    msg_id: MessageId,
    arrival: f64,
    rng: &mut R,
) -> WorkflowPlan {
    let mut ex = Expander {
        app,
        rng,
        calls: Vec::new(),
        loops: BTreeMap::new(),
    };
    let entry = app.entry.clone();
    ex.expand(&entry, None, None);
    WorkflowPlan {
        app: app.name.clone(),
        msg_id,
        arrival,
        calls: ex.calls,
    }
}
