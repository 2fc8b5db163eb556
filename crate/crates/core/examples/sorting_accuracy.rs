//! How often each queue order puts the request with less remaining work
//! first, measured on a Kairos run of the co-located workload.

use agentflow::workload::{sorting_accuracy, Experiment, ExperimentConfig, StrategyConfig};

fn main() -> agentflow::Result<()> {
    let exp = Experiment::new(ExperimentConfig::colocated(1.1))?;
    let warmup = exp.config.warmup;
    let sample = exp.config.metrics.accuracy_sample;
    for seed in 1..=3 {
        let (_, out) = exp.run_cell(&StrategyConfig::kairos(), seed)?;
        let a = sorting_accuracy(&out, &out.priority_table, exp.depths(), warmup, sample, seed)
            .expect("enough cross-agent pairs");
        println!(
            "seed {seed}: agent priority {:.3}  stage depth {:.3}  arrival order {:.3}  ({} requests)",
            a.kairos, a.topo_depth, a.fcfs, a.pairs_sampled
        );
    }
    Ok(())
}
