//! Wall-clock cost of queue ordering and slot evaluation per decision, for
//! growing queue lengths and instance counts.

use agentflow::workload::{measure_overhead, Experiment, ExperimentConfig, HistoryConfig, StrategyConfig};

fn main() -> agentflow::Result<()> {
    for instances in [2usize, 4, 8, 16] {
        let mut cfg = ExperimentConfig::colocated(0.3 * instances as f64);
        cfg.instances.count = instances;
        cfg.duration = 600.0;
        cfg.warmup = 0.0;
        cfg.history = HistoryConfig::disabled();
        cfg.engine.measure_overhead = true;
        let exp = Experiment::new(cfg)?;
        let (_, out) = exp.run_cell(&StrategyConfig::kairos(), 1)?;
        let o = measure_overhead(&out);
        println!(
            "{instances:>2} instances: {} rounds, sort {:.2} us mean, slot evaluation {:.2} us mean over {} decisions",
            o.rounds,
            o.mean_sort_seconds * 1e6,
            o.mean_slot_eval_seconds * 1e6,
            o.decisions
        );
        for (len, t) in &o.sort_by_queue_len {
            println!("    queue <= {len:>4}: {:.2} us", t * 1e6);
        }
    }
    Ok(())
}
