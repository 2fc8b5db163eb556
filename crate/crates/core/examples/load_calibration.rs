//! Finds the arrival-rate multiplier at which FCFS with round-robin
//! placement spends a target share of request time queueing.

use agentflow::workload::{calibrate, Experiment, ExperimentConfig, StrategyConfig};

fn main() -> agentflow::Result<()> {
    let target: f64 = std::env::args().nth(1).map_or(0.5, |s| s.parse().expect("target ratio"));
    let exp = Experiment::new(ExperimentConfig::colocated(1.0))?;
    let cal = calibrate(&exp, &StrategyConfig::fcfs_rr(), target, &[1, 2, 3], 0.8, 1.4, 0.02, 10)?;
    for s in &cal.steps {
        println!("load {:.4} -> queueing ratio {:.3}", s.load, s.queue_ratio);
    }
    println!("target {target}: load {:.4} (ratio {:.3})", cal.load, cal.queue_ratio);
    Ok(())
}
