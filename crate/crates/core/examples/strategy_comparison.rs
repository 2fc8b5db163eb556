//! Paired comparison of scheduling strategies on the co-located workload.
//!
//! Every strategy replays the same arrivals and token lengths for each seed.
//! Results go to `target/strategy_comparison/` as CSV plus a text summary.

use std::path::Path;

use agentflow::workload::{Experiment, ExperimentConfig, StrategyConfig};

fn main() -> agentflow::Result<()> {
    let mut cfg = ExperimentConfig::colocated(1.1);
    cfg.seeds = vec![1, 2, 3];
    cfg.strategies = vec![
        StrategyConfig::fcfs_rr(),
        StrategyConfig::topo_rr(),
        StrategyConfig::kairos(),
        StrategyConfig::without_priority(),
        StrategyConfig::without_packing(),
        StrategyConfig::oracle(),
    ];
    let exp = Experiment::new(cfg)?;
    let report = exp.run()?;
    print!("{}", report.summary_text());
    let dir = Path::new("target/strategy_comparison");
    report.write_dir(dir)?;
    println!("written to {}", dir.display());
    Ok(())
}
