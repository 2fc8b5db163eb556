//! Recovers the call graph of the three benchmark applications from request
//! records alone.
//!
//! Each application is simulated on a lightly loaded cluster; the resulting
//! records (message id, agent, upstream, execution span) are fed to the
//! analyzer, which rebuilds nodes, edges, fan-out kinds and feedback loops.

use agentflow::workflow::WorkflowAnalyzer;
use agentflow::workload::{AppEntry, Experiment, ExperimentConfig, HistoryConfig, StrategyConfig};

fn main() -> agentflow::Result<()> {
    for template in ["qa", "rg", "cg"] {
        let mut cfg = ExperimentConfig::colocated(0.2);
        cfg.apps = vec![AppEntry::template(template)];
        cfg.duration = 1200.0;
        cfg.history = HistoryConfig::disabled();
        let exp = Experiment::new(cfg)?;
        let (_, out) = exp.run_cell(&StrategyConfig::fcfs_rr(), 1)?;

        let mut analyzer = WorkflowAnalyzer::new();
        analyzer.ingest_trace(&out.records);
        println!("== {template}\n{}", analyzer.graph().report());
    }
    Ok(())
}
