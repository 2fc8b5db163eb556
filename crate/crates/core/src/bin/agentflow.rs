use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agentflow::model::{load_trace, save_trace};
use agentflow::priority::PriorityTable;
use agentflow::profiler::LatencyProfiler;
use agentflow::workflow::WorkflowAnalyzer;
use agentflow::workload::{calibrate, Experiment, ExperimentReport, StrategyConfig};
use agentflow::{Error, Result};

#[derive(Parser)]
#[command(name = "agentflow", about = "Multi-agent LLM serving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy on every seed of an experiment config.
    Run(RunArgs),
    /// Reconstruct the workflow graph from a JSONL request trace.
    AnalyzeTrace {
        trace: PathBuf,
        /// Also write the edge list as CSV.
        #[arg(long)]
        edges: Option<PathBuf>,
    },
    /// Build the agent priority table from a JSONL request trace.
    Priorities {
        trace: PathBuf,
        /// Write the table as CSV instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-agent distribution summaries as CSV.
        #[arg(long)]
        distributions: Option<PathBuf>,
    },
    /// Search the load multiplier that yields a target queueing ratio.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    out_dir: PathBuf,
    /// Per-cell dispatch decision log (time-slot dispatcher).
    #[arg(long)]
    dump_decisions: bool,
    /// Per-cell NDJSON event log.
    #[arg(long)]
    dump_events: bool,
    /// Per-cell latency distribution summaries.
    #[arg(long)]
    dump_distributions: bool,
    /// Per-cell priority table of every version.
    #[arg(long)]
    dump_priorities: bool,
    /// Per-cell request outcomes.
    #[arg(long)]
    dump_requests: bool,
    /// Per-cell JSONL request trace (input for analyze-trace and priorities).
    #[arg(long)]
    dump_trace: bool,
}

impl RunArgs {
    fn any_dump(&self) -> bool {
        self.dump_decisions
            || self.dump_events
            || self.dump_distributions
            || self.dump_priorities
            || self.dump_requests
            || self.dump_trace
    }
}

#[derive(Args)]
struct CalibrateArgs {
    config: PathBuf,
    /// Target mean queueing ratio in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    target: f64,
    /// Reference strategy: a built-in name or a name from the config.
    #[arg(long, default_value = "fcfs_rr")]
    strategy: String,
    /// Seeds to average over; defaults to the config's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.5)]
    lo: f64,
    #[arg(long, default_value_t = 2.0)]
    hi: f64,
    #[arg(long, default_value_t = 0.01)]
    tolerance: f64,
    #[arg(long, default_value_t = 12)]
    max_steps: usize,
    /// Write the bisection steps as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn run(args: RunArgs) -> Result<()> {
    let mut exp = Experiment::load(&args.config)?;
    if !args.any_dump() {
        let report = exp.run()?;
        report.write_dir(&args.out_dir)?;
        print!("{}", report.summary_text());
        return Ok(());
    }
    exp.config.engine.log_decisions |= args.dump_decisions;
    exp.config.engine.log_events |= args.dump_events;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let strategies = exp.config.strategies.clone();
    let mut runs = Vec::new();
    for st in &strategies {
        for &seed in &exp.config.seeds {
            let (metrics, out) = exp.run_cell(st, seed)?;
            let stem = format!("{}-s{seed}", st.label());
            let path = |ext: &str| args.out_dir.join(format!("{stem}.{ext}"));
            if args.dump_decisions {
                out.write_decisions_csv(create(&path("decisions.csv"))?)?;
            }
            if args.dump_events {
                out.write_events(create(&path("events.ndjson"))?)?;
            }
            if args.dump_distributions {
                out.profiler.write_summary_csv(create(&path("distributions.csv"))?)?;
            }
            if args.dump_priorities {
                out.write_priority_history_csv(create(&path("priorities.csv"))?)?;
            }
            if args.dump_requests {
                out.write_requests_csv(create(&path("requests.csv"))?)?;
            }
            if args.dump_trace {
                save_trace(&path("trace.jsonl"), &out.records)?;
            }
            runs.push(metrics);
        }
    }
    let report = ExperimentReport::from_runs(&strategies, runs);
    report.write_dir(&args.out_dir)?;
    print!("{}", report.summary_text());
    Ok(())
}

fn analyze_trace(trace: &Path, edges: Option<&Path>) -> Result<()> {
    let records = load_trace(trace)?;
    let mut analyzer = WorkflowAnalyzer::new();
    analyzer.ingest_trace(&records);
    print!("{}", analyzer.graph().report());
    for d in analyzer.diagnostics() {
        eprintln!("warning: {d:?}");
    }
    if let Some(p) = edges {
        let mut w = csv::Writer::from_writer(create(p)?);
        for e in analyzer.graph().edges() {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn priorities(trace: &Path, out: Option<&Path>, distributions: Option<&Path>) -> Result<()> {
    let records = load_trace(trace)?;
    let mut profiler = LatencyProfiler::default();
    profiler.ingest_trace(&records)?;
    if let Some(p) = distributions {
        profiler.write_summary_csv(create(p)?)?;
    }
    let table = PriorityTable::build(profiler.remaining_all(), 1)?;
    match out {
        Some(p) => table.write_csv(create(p)?),
        None => table.write_csv(std::io::stdout().lock()),
    }
}

fn calibrate_cmd(args: CalibrateArgs) -> Result<()> {
    let exp = Experiment::load(&args.config)?;
    let strategy = exp
        .config
        .strategies
        .iter()
        .find(|s| s.label() == args.strategy)
        .cloned()
        .or_else(|| StrategyConfig::preset(&args.strategy))
        .ok_or_else(|| Error::Config(format!("unknown strategy {}", args.strategy)))?;
    let seeds = if args.seeds.is_empty() {
        exp.config.seeds.clone()
    } else {
        args.seeds
    };
    let cal = calibrate(&exp, &strategy, args.target, &seeds, args.lo, args.hi, args.tolerance, args.max_steps)?;
    for s in &cal.steps {
        println!("load {:.4} queue_ratio {:.4}", s.load, s.queue_ratio);
    }
    println!("calibrated load {:.4} queue_ratio {:.4}", cal.load, cal.queue_ratio);
    if let Some(p) = args.out {
        let mut w = csv::Writer::from_writer(create(&p)?);
        for s in &cal.steps {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::AnalyzeTrace { trace, edges } => analyze_trace(&trace, edges.as_deref()),
        Command::Priorities {
            trace,
            out,
            distributions,
        } => priorities(&trace, out.as_deref(), distributions.as_deref()),
        Command::Calibrate(args) => calibrate_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
