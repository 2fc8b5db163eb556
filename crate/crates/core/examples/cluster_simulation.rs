//! One simulated cluster, stepped event by event.
//!
//! Two instances serve a stream of research-and-write workflows. The status
//! monitor is sampled every 60 simulated seconds; at the end the run is
//! summarized per request.

use std::collections::BTreeMap;

use agentflow::model::MessageIdGen;
use agentflow::sim::{DispatcherKind, EngineConfig, InstanceProfile, SchedulerKind, Simulation};
use agentflow::workload::{instantiate_workflow, poisson_arrivals, templates};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> agentflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let app = templates::rg();
    let mut ids = MessageIdGen::new();
    let plans: Vec<_> = poisson_arrivals(0.25, 600.0, &mut rng)?
        .into_iter()
        .map(|t| instantiate_workflow(&app, ids.next_id(), t, &mut rng))
        .collect();
    let profile = InstanceProfile {
        capacity: 8000.0,
        ..InstanceProfile::default()
    };
    let mut sim = Simulation::new(
        plans,
        &[profile, profile],
        SchedulerKind::Fcfs,
        DispatcherKind::RoundRobin,
        EngineConfig::default(),
        BTreeMap::new(),
    )?;

    let mut next_report = 0.0;
    while sim.step() {
        if sim.now() >= next_report {
            let s = sim.snapshot();
            let per: Vec<String> = s
                .instances
                .iter()
                .map(|i| format!("{}: kv {:>5.0} run {:>2} pre {:>3}", i.instance, i.live_kv.max(0.0), i.running, i.preempted_total))
                .collect();
            println!("t={:>6.1}  {}", s.time, per.join(" | "));
            next_report += 60.0;
        }
    }
    let out = sim.run();
    let queue: f64 = out.requests.iter().map(|r| r.queue_time).sum();
    let e2e: f64 = out.requests.iter().map(|r| r.e2e()).sum();
    println!(
        "\n{} requests, {} preemptions, queueing ratio {:.1}%, finished at t={:.1}",
        out.requests.len(),
        out.preempted_total,
        100.0 * queue / e2e,
        out.end_time
    );
    Ok(())
}
