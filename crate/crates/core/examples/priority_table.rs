//! Agent priorities from remaining-latency samples.
//!
//! Three agents with overlapping latency distributions are compared by
//! 1-Wasserstein distance, embedded on a line together with a point mass at
//! zero, and ranked by their distance to that anchor.

use agentflow::model::AgentId;
use agentflow::priority::{mds_embed_1d, DistanceMatrix};
use agentflow::profiler::wasserstein_1d;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn samples(median: f64, sigma: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = LogNormal::new(median.ln(), sigma).unwrap();
    let mut v: Vec<f64> = (0..n).map(|_| d.sample(rng)).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn main() -> agentflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let router = samples(12.0, 0.6, 400, &mut rng);
    let writer = samples(27.0, 0.4, 400, &mut rng);
    let planner = samples(90.0, 0.3, 400, &mut rng);

    println!("W1(router, writer)  = {:.2} s", wasserstein_1d(&router, &writer)?);
    println!("W1(writer, planner) = {:.2} s", wasserstein_1d(&writer, &planner)?);

    let agents = [
        (AgentId::named("Router"), router.as_slice()),
        (AgentId::named("Writer"), writer.as_slice()),
        (AgentId::named("Planner"), planner.as_slice()),
    ];
    let matrix = DistanceMatrix::from_samples(&agents)?;
    let table = mds_embed_1d(&matrix, 1)?;
    println!("\n{:<8} {:>10} {:>10} {:>5}", "agent", "coord", "anchor", "rank");
    for row in table.rows() {
        println!("{:<8} {:>10.2} {:>10.2} {:>5}", row.agent, row.coordinate, row.anchor_distance, row.rank);
    }
    println!("\nunknown agents are placed at the median distance: {:.2}", table.class_of(&AgentId::named("New")));
    Ok(())
}
