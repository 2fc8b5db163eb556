//! Doubling-checkpoint convergence and the mode estimate.
//!
//! Samples are drawn from a right-skewed execution-time distribution; the
//! profiler reports the W1 distance between successive checkpoint snapshots
//! and flags convergence once it drops below 5% of the mean.

use agentflow::profiler::{ConvergenceConfig, EmpiricalDistribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

fn main() -> agentflow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = LogNormal::new(20f64.ln(), 0.4).unwrap();
    let mut dist = EmpiricalDistribution::new(ConvergenceConfig::default());
    let mut checkpoint = 16;
    for i in 1..=2048 {
        let newly = dist.insert(gen.sample(&mut rng))?;
        if i == checkpoint {
            println!(
                "n={:<5} W1 to previous snapshot = {:>7}  mean = {:.2}{}",
                i,
                dist.last_distance().map_or("-".into(), |d| format!("{d:.3}")),
                dist.mean().unwrap(),
                if dist.is_converged() { "  converged" } else { "" }
            );
            checkpoint *= 2;
        }
        if newly {
            println!("  converged at sample {i}");
        }
    }
    let mode = dist.mode_estimate()?;
    println!("median {:.2}, mode {:.2}", dist.quantile(0.5).unwrap(), mode.value);
    println!("conditional median beyond 30 s: {:.2}", dist.conditional_quantile(30.0, 0.5).unwrap());
    Ok(())
}
