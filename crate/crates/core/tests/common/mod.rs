//! Oracles shared by the property tests and the acceptance run.

use agentflow::workflow::{FanoutKind, Span};

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// W1 as the integral of |Qa - Qb| over (0, 1), evaluated on the grid of
/// `lcm(n, m)` equal cells where both quantile functions are constant.
/// Inputs must be ascending.
pub fn w1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let l = n / gcd(n, m) * m;
    (0..l).map(|k| (a[k * n / l] - b[k * m / l]).abs()).sum::<f64>() / l as f64
}

/// All-pairs check: two spans overlap when they share more than 1e-9 s.
pub fn overlap_oracle(spans: &[Span]) -> FanoutKind {
    for i in 0..spans.len() {
        for j in (i + 1)..spans.len() {
            let (a, b) = (&spans[i], &spans[j]);
            if a.start.max(b.start) + 1e-9 < a.end.min(b.end) {
                return FanoutKind::Parallel;
            }
        }
    }
    FanoutKind::Sequential
}
