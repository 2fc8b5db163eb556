//! Arrival processes: seeded Poisson and replayed timestamp files.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

/// Poisson arrivals with `rate` per second on `[0, duration)`.
pub fn poisson_arrivals<R: Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Config(format!("arrival rate must be positive, got {rate}")));
    }
    let gap = Exp::new(rate).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    let mut t = gap.sample(rng);
    while t < duration {
        out.push(t);
        t += gap.sample(rng);
    }
    Ok(out)
}

/// Parses one timestamp per line. Blank lines and `#` comments are skipped,
/// only the first comma-separated field is read, and a non-numeric first
/// line is taken as a header.
pub fn parse_timestamps(text: &str) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let field = line.split(',').next().unwrap_or("").trim();
        let t: f64 = match field.parse() {
            Ok(t) => t,
            Err(_) if out.is_empty() && i == 0 => continue,
            Err(_) => {
                return Err(Error::Trace {
                    line: i + 1,
                    message: format!("not a timestamp: {field:?}"),
                })
            }
        };
        if !t.is_finite() {
            return Err(Error::Trace {
                line: i + 1,
                message: "timestamp is not finite".into(),
            });
        }
        if let Some(&prev) = out.last() {
            if t < prev {
                return Err(Error::Trace {
                    line: i + 1,
                    message: format!("timestamp {t} goes back from {prev}"),
                });
            }
        }
        out.push(t);
    }
    Ok(out)
}

/// Shifts the first timestamp to zero and multiplies every gap by `scale`.
pub fn scale_arrivals(timestamps: &[f64], scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
    }
    let Some(&first) = timestamps.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(timestamps.len());
    let mut t = 0.0;
    let mut prev = first;
    for &ts in timestamps {
        if ts < prev {
            return Err(Error::InvalidInput("timestamps are not monotone".into()));
        }
        t += (ts - prev) * scale;
        prev = ts;
        out.push(t);
    }
    Ok(out)
}

pub fn ingest_arrival_trace(path: &Path, scale: f64) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    scale_arrivals(&parse_timestamps(&text)?, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scaling_examples() {
        let ts = [10.0, 11.0, 13.0, 16.0];
        assert_eq!(scale_arrivals(&ts, 0.5).unwrap(), vec![0.0, 0.5, 1.5, 3.0]);
        assert_eq!(scale_arrivals(&ts, 1.0).unwrap(), vec![0.0, 1.0, 3.0, 6.0]);
    }

    #[test]
    fn non_monotone_file_is_rejected() {
        let err = parse_timestamps("0\n2\n1\n").unwrap_err();
        assert!(matches!(err, Error::Trace { line: 3, .. }));
    }

    #[test]
    fn header_and_comments_are_skipped() {
        let ts = parse_timestamps("timestamp,len\n# x\n1.5,20\n\n2.5,30\n").unwrap();
        assert_eq!(ts, vec![1.5, 2.5]);
        assert!(parse_timestamps("1\nabc\n").is_err());
    }

    #[test]
    fn poisson_rate_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = poisson_arrivals(2.0, 5000.0, &mut rng).unwrap();
        let rate = a.len() as f64 / 5000.0;
        assert!((rate - 2.0).abs() < 0.1, "{rate}");
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(poisson_arrivals(0.0, 1.0, &mut rng).is_err());
    }
}
