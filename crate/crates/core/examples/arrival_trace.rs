//! Arrival times from a timestamp file, compressed to a higher rate.
//!
//! Only the first CSV column is read; a header line and `#` comments are
//! skipped. Gaps are multiplied by the scale and the first arrival moves to 0.

use agentflow::workload::{ingest_arrival_trace, parse_timestamps, scale_arrivals};

fn main() -> agentflow::Result<()> {
    let text = "timestamp,tokens\n# captured on a test cluster\n100.0,12\n101.0,40\n103.0,8\n106.0,31\n";
    let raw = parse_timestamps(text)?;
    println!("raw      {raw:?}");
    println!("scale 1  {:?}", scale_arrivals(&raw, 1.0)?);
    println!("scale .5 {:?}", scale_arrivals(&raw, 0.5)?);

    let dir = tempfile::tempdir().map_err(|e| agentflow::Error::io("tempdir", e))?;
    let path = dir.path().join("arrivals.csv");
    std::fs::write(&path, text).map_err(|e| agentflow::Error::io(&path, e))?;
    println!("from file, scale 2: {:?}", ingest_arrival_trace(&path, 2.0)?);

    match parse_timestamps("5\n3\n") {
        Err(e) => println!("non-monotone input rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
