//! Memory-aware placement over 0.5 s time slots.
//!
//! Requests are described by their prompt size, decode rate and expected
//! duration. Each instance keeps a ledger of expected memory per future slot;
//! a new request goes to the instance whose peak stays lowest, and to none if
//! every instance would exceed its capacity.

use agentflow::dispatch::{select_instance, MemoryModel, Placement, SlotLedger, DEFAULT_SLOT_LEN};
use agentflow::model::InstanceId;

fn main() -> agentflow::Result<()> {
    let mut ledgers: Vec<SlotLedger> = (0..2)
        .map(|i| SlotLedger::new(InstanceId(i), 1000.0, DEFAULT_SLOT_LEN))
        .collect();

    let requests = [
        (1, MemoryModel::new(200.0, 40.0, 0.0, 10.0)),
        (2, MemoryModel::new(300.0, 40.0, 0.0, 5.0)),
        (3, MemoryModel::new(100.0, 40.0, 0.0, 8.0)),
        (4, MemoryModel::new(400.0, 40.0, 0.0, 4.0)),
    ];
    for (id, model) in requests {
        let d = select_instance(&ledgers, &model, id, |_| true);
        match d.target {
            Some(t) => {
                println!("request {id}: peak {:.0} -> {t} (predicted peak {:.0})", model.peak(), d.predicted_peak.unwrap());
                ledgers[t.0].commit(id, model)?;
            }
            None => println!("request {id}: peak {:.0} fits nowhere, stays queued", model.peak()),
        }
    }

    let l = &ledgers[0];
    match l.try_place(&MemoryModel::new(500.0, 40.0, 0.0, 2.0)) {
        Placement::Fits { predicted_peak } => println!("500-token request would fit on i0 at {predicted_peak:.0}"),
        Placement::Exceeds { slot } => println!("500-token request would overflow i0 in slot {slot}"),
    }

    // Request 1 finishes at t = 3 s instead of 10 s.
    ledgers[0].correct_early_finish(1, 3.0)?;
    println!("\ni0 expected usage after early finish of request 1:");
    for (slot, usage) in ledgers[0].future_usage().take(12) {
        println!("  slot {slot:>2}: {usage:>6.0}");
    }
    Ok(())
}
