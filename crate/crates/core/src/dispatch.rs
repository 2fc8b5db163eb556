//! Memory-aware time-slot dispatching.
//!
//! A request's KV-cache footprint is modelled as a linear ramp: `P` prompt
//! tokens at admission, growing by `k` tokens per second until the expected
//! end `t_start + T`. Each instance keeps a ledger of the summed expected
//! usage over fixed-length future slots; a request is placed on the
//! instance with the lowest resulting peak among those where no slot would
//! exceed capacity.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::model::InstanceId;

pub const DEFAULT_SLOT_LEN: f64 = 0.5;
pub const DEFAULT_RESUME_WATERMARK: f64 = 0.85;
const SLOT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryModel {
    /// Prompt (prefill) memory, tokens.
    pub prompt: f64,
    /// Decode rate, tokens per second.
    pub decode_rate: f64,
    pub t_start: f64,
    /// Expected execution time, seconds.
    pub expected: f64,
}

impl MemoryModel {
    pub fn new(prompt: f64, decode_rate: f64, t_start: f64, expected: f64) -> Self {
        Self {
            prompt,
            decode_rate,
            t_start,
            expected,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.expected
    }

    /// `P + k * (t - t_start)` strictly inside `(t_start, t_start + T)`, zero elsewhere.
    pub fn memory_at(&self, t: f64) -> f64 {
        if t > self.t_start && t < self.t_end() {
            self.prompt + self.decode_rate * (t - self.t_start)
        } else {
            0.0
        }
    }

    /// Supremum of the ramp over `(t_start, min(t, t_end))`, i.e. the value
    /// approached from the left. Used for end-of-slot evaluation.
    pub fn memory_before(&self, t: f64) -> f64 {
        if t <= self.t_start {
            return 0.0;
        }
        let until = t.min(self.t_end());
        self.prompt + self.decode_rate * (until - self.t_start)
    }

    pub fn peak(&self) -> f64 {
        self.prompt + self.decode_rate * self.expected
    }
}

pub fn slot_of(t: f64, slot_len: f64) -> i64 {
    (t / slot_len + SLOT_EPS).floor() as i64
}

/// Slots `[s*len, (s+1)*len)` that intersect the open interval `(t_start, t_start + T)`.
pub fn span_slots(model: &MemoryModel, slot_len: f64) -> std::ops::RangeInclusive<i64> {
    assert!(slot_len > 0.0, "slot length must be positive");
    let first = slot_of(model.t_start, slot_len);
    let last = ((model.t_end() / slot_len - SLOT_EPS).ceil() as i64 - 1).max(first);
    first..=last
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Placement {
    Fits { predicted_peak: f64 },
    Exceeds { slot: i64 },
}

#[derive(Clone, Debug, PartialEq)]
struct Assignment {
    model: MemoryModel,
    contributions: Vec<(i64, f64)>,
}

/// Expected memory usage of one instance over discretized future time.
#[derive(Clone, Debug)]
pub struct SlotLedger {
    instance: InstanceId,
    slot_len: f64,
    capacity: f64,
    base: i64,
    usage: VecDeque<f64>,
    assigned: BTreeMap<u64, Assignment>,
}

impl SlotLedger {
    pub fn new(instance: InstanceId, capacity: f64, slot_len: f64) -> Self {
        assert!(slot_len > 0.0 && capacity > 0.0);
        Self {
            instance,
            slot_len,
            capacity,
            base: 0,
            usage: VecDeque::new(),
            assigned: BTreeMap::new(),
        }
    }

    pub fn instance(&self) -> InstanceId {
        self.instance
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn slot_len(&self) -> f64 {
        self.slot_len
    }

    pub fn current_slot(&self) -> i64 {
        self.base
    }

    pub fn usage(&self, slot: i64) -> f64 {
        if slot < self.base {
            return 0.0;
        }
        self.usage
            .get((slot - self.base) as usize)
            .copied()
            .unwrap_or(0.0)
    }

    /// Usage of every tracked slot from the current one on.
    pub fn future_usage(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.usage
            .iter()
            .enumerate()
            .map(move |(i, &u)| (self.base + i as i64, u))
    }

    pub fn assigned_len(&self) -> usize {
        self.assigned.len()
    }

    pub fn is_assigned(&self, id: u64) -> bool {
        self.assigned.contains_key(&id)
    }

    /// Drops slots that ended before `now`.
    pub fn advance(&mut self, now: f64) {
        let current = slot_of(now, self.slot_len);
        while self.base < current {
            self.usage.pop_front();
            self.base += 1;
        }
        let base = self.base;
        for a in self.assigned.values_mut() {
            a.contributions.retain(|(s, _)| *s >= base);
        }
    }

    /// Per-slot contributions, each evaluated at the slot end clipped to the
    /// request's window.
    pub fn contributions(&self, model: &MemoryModel) -> Vec<(i64, f64)> {
        span_slots(model, self.slot_len)
            .filter(|s| *s >= self.base)
            .map(|s| {
                let slot_end = (s + 1) as f64 * self.slot_len;
                (s, model.memory_before(slot_end))
            })
            .collect()
    }

    pub fn try_place(&self, model: &MemoryModel) -> Placement {
        let contrib = self.contributions(model);
        let mut peak = self.usage.iter().cloned().fold(0.0, f64::max);
        for &(s, c) in &contrib {
            let candidate = self.usage(s) + c;
            if candidate > self.capacity + SLOT_EPS {
                return Placement::Exceeds { slot: s };
            }
            peak = peak.max(candidate);
        }
        Placement::Fits {
            predicted_peak: peak,
        }
    }

    pub fn commit(&mut self, id: u64, model: MemoryModel) -> Result<()> {
        if let Placement::Exceeds { slot } = self.try_place(&model) {
            return Err(Error::CommitExceeds { slot });
        }
        self.commit_unchecked(id, model);
        Ok(())
    }

    /// Records the request regardless of capacity. The simulator uses this
    /// when a request is admitted by a policy other than the ledger.
    pub fn commit_unchecked(&mut self, id: u64, model: MemoryModel) {
        let contributions = self.contributions(&model);
        for &(s, c) in &contributions {
            let idx = (s - self.base) as usize;
            if self.usage.len() <= idx {
                self.usage.resize(idx + 1, 0.0);
            }
            self.usage[idx] += c;
        }
        self.assigned.insert(
            id,
            Assignment {
                model,
                contributions,
            },
        );
    }

    /// Removes the request's contributions from every slot after the one
    /// containing `actual_end`.
    pub fn correct_early_finish(&mut self, id: u64, actual_end: f64) -> Result<()> {
        let cutoff = slot_of(actual_end, self.slot_len);
        let a = self
            .assigned
            .get_mut(&id)
            .ok_or(Error::UnknownRequest(id))?;
        let base = self.base;
        let usage = &mut self.usage;
        a.contributions.retain(|&(s, c)| {
            if s > cutoff {
                if s >= base {
                    let u = &mut usage[(s - base) as usize];
                    *u = (*u - c).max(0.0);
                }
                false
            } else {
                true
            }
        });
        Ok(())
    }

    /// Completion: future contributions are removed and the request forgotten.
    pub fn finish(&mut self, id: u64, now: f64) -> Result<()> {
        self.correct_early_finish(id, now)?;
        self.assigned.remove(&id);
        Ok(())
    }

    pub fn model(&self, id: u64) -> Option<&MemoryModel> {
        self.assigned.get(&id).map(|a| &a.model)
    }

    /// Trims trailing empty slots.
    pub fn compact(&mut self) {
        while self.usage.back().is_some_and(|u| *u <= 0.0) {
            self.usage.pop_back();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DispatchDecision {
    pub request_id: u64,
    pub target: Option<InstanceId>,
    pub predicted_peak: Option<f64>,
    pub candidates: Vec<(InstanceId, Placement)>,
}

/// Evaluates every ledger and picks the lowest predicted peak; ties go to
/// the lowest instance id. `eligible` can exclude instances (suspended, batch
/// full) without evaluating them.
pub fn select_instance<'a>(
    ledgers: impl IntoIterator<Item = &'a SlotLedger>,
    model: &MemoryModel,
    request_id: u64,
    eligible: impl Fn(InstanceId) -> bool,
) -> DispatchDecision {
    select_instance_by(ledgers, request_id, |l| eligible(l.instance()).then_some(*model))
}

/// Like [`select_instance`], with a per-ledger model (instances may differ in
/// decode speed). `None` skips the ledger.
pub fn select_instance_by<'a>(
    ledgers: impl IntoIterator<Item = &'a SlotLedger>,
    request_id: u64,
    model_for: impl Fn(&SlotLedger) -> Option<MemoryModel>,
) -> DispatchDecision {
    let mut candidates = Vec::new();
    let mut best: Option<(InstanceId, f64)> = None;
    for ledger in ledgers {
        let id = ledger.instance();
        let Some(model) = model_for(ledger) else {
            continue;
        };
        let placement = ledger.try_place(&model);
        if let Placement::Fits { predicted_peak } = placement {
            let better = match best {
                None => true,
                Some((bid, bpeak)) => predicted_peak < bpeak || (predicted_peak == bpeak && id < bid),
            };
            if better {
                best = Some((id, predicted_peak));
            }
        }
        candidates.push((id, placement));
    }
    DispatchDecision {
        request_id,
        target: best.map(|b| b.0),
        predicted_peak: best.map(|b| b.1),
        candidates,
    }
}

/// Ledgers for a set of instances plus overload suspension.
#[derive(Clone, Debug)]
pub struct TimeSlotDispatcher {
    ledgers: Vec<SlotLedger>,
    suspended: BTreeSet<InstanceId>,
    resume_watermark: f64,
}

impl TimeSlotDispatcher {
    pub fn new(capacities: &[f64], slot_len: f64, resume_watermark: f64) -> Self {
        let ledgers = capacities
            .iter()
            .enumerate()
            .map(|(i, &c)| SlotLedger::new(InstanceId(i), c, slot_len))
            .collect();
        Self {
            ledgers,
            suspended: BTreeSet::new(),
            resume_watermark,
        }
    }

    pub fn ledgers(&self) -> &[SlotLedger] {
        &self.ledgers
    }

    pub fn ledger_mut(&mut self, id: InstanceId) -> &mut SlotLedger {
        &mut self.ledgers[id.0]
    }

    pub fn advance(&mut self, now: f64) {
        for l in &mut self.ledgers {
            l.advance(now);
        }
    }

    pub fn select(
        &self,
        model: &MemoryModel,
        request_id: u64,
        eligible: impl Fn(InstanceId) -> bool,
    ) -> DispatchDecision {
        select_instance(&self.ledgers, model, request_id, |id| {
            !self.suspended.contains(&id) && eligible(id)
        })
    }

    pub fn select_by(
        &self,
        request_id: u64,
        model_for: impl Fn(&SlotLedger) -> Option<MemoryModel>,
    ) -> DispatchDecision {
        select_instance_by(&self.ledgers, request_id, |l| {
            if self.suspended.contains(&l.instance()) {
                None
            } else {
                model_for(l)
            }
        })
    }

    pub fn suspended(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.suspended.iter().copied()
    }

    pub fn commit(&mut self, instance: InstanceId, id: u64, model: MemoryModel) -> Result<()> {
        self.ledgers[instance.0].commit(id, model)
    }

    /// Actual memory exhaustion on `instance`: stop dispatching to it.
    pub fn on_overload(&mut self, instance: InstanceId) {
        self.suspended.insert(instance);
    }

    pub fn is_suspended(&self, instance: InstanceId) -> bool {
        self.suspended.contains(&instance)
    }

    /// Resumes a suspended instance once live usage drops below the
    /// watermark. Returns true on resume.
    pub fn observe_live_usage(&mut self, instance: InstanceId, live: f64) -> bool {
        let cap = self.ledgers[instance.0].capacity();
        if self.suspended.contains(&instance) && live < self.resume_watermark * cap {
            self.suspended.remove(&instance);
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(cap: f64) -> SlotLedger {
        SlotLedger::new(InstanceId(0), cap, DEFAULT_SLOT_LEN)
    }

    #[test]
    fn memory_at_examples() {
        let m = MemoryModel::new(100.0, 10.0, 0.0, 5.0);
        assert_eq!(m.memory_at(2.5), 125.0);
        assert_eq!(m.memory_at(6.0), 0.0);
        assert_eq!(m.memory_at(0.0), 0.0);
        assert_eq!(m.memory_at(5.0), 0.0);
    }

    #[test]
    fn span_slot_examples() {
        let slots = |s, t| {
            span_slots(&MemoryModel::new(1.0, 1.0, s, t), 0.5)
                .collect::<Vec<_>>()
        };
        assert_eq!(slots(0.0, 1.2), vec![0, 1, 2]);
        assert_eq!(slots(0.1, 0.4), vec![0]);
        assert_eq!(slots(1.0, 0.5), vec![2]);
    }

    #[test]
    fn empty_ledger_fits_at_peak() {
        let l = ledger(1000.0);
        // P=100, k=10, T=5 from t=0: peak 150
        let m = MemoryModel::new(100.0, 10.0, 0.0, 5.0);
        assert_eq!(
            l.try_place(&m),
            Placement::Fits {
                predicted_peak: 150.0
            }
        );
    }

    #[test]
    fn full_slot_exceeds() {
        let mut l = ledger(1000.0);
        // occupies slot 3 = [1.5, 2.0) with 900
        l.commit(1, MemoryModel::new(900.0, 0.0, 1.5, 0.5)).unwrap();
        assert_eq!(l.usage(3), 900.0);
        let m = MemoryModel::new(150.0, 0.0, 1.5, 0.5);
        assert_eq!(l.try_place(&m), Placement::Exceeds { slot: 3 });
        assert!(matches!(l.commit(2, m), Err(Error::CommitExceeds { slot: 3 })));
    }

    #[test]
    fn sequential_placements_add_slotwise() {
        let mut l = ledger(1000.0);
        let m = MemoryModel::new(400.0, 0.0, 0.0, 2.0);
        l.commit(1, m).unwrap();
        assert_eq!(
            l.try_place(&m),
            Placement::Fits {
                predicted_peak: 800.0
            }
        );
    }

    #[test]
    fn early_finish_removes_later_slots() {
        let mut l = ledger(10_000.0);
        // predicted to run through slot 8 = [4.0, 4.5)
        let m = MemoryModel::new(100.0, 10.0, 0.0, 4.5);
        l.commit(7, m).unwrap();
        let before: Vec<f64> = (0..=8).map(|s| l.usage(s)).collect();
        l.correct_early_finish(7, 2.7).unwrap(); // slot 5
        for s in 0..=5 {
            assert_eq!(l.usage(s), before[s as usize]);
        }
        for s in 6..=8 {
            assert_eq!(l.usage(s), 0.0);
        }
        assert!(matches!(
            l.correct_early_finish(99, 1.0),
            Err(Error::UnknownRequest(99))
        ));
    }

    #[test]
    fn finishing_on_prediction_is_noop() {
        let mut l = ledger(10_000.0);
        let m = MemoryModel::new(100.0, 10.0, 0.0, 4.5);
        l.commit(1, m).unwrap();
        let before: Vec<f64> = (0..=8).map(|s| l.usage(s)).collect();
        l.correct_early_finish(1, 4.4).unwrap();
        let after: Vec<f64> = (0..=8).map(|s| l.usage(s)).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn overlapping_early_finish_leaves_single_ledger() {
        let a = MemoryModel::new(100.0, 10.0, 0.0, 4.0);
        let b = MemoryModel::new(50.0, 5.0, 0.0, 6.0);
        let mut both = ledger(10_000.0);
        both.commit(1, a).unwrap();
        both.commit(2, b).unwrap();
        both.correct_early_finish(1, 0.2).unwrap();
        let mut only_b = ledger(10_000.0);
        only_b.commit(2, b).unwrap();
        for s in 1..12 {
            assert!((both.usage(s) - only_b.usage(s)).abs() < 1e-9, "slot {s}");
        }
    }

    #[test]
    fn two_commits_then_correction_restores_second_only() {
        let first = MemoryModel::new(200.0, 10.0, 0.0, 3.0);
        let second = MemoryModel::new(300.0, 20.0, 0.0, 3.0);
        let mut l = ledger(10_000.0);
        l.commit(1, first).unwrap();
        l.commit(2, second).unwrap();
        l.correct_early_finish(1, -0.5).unwrap();
        let mut reference = ledger(10_000.0);
        reference.commit(2, second).unwrap();
        for s in 0..6 {
            assert!((l.usage(s) - reference.usage(s)).abs() < 1e-9);
        }
    }

    #[test]
    fn elapsed_slots_are_collected() {
        let mut l = ledger(1000.0);
        l.commit(1, MemoryModel::new(10.0, 1.0, 0.0, 1.0)).unwrap();
        l.advance(5.0);
        assert_eq!(l.future_usage().count(), 0);
        assert_eq!(l.current_slot(), 10);
    }

    fn with_usage(id: usize, peak: f64) -> SlotLedger {
        let mut l = SlotLedger::new(InstanceId(id), 1000.0, 0.5);
        if peak > 0.0 {
            l.commit(0, MemoryModel::new(peak, 0.0, 0.0, 10.0)).unwrap();
        }
        l
    }

    #[test]
    fn selects_lowest_peak_then_lowest_id() {
        let m = MemoryModel::new(100.0, 0.0, 0.0, 1.0);
        let ledgers = [with_usage(0, 700.0), with_usage(1, 500.0)];
        let d = select_instance(&ledgers, &m, 1, |_| true);
        assert_eq!(d.target, Some(InstanceId(1)));
        assert_eq!(d.predicted_peak, Some(600.0));

        let ledgers = [with_usage(0, 500.0), with_usage(1, 500.0)];
        let d = select_instance(&ledgers, &m, 1, |_| true);
        assert_eq!(d.target, Some(InstanceId(0)));
    }

    #[test]
    fn no_fit_means_no_target() {
        let m = MemoryModel::new(400.0, 0.0, 0.0, 1.0);
        let ledgers = [with_usage(0, 700.0), with_usage(1, 900.0)];
        let d = select_instance(&ledgers, &m, 1, |_| true);
        assert_eq!(d.target, None);
        assert_eq!(d.candidates.len(), 2);
    }

    #[test]
    fn overload_suspends_until_watermark() {
        let mut d = TimeSlotDispatcher::new(&[1000.0, 1000.0], 0.5, 0.85);
        let m = MemoryModel::new(10.0, 0.0, 0.0, 1.0);
        d.on_overload(InstanceId(0));
        assert_eq!(d.select(&m, 1, |_| true).target, Some(InstanceId(1)));
        assert!(!d.observe_live_usage(InstanceId(0), 900.0));
        assert!(d.is_suspended(InstanceId(0)));
        assert!(d.observe_live_usage(InstanceId(0), 800.0));
        assert_eq!(d.select(&m, 1, |_| true).target, Some(InstanceId(0)));
    }

    #[test]
    fn all_suspended_means_global_wait() {
        let mut d = TimeSlotDispatcher::new(&[1000.0, 1000.0], 0.5, 0.85);
        d.on_overload(InstanceId(0));
        d.on_overload(InstanceId(1));
        let m = MemoryModel::new(10.0, 0.0, 0.0, 1.0);
        assert_eq!(d.select(&m, 1, |_| true).target, None);
        d.observe_live_usage(InstanceId(1), 0.0);
        assert_eq!(d.select(&m, 1, |_| true).target, Some(InstanceId(1)));
    }
}
