//! Property tests with independent oracles for the numeric kernels.

use agentflow::dispatch::{span_slots, MemoryModel, Placement, SlotLedger};
use agentflow::model::{AgentId, InstanceId};
use agentflow::priority::{mds_coordinates, mds_embed_1d, DistanceMatrix, Label};
use agentflow::profiler::wasserstein_1d;
use agentflow::workflow::{classify_fanout, Span};
use proptest::prelude::*;

mod common;
use common::{overlap_oracle, w1_oracle};

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    // Rounded values make ties and repeated points common.
    prop::collection::vec(prop_oneof![-1000.0..1000.0f64, (-20i32..20).prop_map(f64::from)], 1..=64)
        .prop_map(sorted)
}

fn close(x: f64, y: f64, scale: f64) -> bool {
    (x - y).abs() <= 1e-9 * scale.max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn w1_matches_quantile_grid_oracle(a in samples(), b in samples()) {
        let got = wasserstein_1d(&a, &b).unwrap();
        let want = w1_oracle(&a, &b);
        prop_assert!(close(got, want, want), "{got} vs {want}");
    }

    #[test]
    fn w1_metric_axioms(a in samples(), b in samples(), c in samples()) {
        let ab = wasserstein_1d(&a, &b).unwrap();
        let ba = wasserstein_1d(&b, &a).unwrap();
        let ac = wasserstein_1d(&a, &c).unwrap();
        let cb = wasserstein_1d(&c, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!(close(ab, ba, ab));
        prop_assert!(ab <= ac + cb + 1e-9 * (ac + cb).max(1.0));
        prop_assert_eq!(wasserstein_1d(&a, &a).unwrap(), 0.0);
        // The same multiset at a different sample count is the same distribution.
        let doubled = sorted(a.iter().chain(&a).copied().collect());
        prop_assert!(wasserstein_1d(&a, &doubled).unwrap() <= 1e-9);
        if ab == 0.0 {
            prop_assert_eq!(w1_oracle(&a, &b), 0.0);
        }
    }

    #[test]
    fn w1_translation(a in samples(), shift in -500.0..500.0f64) {
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let got = wasserstein_1d(&a, &moved).unwrap();
        prop_assert!((got - shift.abs()).abs() <= 1e-9 * 1000.0, "{got} vs {shift}");
    }
}

fn agents(n: usize) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n)
        .map(|i| Label::Agent(AgentId::named(&format!("a{i:02}"))))
        .collect();
    labels.push(Label::Anchor);
    labels
}

fn line_matrix(points: &[f64]) -> DistanceMatrix {
    let d = points
        .iter()
        .map(|x| points.iter().map(|y| (x - y).abs()).collect())
        .collect();
    DistanceMatrix::from_parts(agents(points.len() - 1), d).unwrap()
}

/// Points on a line with gaps bounded away from zero, in shuffled order; the
/// last one plays the anchor.
fn collinear() -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(0.1..100.0f64, 1..16), -50.0..50.0f64)
        .prop_flat_map(|(gaps, origin)| {
            let mut x = origin;
            let mut pts = vec![x];
            for g in gaps {
                x += g;
                pts.push(x);
            }
            Just(pts).prop_shuffle()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mds_reproduces_collinear_distances(points in collinear()) {
        let m = line_matrix(&points);
        let c = mds_coordinates(&m);
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d = m.get(i, j);
                let got = (c[i] - c[j]).abs();
                prop_assert!((got - d).abs() <= 1e-6 * d, "pair ({i},{j}): {got} vs {d}");
            }
        }
    }

    #[test]
    fn priority_order_survives_reflection(points in collinear()) {
        let table = mds_embed_1d(&line_matrix(&points), 1).unwrap();
        let order: Vec<String> = table.rows().into_iter().map(|r| r.agent).collect();
        let flipped_anchor = -table.anchor_coordinate();
        let mut flipped: Vec<(String, f64)> = table
            .rows()
            .into_iter()
            .map(|r| (r.agent, (-r.coordinate - flipped_anchor).abs()))
            .collect();
        flipped.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
        let flipped: Vec<String> = flipped.into_iter().map(|r| r.0).collect();
        prop_assert_eq!(&order, &flipped);
        let mirrored: Vec<f64> = points.iter().map(|x| -x).collect();
        let again: Vec<String> = mds_embed_1d(&line_matrix(&mirrored), 1)
            .unwrap()
            .rows()
            .into_iter()
            .map(|r| r.agent)
            .collect();
        prop_assert_eq!(order, again);
    }

    #[test]
    fn point_masses_rank_by_latency(lat in prop::collection::btree_set(1u32..100_000, 1..=16)) {
        let mut lat: Vec<f64> = lat.into_iter().map(|v| v as f64 / 10.0).collect();
        // Shuffle deterministically so names do not follow latency order.
        lat.reverse();
        let half = lat.len() / 2;
        lat.rotate_left(half);
        let names: Vec<AgentId> = (0..lat.len()).map(|i| AgentId::named(&format!("a{i:02}"))).collect();
        let sets: Vec<[f64; 1]> = lat.iter().map(|&v| [v]).collect();
        let input: Vec<(AgentId, &[f64])> = names.iter().cloned().zip(sets.iter().map(|s| &s[..])).collect();
        let table = mds_embed_1d(&DistanceMatrix::from_samples(&input).unwrap(), 1).unwrap();
        let got: Vec<String> = table.rows().into_iter().map(|r| r.agent).collect();
        let mut want: Vec<(f64, String)> = lat.iter().zip(&names).map(|(&l, a)| (l, a.to_string())).collect();
        want.sort_by(|x, y| x.0.total_cmp(&y.0));
        let want: Vec<String> = want.into_iter().map(|w| w.1).collect();
        prop_assert_eq!(got, want);
    }
}

fn span_sets() -> impl Strategy<Value = Vec<Span>> {
    // Half-second grid so touching endpoints and zero-length spans occur.
    let grid = (0u32..40, 0u32..10).prop_map(|(s, l)| (s as f64 * 0.5, (s + l) as f64 * 0.5));
    let free = (0.0..20.0f64, 0.0..5.0f64).prop_map(|(s, l)| (s, s + l));
    prop::collection::vec(prop_oneof![grid, free], 2..12).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (s, e))| Span::new(AgentId::named(&format!("d{i}")), s, e))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn sweep_line_matches_all_pairs(spans in span_sets()) {
        prop_assert_eq!(classify_fanout(&spans).unwrap(), overlap_oracle(&spans));
    }
}

fn model() -> impl Strategy<Value = MemoryModel> {
    (1.0..500.0f64, 1.0..50.0f64, 0.0..20.0f64, 0.1..30.0f64)
        .prop_map(|(p, k, t, d)| MemoryModel::new(p, k, t, d))
}

/// End-of-slot charge of one request, computed from Eq.-1 directly.
fn slot_charge(m: &MemoryModel, slot: i64, len: f64) -> f64 {
    let (lo, hi) = (slot as f64 * len, (slot + 1) as f64 * len);
    if lo < m.t_end() && hi > m.t_start {
        m.prompt + m.decode_rate * (hi.min(m.t_end()) - m.t_start)
    } else {
        0.0
    }
}

const SLOT: f64 = 0.5;
const HORIZON: i64 = 120;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ledger_superposition(models in prop::collection::vec(model(), 1..12), rot in 0usize..12) {
        let mut fwd = SlotLedger::new(InstanceId(0), 1e12, SLOT);
        let mut rev = SlotLedger::new(InstanceId(0), 1e12, SLOT);
        for (i, m) in models.iter().enumerate() {
            fwd.commit(i as u64, *m).unwrap();
        }
        let mut order: Vec<usize> = (0..models.len()).rev().collect();
        order.rotate_left(rot % models.len());
        for i in order {
            rev.commit(i as u64, models[i]).unwrap();
        }
        for s in 0..HORIZON {
            let want: f64 = models.iter().map(|m| slot_charge(m, s, SLOT)).sum();
            prop_assert!((fwd.usage(s) - want).abs() <= 1e-9 * want.max(1.0), "slot {s}");
            prop_assert!((rev.usage(s) - want).abs() <= 1e-9 * want.max(1.0), "slot {s}");
        }
    }

    #[test]
    fn early_finish_never_negative(
        models in prop::collection::vec(model(), 1..12),
        cuts in prop::collection::vec(0.0..1.0f64, 12),
    ) {
        let mut ledger = SlotLedger::new(InstanceId(0), 1e12, SLOT);
        for (i, m) in models.iter().enumerate() {
            ledger.commit(i as u64, *m).unwrap();
        }
        for (i, m) in models.iter().enumerate() {
            if cuts[i] < 0.5 {
                ledger.correct_early_finish(i as u64, m.t_start + cuts[i] * 2.0 * m.expected).unwrap();
            }
        }
        for s in 0..HORIZON {
            prop_assert!(ledger.usage(s) >= 0.0);
        }
    }

    #[test]
    fn end_of_slot_bounds_the_ramp(m in model(), probe in 0.0..1.0f64) {
        let slots: Vec<i64> = span_slots(&m, SLOT).collect();
        let t = m.t_start + probe * m.expected;
        if t > m.t_start && t < m.t_end() {
            let s = (t / SLOT).floor() as i64;
            prop_assert!(slots.contains(&s));
            prop_assert!(slot_charge(&m, s, SLOT) + 1e-9 >= m.memory_at(t));
        }
    }

    #[test]
    fn placement_is_conservative(models in prop::collection::vec(model(), 1..10), cap in 500.0..4000.0f64) {
        let mut ledger = SlotLedger::new(InstanceId(0), cap, SLOT);
        let mut placed = Vec::new();
        for (i, m) in models.iter().enumerate() {
            if let Placement::Fits { .. } = ledger.try_place(m) {
                ledger.commit(i as u64, *m).unwrap();
                placed.push(*m);
            }
        }
        // Dense probe of true Eq.-1 usage never exceeds capacity.
        for step in 0..2000 {
            let t = step as f64 * 0.025 + 1e-4;
            let live: f64 = placed.iter().map(|m| m.memory_at(t)).sum();
            prop_assert!(live <= cap + 1e-6, "t={t}: {live} > {cap}");
        }
    }
}

#[test]
fn memory_model_examples() {
    let m = MemoryModel::new(100.0, 10.0, 0.0, 5.0);
    assert_eq!(m.memory_at(2.5), 125.0);
    assert_eq!(m.memory_at(6.0), 0.0);
    assert_eq!(m.memory_at(0.0), 0.0);
    let slots = |t_start, t| span_slots(&MemoryModel::new(1.0, 1.0, t_start, t), 0.5).collect::<Vec<_>>();
    assert_eq!(slots(0.0, 1.2), vec![0, 1, 2]);
    assert_eq!(slots(0.1, 0.4), vec![0]);
    assert_eq!(slots(1.0, 0.5), vec![2]);
}

#[test]
fn two_commits_then_early_finish_leaves_second_only() {
    let a = MemoryModel::new(100.0, 10.0, 0.0, 4.0);
    let b = MemoryModel::new(50.0, 20.0, 0.7, 3.0);
    let mut both = SlotLedger::new(InstanceId(0), 1e6, SLOT);
    both.commit(1, a).unwrap();
    both.commit(2, b).unwrap();
    both.correct_early_finish(1, 0.2).unwrap();
    let mut only = SlotLedger::new(InstanceId(0), 1e6, SLOT);
    only.commit(2, b).unwrap();
    // Request 1 keeps only its charge in the slot holding the finish time.
    for s in 1..20 {
        assert!((both.usage(s) - only.usage(s)).abs() < 1e-9, "slot {s}");
    }
    assert!((both.usage(0) - only.usage(0) - slot_charge(&a, 0, SLOT)).abs() < 1e-9);

    let mut l = SlotLedger::new(InstanceId(0), 1e6, SLOT);
    l.commit(1, a).unwrap();
    l.advance(10.0);
    l.compact();
    assert_eq!(l.future_usage().count(), 0);
}

#[test]
fn overloaded_instance_leaves_candidate_set() {
    use agentflow::dispatch::TimeSlotDispatcher;
    let mut d = TimeSlotDispatcher::new(&[1000.0, 1000.0], SLOT, 0.85);
    d.on_overload(InstanceId(0));
    assert!(d.is_suspended(InstanceId(0)));
    d.observe_live_usage(InstanceId(0), 900.0);
    assert!(d.is_suspended(InstanceId(0)));
    d.observe_live_usage(InstanceId(0), 800.0);
    assert!(!d.is_suspended(InstanceId(0)));
}
