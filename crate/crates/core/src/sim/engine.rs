use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::dispatch::{MemoryModel, Placement, TimeSlotDispatcher};
use crate::error::{Error, Result};
use crate::model::{AgentId, InstanceId, MessageId, PendingRequest, RequestRecord};
use crate::priority::{fcfs_key, AgentPriority, OrderKey, PriorityTable, QueueOrder, ReadyQueue};
use crate::profiler::LatencyProfiler;
use crate::sim::config::{DispatcherKind, EngineConfig, InstanceProfile, PredictionMode, SchedulerKind};
use crate::workload::plan::WorkflowPlan;

/// Threshold overshoot (tokens) that triggers preemption. The KV model is
/// continuous; half a token stands for "the next token does not fit".
const OVERFLOW_SLACK: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestDone,
    PrefillDone,
    PreemptCheck,
    Arrival,
    DispatchRound,
}

#[derive(Clone, Copy, Debug)]
enum Payload {
    Done { inst: usize, req: usize, attempt: u32 },
    Prefill { inst: usize, req: usize, attempt: u32 },
    Check { inst: usize, epoch: u64 },
    Arrival { wf: usize },
    Dispatch { tick: bool },
}

impl Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::Done { .. } => EventKind::RequestDone,
            Payload::Prefill { .. } => EventKind::PrefillDone,
            Payload::Check { .. } => EventKind::PreemptCheck,
            Payload::Arrival { .. } => EventKind::Arrival,
            Payload::Dispatch { .. } => EventKind::DispatchRound,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    seq: u64,
    payload: Payload,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl Ord for SimEvent {
    // reversed: BinaryHeap pops the earliest event
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.kind.cmp(&self.kind))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ReqState {
    Queued,
    Local(usize),
    Running(usize),
    Done,
}

#[derive(Clone, Debug)]
struct Req {
    wf: usize,
    call: usize,
    agent: AgentId,
    upstream_agent: Option<AgentId>,
    prompt: u32,
    output: u32,
    created: f64,
    state: ReqState,
    attempt: u32,
    wait_since: f64,
    queue_time: f64,
    exec_start: f64,
    exec_end: f64,
    prefill_time: f64,
    decode_time: f64,
    kept: u32,
    preemptions: u32,
    wasted_tokens: f64,
    instance: usize,
    predicted_exec: Option<f64>,
}

#[derive(Clone, Debug)]
struct Running {
    req: usize,
    admitted: f64,
    decode_start: f64,
    end: f64,
    base: f64,
}

#[derive(Clone, Debug)]
struct Instance {
    profile: InstanceProfile,
    running: Vec<Running>,
    local: ReadyQueue,
    epoch: u64,
    preempted_total: u64,
}

impl Instance {
    fn kv_of(&self, r: &Running, t: f64) -> f64 {
        if t <= r.decode_start {
            r.base
        } else {
            r.base + self.profile.decode_rate * (t.min(r.end) - r.decode_start)
        }
    }

    fn live(&self, t: f64) -> f64 {
        self.running.iter().map(|r| self.kv_of(r, t)).sum()
    }

    fn decoding(&self, t: f64) -> usize {
        self.running
            .iter()
            .filter(|r| r.decode_start <= t && t < r.end)
            .count()
    }
}

struct WfState {
    done_calls: usize,
    records: Vec<RequestRecord>,
    /// Request id of each call once released.
    call_req: Vec<Option<usize>>,
    end: Option<f64>,
}

/// Ordering policy for queued requests.
enum Policy {
    Fcfs,
    Kairos(AgentPriority),
    Topo(BTreeMap<AgentId, usize>),
    /// True remaining execution per request id.
    Oracle(HashMap<u64, f64>),
}

impl QueueOrder for Policy {
    fn key(&self, r: &PendingRequest) -> OrderKey {
        match self {
            Policy::Fcfs => fcfs_key(r),
            Policy::Kairos(p) => p.key(r),
            Policy::Topo(depth) => OrderKey {
                class: depth.get(&r.agent).copied().unwrap_or(usize::MAX) as f64,
                app_start: r.app_start,
                ..fcfs_key(r)
            },
            Policy::Oracle(rem) => OrderKey {
                class: rem.get(&r.id).copied().unwrap_or(f64::INFINITY),
                ..fcfs_key(r)
            },
        }
    }

    fn version(&self) -> u64 {
        match self {
            Policy::Kairos(p) => p.version(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InstanceStatus {
    pub instance: InstanceId,
    pub live_kv: f64,
    pub running: usize,
    pub preempted_total: u64,
    pub waiting: usize,
    pub suspended: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StatusSnapshot {
    pub time: f64,
    pub instances: Vec<InstanceStatus>,
    pub global_waiting: usize,
}

/// Final state of one request.
#[derive(Clone, Debug, Serialize)]
pub struct RequestOutcome {
    pub id: u64,
    pub workflow: usize,
    pub call: usize,
    pub msg_id: MessageId,
    pub agent: AgentId,
    pub instance: usize,
    pub created: f64,
    pub exec_start: f64,
    pub exec_end: f64,
    pub queue_time: f64,
    pub prefill_time: f64,
    pub decode_time: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub preemptions: u32,
    pub wasted_tokens: f64,
    pub predicted_exec: Option<f64>,
}

impl RequestOutcome {
    pub fn e2e(&self) -> f64 {
        self.exec_end - self.created
    }

    pub fn engine_time(&self) -> f64 {
        self.prefill_time + self.decode_time
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WorkflowOutcome {
    pub index: usize,
    pub app: String,
    pub msg_id: MessageId,
    pub arrival: f64,
    pub end: f64,
    pub output_tokens: u64,
    pub requests: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecisionRow {
    pub time: f64,
    pub request: u64,
    pub agent: AgentId,
    pub target: Option<usize>,
    pub predicted_peak: Option<f64>,
    pub candidates: String,
}

#[derive(Clone, Debug, Default)]
pub struct Overhead {
    /// (queue length, seconds) per dispatch round.
    pub sort: Vec<(usize, f64)>,
    /// (instances evaluated, seconds) per placement decision.
    pub slot_eval: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub requests: Vec<RequestOutcome>,
    pub workflows: Vec<WorkflowOutcome>,
    pub records: Vec<RequestRecord>,
    pub preempted_total: u64,
    pub end_time: f64,
    pub priority_table: PriorityTable,
    /// Every table the run installed, oldest first.
    pub priority_history: Vec<PriorityTable>,
    pub profiler: LatencyProfiler,
    pub decisions: Vec<DecisionRow>,
    pub events: Vec<String>,
    pub overhead: Overhead,
    pub final_status: StatusSnapshot,
}

impl SimOutput {
    pub fn write_requests_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.requests)
    }

    pub fn write_decisions_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.decisions)
    }

    /// One JSON object per line.
    pub fn write_events<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            writeln!(out, "{e}").map_err(|e| Error::io("<events>", e))?;
        }
        Ok(())
    }

    /// Rows of every installed table, tagged by version.
    pub fn write_priority_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let rows: Vec<_> = self.priority_history.iter().flat_map(|t| t.rows()).collect();
        write_rows(out, &rows)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One simulated cluster serving a fixed list of workflow instances.
pub struct Simulation {
    now: f64,
    seq: u64,
    heap: BinaryHeap<SimEvent>,
    plans: Vec<WorkflowPlan>,
    oracle_rem: Vec<Vec<f64>>,
    wfs: Vec<WfState>,
    reqs: Vec<Req>,
    instances: Vec<Instance>,
    global: ReadyQueue,
    policy: Policy,
    scheduler: SchedulerKind,
    dispatcher: DispatcherKind,
    slots: Option<TimeSlotDispatcher>,
    engine: EngineConfig,
    profiler: LatencyProfiler,
    table: Arc<PriorityTable>,
    table_version: u64,
    tables: Vec<PriorityTable>,
    since_rebuild: usize,
    rr_next: usize,
    dispatch_pending: bool,
    tick_pending: bool,
    decisions: Vec<DecisionRow>,
    events: Vec<String>,
    overhead: Overhead,
}

impl Simulation {
    /// `depths` gives the remaining stage count per agent and is only read by
    /// the topology-depth scheduler.
    pub fn new(
        plans: Vec<WorkflowPlan>,
        profiles: &[InstanceProfile],
        scheduler: SchedulerKind,
        dispatcher: DispatcherKind,
        engine: EngineConfig,
        depths: BTreeMap<AgentId, usize>,
    ) -> Result<Self> {
        engine.validate()?;
        if profiles.is_empty() {
            return Err(crate::Error::Config("at least one instance is required".into()));
        }
        for (i, p) in profiles.iter().enumerate() {
            p.validate(InstanceId(i))?;
        }
        let reference = profiles[0];
        let oracle_rem = plans
            .iter()
            .map(|p| p.critical_path(|c| reference.exec_time(c.prompt_tokens, c.output_tokens)))
            .collect();
        let policy = match scheduler {
            SchedulerKind::Fcfs | SchedulerKind::KairosWoPriority => Policy::Fcfs,
            SchedulerKind::Kairos => Policy::Kairos(AgentPriority::new(Arc::new(PriorityTable::empty()))),
            SchedulerKind::TopoDepth => Policy::Topo(depths),
            SchedulerKind::Oracle => Policy::Oracle(HashMap::new()),
        };
        let slots = (dispatcher == DispatcherKind::TimeSlot).then(|| {
            let caps: Vec<f64> = profiles.iter().map(|p| p.capacity).collect();
            TimeSlotDispatcher::new(&caps, engine.slot_len, engine.resume_watermark)
        });
        let wfs = plans
            .iter()
            .map(|p| WfState {
                done_calls: 0,
                records: Vec::new(),
                call_req: vec![None; p.calls.len()],
                end: None,
            })
            .collect();
        let mut sim = Self {
            now: 0.0,
            seq: 0,
            heap: BinaryHeap::new(),
            oracle_rem,
            wfs,
            reqs: Vec::new(),
            instances: profiles
                .iter()
                .map(|&profile| Instance {
                    profile,
                    running: Vec::new(),
                    local: ReadyQueue::new(),
                    epoch: 0,
                    preempted_total: 0,
                })
                .collect(),
            global: ReadyQueue::new(),
            policy,
            scheduler,
            dispatcher,
            slots,
            profiler: LatencyProfiler::new(engine.convergence),
            engine,
            table: Arc::new(PriorityTable::empty()),
            table_version: 0,
            tables: Vec::new(),
            since_rebuild: 0,
            rr_next: 0,
            dispatch_pending: false,
            tick_pending: false,
            decisions: Vec::new(),
            events: Vec::new(),
            overhead: Overhead::default(),
            plans,
        };
        for wf in 0..sim.plans.len() {
            let t = sim.plans[wf].arrival;
            sim.push(t, Payload::Arrival { wf });
        }
        Ok(sim)
    }

    /// Starts from an already populated profiler, e.g. one carried over from
    /// an earlier run.
    pub fn with_history(mut self, profiler: LatencyProfiler) -> Self {
        self.profiler = profiler;
        self.rebuild_priorities();
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    fn push(&mut self, time: f64, payload: Payload) {
        self.seq += 1;
        self.heap.push(SimEvent {
            time,
            kind: payload.kind(),
            seq: self.seq,
            payload,
        });
    }

    fn request_dispatch(&mut self) {
        if !self.dispatch_pending {
            self.dispatch_pending = true;
            self.push(self.now, Payload::Dispatch { tick: false });
        }
    }

    fn pending(&self, id: usize) -> PendingRequest {
        let r = &self.reqs[id];
        PendingRequest {
            id: id as u64,
            msg_id: self.plans[r.wf].msg_id.clone(),
            agent: r.agent.clone(),
            prompt_tokens: r.prompt,
            app_start: self.plans[r.wf].arrival,
            queue_enter: r.created,
        }
    }

    /// Processes the earliest event. Returns false once nothing is left.
    pub fn step(&mut self) -> bool {
        let Some(ev) = self.heap.pop() else {
            return false;
        };
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        if self.engine.log_events {
            self.log_event(&ev);
        }
        match ev.payload {
            Payload::Arrival { wf } => {
                self.release(wf, 0);
            }
            Payload::Prefill { inst, req, attempt } => {
                if self.is_current(inst, req, attempt) {
                    self.reschedule_check(inst);
                }
            }
            Payload::Done { inst, req, attempt } => {
                if self.is_current(inst, req, attempt) {
                    self.complete(inst, req);
                }
            }
            Payload::Check { inst, epoch } => {
                if self.instances[inst].epoch == epoch {
                    self.resolve_overflow(inst);
                }
            }
            Payload::Dispatch { tick } => {
                if tick {
                    self.tick_pending = false;
                } else {
                    self.dispatch_pending = false;
                }
                self.dispatch_round();
            }
        }
        true
    }

    pub fn run(mut self) -> SimOutput {
        while self.step() {}
        self.finish()
    }

    fn is_current(&self, inst: usize, req: usize, attempt: u32) -> bool {
        let r = &self.reqs[req];
        r.attempt == attempt && r.state == ReqState::Running(inst)
    }

    fn log_event(&mut self, ev: &SimEvent) {
        let line = match ev.payload {
            Payload::Done { inst, req, attempt } | Payload::Prefill { inst, req, attempt } => serde_json::json!({
                "time": ev.time, "kind": ev.kind, "instance": inst, "request": req, "attempt": attempt
            }),
            Payload::Check { inst, epoch } => serde_json::json!({
                "time": ev.time, "kind": ev.kind, "instance": inst, "epoch": epoch
            }),
            Payload::Arrival { wf } => serde_json::json!({
                "time": ev.time, "kind": ev.kind, "workflow": wf
            }),
            Payload::Dispatch { tick } => serde_json::json!({
                "time": ev.time, "kind": ev.kind, "tick": tick
            }),
        };
        self.events.push(line.to_string());
    }

    /// Creates the request for call `call` of workflow `wf` and queues it.
    fn release(&mut self, wf: usize, call: usize) {
        let plan = &self.plans[wf];
        let c = &plan.calls[call];
        let id = self.reqs.len();
        let upstream_agent = c.upstream.map(|u| plan.calls[u].agent.clone());
        self.reqs.push(Req {
            wf,
            call,
            agent: c.agent.clone(),
            upstream_agent,
            prompt: c.prompt_tokens,
            output: c.output_tokens,
            created: self.now,
            state: ReqState::Queued,
            attempt: 0,
            wait_since: self.now,
            queue_time: 0.0,
            exec_start: f64::NAN,
            exec_end: f64::NAN,
            prefill_time: 0.0,
            decode_time: 0.0,
            kept: 0,
            preemptions: 0,
            wasted_tokens: 0.0,
            instance: 0,
            predicted_exec: None,
        });
        self.wfs[wf].call_req[call] = Some(id);
        if let Policy::Oracle(rem) = &mut self.policy {
            rem.insert(id as u64, self.oracle_rem[wf][call]);
        }
        if self.dispatcher.is_round_robin() {
            let inst = self.rr_next;
            self.rr_next = (self.rr_next + 1) % self.instances.len();
            self.enqueue_local(inst, id);
        } else {
            self.enqueue_global(id);
        }
        self.request_dispatch();
    }

    fn enqueue_global(&mut self, id: usize) {
        let p = self.pending(id);
        self.reqs[id].state = ReqState::Queued;
        self.reqs[id].wait_since = self.now;
        self.global.enqueue(p, &self.policy);
    }

    fn enqueue_local(&mut self, inst: usize, id: usize) {
        let p = self.pending(id);
        self.reqs[id].state = ReqState::Local(inst);
        self.reqs[id].wait_since = self.now;
        self.instances[inst].local.enqueue(p, &self.policy);
    }

    fn prefill_tokens(&self, id: usize) -> u32 {
        let r = &self.reqs[id];
        r.prompt + r.kept
    }

    fn true_exec(&self, inst: usize, id: usize) -> f64 {
        let r = &self.reqs[id];
        let p = &self.instances[inst].profile;
        self.prefill_tokens(id) as f64 / p.prefill_rate + (r.output - r.kept) as f64 / p.decode_rate
    }

    fn predicted_exec(&self, inst: usize, id: usize) -> f64 {
        match self.engine.prediction {
            PredictionMode::Perfect => self.true_exec(inst, id),
            PredictionMode::Profiled => self
                .profiler
                .expected_exec_time(&self.reqs[id].agent)
                .unwrap_or(self.engine.cold_start_exec),
        }
    }

    /// Ledger model for starting `id` on `inst` now. The expected duration is
    /// capped so the predicted peak never exceeds capacity; otherwise a long
    /// prediction could keep a request out of even an idle instance.
    fn memory_model(&self, inst: usize, id: usize) -> MemoryModel {
        let p = &self.instances[inst].profile;
        let prompt = self.prefill_tokens(id) as f64;
        let cap_t = ((p.capacity - prompt) / p.decode_rate).max(f64::MIN_POSITIVE);
        let t = self.predicted_exec(inst, id).min(cap_t);
        MemoryModel::new(prompt, p.decode_rate, self.now, t)
    }

    /// Batch slot free and the prompt fits in the memory left right now.
    fn can_host(&self, inst: usize, id: usize) -> bool {
        let i = &self.instances[inst];
        i.running.len() < i.profile.max_batch
            && i.live(self.now) + self.prefill_tokens(id) as f64 <= i.profile.capacity
    }

    fn admit(&mut self, inst: usize, id: usize, model: Option<MemoryModel>) {
        let now = self.now;
        let prefill = self.prefill_tokens(id);
        let profile = self.instances[inst].profile;
        let r = &mut self.reqs[id];
        r.queue_time += now - r.wait_since;
        r.attempt += 1;
        r.state = ReqState::Running(inst);
        r.exec_start = now;
        r.instance = inst;
        r.predicted_exec = model.map(|m| m.expected);
        let attempt = r.attempt;
        let decode_start = now + prefill as f64 / profile.prefill_rate;
        let end = decode_start + (r.output - r.kept) as f64 / profile.decode_rate;
        self.instances[inst].running.push(Running {
            req: id,
            admitted: now,
            decode_start,
            end,
            base: prefill as f64,
        });
        if let (Some(slots), Some(m)) = (&mut self.slots, model) {
            slots.ledger_mut(InstanceId(inst)).commit_unchecked(id as u64, m);
        }
        self.push(decode_start, Payload::Prefill { inst, req: id, attempt });
        self.push(end, Payload::Done { inst, req: id, attempt });
        self.reschedule_check(inst);
    }

    fn reschedule_check(&mut self, inst: usize) {
        let now = self.now;
        let i = &mut self.instances[inst];
        i.epoch += 1;
        let epoch = i.epoch;
        let live = i.live(now);
        let slope = i.decoding(now) as f64 * i.profile.decode_rate;
        let limit = i.profile.capacity + OVERFLOW_SLACK;
        let at = if live >= limit {
            Some(now)
        } else if slope > 0.0 {
            Some(now + (limit - live) / slope)
        } else {
            None
        };
        if let Some(t) = at {
            self.push(t, Payload::Check { inst, epoch });
        }
    }

    fn complete(&mut self, inst: usize, id: usize) {
        let now = self.now;
        let pos = self.instances[inst]
            .running
            .iter()
            .position(|r| r.req == id)
            .expect("running request");
        let run = self.instances[inst].running.swap_remove(pos);
        let r = &mut self.reqs[id];
        r.prefill_time += run.decode_start - run.admitted;
        r.decode_time += run.end - run.decode_start;
        r.exec_end = now;
        r.state = ReqState::Done;
        if let Some(slots) = &mut self.slots {
            let _ = slots.ledger_mut(InstanceId(inst)).finish(id as u64, now);
        }
        let r = &self.reqs[id];
        let wf = r.wf;
        let record = RequestRecord {
            msg_id: self.plans[wf].msg_id.clone(),
            agent: r.agent.clone(),
            upstream: r.upstream_agent.clone(),
            exec_start: r.exec_start,
            exec_end: now,
            prompt_tokens: r.prompt,
            output_tokens: r.output,
            app_start: self.plans[wf].arrival,
            queue_enter: Some(r.created),
        };
        let call = r.call;
        let _ = self.profiler.record_execution(&record.agent, now - record.exec_start);
        let state = &mut self.wfs[wf];
        state.done_calls += 1;
        state.records.push(record);
        let released: Vec<usize> = self.plans[wf].released_by(call).collect();
        for c in released {
            self.release(wf, c);
        }
        if self.wfs[wf].done_calls == self.plans[wf].calls.len() {
            self.wfs[wf].end = Some(now);
            let newly = self
                .profiler
                .record_remaining(&self.wfs[wf].records)
                .unwrap_or_default();
            self.since_rebuild += 1;
            if !newly.is_empty() || self.since_rebuild >= self.engine.priority_refresh {
                self.rebuild_priorities();
            }
        }
        self.reschedule_check(inst);
        self.request_dispatch();
    }

    fn rebuild_priorities(&mut self) {
        if self.scheduler != SchedulerKind::Kairos {
            return;
        }
        self.since_rebuild = 0;
        if let Ok(table) = PriorityTable::build(self.profiler.remaining_all(), self.table_version + 1) {
            self.table_version += 1;
            self.tables.push(table.clone());
            self.table = Arc::new(table);
            self.policy = Policy::Kairos(AgentPriority::new(self.table.clone()));
        }
    }

    /// Preempts until the instance is back within capacity.
    fn resolve_overflow(&mut self, inst: usize) {
        let now = self.now;
        let cap = self.instances[inst].profile.capacity;
        let mut preempted_any = false;
        while self.instances[inst].live(now) > cap && !self.instances[inst].running.is_empty() {
            let victim_pos = {
                let i = &self.instances[inst];
                // Lowest priority, then latest admission, then latest created.
                let mut best: Option<(usize, f64, f64, usize)> = None;
                for (pos, r) in i.running.iter().enumerate() {
                    let class = self.policy.key(&self.pending(r.req)).class;
                    let start = r.admitted;
                    let worse = match best {
                        None => true,
                        Some((_, bc, bs, bid)) => {
                            class > bc || (class == bc && (start > bs || (start == bs && r.req > bid)))
                        }
                    };
                    if worse {
                        best = Some((pos, class, start, r.req));
                    }
                }
                best.expect("non-empty").0
            };
            self.preempt(inst, victim_pos);
            preempted_any = true;
        }
        if preempted_any {
            if let Some(slots) = &mut self.slots {
                slots.on_overload(InstanceId(inst));
            }
            self.request_dispatch();
        }
        self.reschedule_check(inst);
    }

    fn preempt(&mut self, inst: usize, pos: usize) {
        let now = self.now;
        let run = self.instances[inst].running.swap_remove(pos);
        let kv = self.instances[inst].kv_of(&run, now);
        let k = self.instances[inst].profile.decode_rate;
        self.instances[inst].preempted_total += 1;
        let id = run.req;
        let r = &mut self.reqs[id];
        let generated = if now > run.decode_start {
            r.prefill_time += run.decode_start - run.admitted;
            r.decode_time += now - run.decode_start;
            (k * (now - run.decode_start)).floor() as u32
        } else {
            r.prefill_time += now - run.admitted;
            0
        };
        let total_generated = (r.kept + generated).min(r.output - 1);
        r.kept = ((1.0 - self.engine.recompute_fraction) * total_generated as f64).floor() as u32;
        r.preemptions += 1;
        r.wasted_tokens += kv;
        if let Some(slots) = &mut self.slots {
            let _ = slots.ledger_mut(InstanceId(inst)).finish(id as u64, now);
        }
        if self.dispatcher.is_round_robin() {
            self.enqueue_local(inst, id);
        } else {
            self.enqueue_global(id);
        }
    }

    /// Running requests whose ledger window has closed get a fresh window
    /// from their current KV footprint to the conditional expected end.
    fn reestimate_overruns(&mut self) {
        if !self.engine.overrun_reestimate {
            return;
        }
        let Some(slots) = &self.slots else { return };
        let now = self.now;
        let mut updates = Vec::new();
        for (inst, i) in self.instances.iter().enumerate() {
            let ledger = &slots.ledgers()[inst];
            let p = &i.profile;
            for r in &i.running {
                let Some(m) = ledger.model(r.req as u64) else { continue };
                if m.t_end() > now || r.end <= now {
                    continue;
                }
                let elapsed = now - r.admitted;
                let residual = self
                    .profiler
                    .expected_residual_exec(&self.reqs[r.req].agent, elapsed)
                    .filter(|t| *t > 0.0)
                    .unwrap_or(ledger.slot_len());
                let kv = i.kv_of(r, now);
                let cap_t = ((p.capacity - kv) / p.decode_rate).max(f64::MIN_POSITIVE);
                updates.push((inst, r.req, MemoryModel::new(kv, p.decode_rate, now, residual.min(cap_t))));
            }
        }
        let slots = self.slots.as_mut().expect("checked");
        for (inst, id, model) in updates {
            let ledger = slots.ledger_mut(InstanceId(inst));
            let _ = ledger.finish(id as u64, now);
            ledger.commit_unchecked(id as u64, model);
        }
    }

    fn dispatch_round(&mut self) {
        if self.dispatcher.is_round_robin() {
            for inst in 0..self.instances.len() {
                self.admit_local(inst);
            }
            return;
        }
        let now = self.now;
        if let Some(slots) = &mut self.slots {
            slots.advance(now);
            for (inst, i) in self.instances.iter().enumerate() {
                slots.observe_live_usage(InstanceId(inst), i.live(now));
            }
        }
        self.reestimate_overruns();
        let timer = self.engine.measure_overhead.then(Instant::now);
        let queue_len = self.global.len();
        let candidates: Vec<usize> = self
            .global
            .ordered(&self.policy)
            .iter()
            .take(self.engine.scan_limit)
            .map(|p| p.id as usize)
            .collect();
        if let Some(t) = timer {
            self.overhead.sort.push((queue_len, t.elapsed().as_secs_f64()));
        }
        let mut taken = Vec::new();
        let mut failed: Vec<(u32, f64)> = Vec::new();
        for (pos, &id) in candidates.iter().enumerate() {
            if !self.any_room() {
                break;
            }
            let p = self.prefill_tokens(id);
            let t_profiled = self.predicted_exec(0, id);
            let dominated = self.engine.prediction == PredictionMode::Profiled
                && failed.iter().any(|&(fp, ft)| p >= fp && t_profiled >= ft);
            let target = if dominated { None } else { self.place(id) };
            match target {
                Some((inst, model)) => {
                    self.admit(inst, id, model);
                    taken.push(pos);
                }
                None => {
                    if !dominated {
                        failed.push((p, t_profiled));
                    }
                    if !self.engine.backfill {
                        break;
                    }
                }
            }
        }
        for &pos in taken.iter().rev() {
            self.global.take_at(pos);
        }
        if !self.global.is_empty() && !self.tick_pending {
            self.tick_pending = true;
            self.push(now + self.engine.dispatch_tick, Payload::Dispatch { tick: true });
        }
    }

    fn any_room(&self) -> bool {
        self.instances.iter().enumerate().any(|(n, i)| {
            i.running.len() < i.profile.max_batch
                && !self.slots.as_ref().is_some_and(|s| s.is_suspended(InstanceId(n)))
        })
    }

    /// Chooses an instance for a queued request under the pull dispatchers.
    fn place(&mut self, id: usize) -> Option<(usize, Option<MemoryModel>)> {
        let now = self.now;
        match self.dispatcher {
            DispatcherKind::TimeSlot => {
                let timer = self.engine.measure_overhead.then(Instant::now);
                let slots = self.slots.as_ref().expect("time-slot ledgers");
                let decision = slots.select_by(id as u64, |ledger| {
                    let inst = ledger.instance().0;
                    if !self.can_host(inst, id) {
                        return None;
                    }
                    Some(self.memory_model(inst, id))
                });
                if let Some(t) = timer {
                    self.overhead
                        .slot_eval
                        .push((self.instances.len(), t.elapsed().as_secs_f64()));
                }
                if self.engine.log_decisions {
                    let candidates = decision
                        .candidates
                        .iter()
                        .map(|(i, p)| match p {
                            Placement::Fits { predicted_peak } => format!("{i}:{predicted_peak:.1}"),
                            Placement::Exceeds { slot } => format!("{i}:exceeds@{slot}"),
                        })
                        .collect::<Vec<_>>()
                        .join(";");
                    self.decisions.push(DecisionRow {
                        time: now,
                        request: id as u64,
                        agent: self.reqs[id].agent.clone(),
                        target: decision.target.map(|t| t.0),
                        predicted_peak: decision.predicted_peak,
                        candidates,
                    });
                }
                let inst = decision.target?.0;
                Some((inst, Some(self.memory_model(inst, id))))
            }
            DispatcherKind::StaticThreshold => {
                let mut best: Option<(usize, f64)> = None;
                for (n, i) in self.instances.iter().enumerate() {
                    let live = i.live(now);
                    if live < self.engine.static_threshold * i.profile.capacity
                        && self.can_host(n, id)
                        && best.is_none_or(|(_, b)| live < b)
                    {
                        best = Some((n, live));
                    }
                }
                best.map(|(n, _)| (n, None))
            }
            DispatcherKind::RoundRobin | DispatcherKind::KairosWoPacking => unreachable!("push dispatch"),
        }
    }

    /// Engine-side admission from an instance's own queue: in order, stopping
    /// at the first request that does not fit.
    fn admit_local(&mut self, inst: usize) {
        loop {
            let Some(head) = self.instances[inst].local.peek(&self.policy) else {
                break;
            };
            let id = head.id as usize;
            if !self.can_host(inst, id) {
                break;
            }
            self.instances[inst].local.dequeue(&self.policy);
            self.admit(inst, id, None);
        }
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        StatusSnapshot {
            time: self.now,
            instances: self
                .instances
                .iter()
                .enumerate()
                .map(|(n, i)| InstanceStatus {
                    instance: InstanceId(n),
                    live_kv: i.live(self.now),
                    running: i.running.len(),
                    preempted_total: i.preempted_total,
                    waiting: i.local.len(),
                    suspended: self.slots.as_ref().is_some_and(|s| s.is_suspended(InstanceId(n))),
                })
                .collect(),
            global_waiting: self.global.len(),
        }
    }

    pub fn priority_table(&self) -> &PriorityTable {
        &self.table
    }

    pub fn profiler(&self) -> &LatencyProfiler {
        &self.profiler
    }

    fn finish(self) -> SimOutput {
        let final_status = self.snapshot();
        let requests = self
            .reqs
            .iter()
            .enumerate()
            .map(|(id, r)| RequestOutcome {
                id: id as u64,
                workflow: r.wf,
                call: r.call,
                msg_id: self.plans[r.wf].msg_id.clone(),
                agent: r.agent.clone(),
                instance: r.instance,
                created: r.created,
                exec_start: r.exec_start,
                exec_end: r.exec_end,
                queue_time: r.queue_time,
                prefill_time: r.prefill_time,
                decode_time: r.decode_time,
                prompt_tokens: r.prompt,
                output_tokens: r.output,
                preemptions: r.preemptions,
                wasted_tokens: r.wasted_tokens,
                predicted_exec: r.predicted_exec,
            })
            .collect();
        let workflows = self
            .plans
            .iter()
            .enumerate()
            .filter_map(|(n, p)| {
                let end = self.wfs[n].end?;
                Some(WorkflowOutcome {
                    index: n,
                    app: p.app.clone(),
                    msg_id: p.msg_id.clone(),
                    arrival: p.arrival,
                    end,
                    output_tokens: p.total_output_tokens(),
                    requests: p.calls.len(),
                })
            })
            .collect();
        let records = self.wfs.iter().flat_map(|w| w.records.iter().cloned()).collect();
        SimOutput {
            requests,
            workflows,
            records,
            preempted_total: self.instances.iter().map(|i| i.preempted_total).sum(),
            end_time: self.now,
            priority_table: (*self.table).clone(),
            priority_history: self.tables,
            profiler: self.profiler,
            decisions: self.decisions,
            events: self.events,
            overhead: self.overhead,
            final_status,
        }
    }
}
