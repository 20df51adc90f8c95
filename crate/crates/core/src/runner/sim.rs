//! Deterministic discrete-event execution in virtual time.
//!
//! Each worker is a small state machine whose activities (delay slices,
//! Get, mini-batches, Add flush, helping, cloning) are timed events on one
//! queue ordered by `(time, worker, sequence)`. Item updates are really
//! computed, so the final table is the genuine result of the schedule.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use log::{debug, trace};

use super::config::ExperimentConfig;
use super::{ClockEvent, Cluster, Partial, RunOutput, RunStats};
use crate::bench::{IterationRecord, Ticks};
use crate::consistency::{may_proceed, MitigationFlag, SyncPolicy};
use crate::error::{Error, Result};
use crate::injector::{inject_straggler, DelayPlan, DisruptionSchedule};
use crate::mitigation::{
    detect_straggler, rr_step, speculative_clone, CloneTask, CommitArbiter, CommitLedger, Interval,
    LagCandidate, MsgKind, ProgressReport, ReassignmentMsg, RrState,
};
use crate::paramserver::ParameterServer;
use crate::workloads::{ItemUpdate, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    /// Waiting for admission to the next iteration.
    Blocked,
    /// All iterations done, waiting for the rest of the cluster.
    Finished,
    /// Own range done, waiting for a helper's WORK_DONE.
    AwaitShed,
    PreGet,
    Get,
    Batch,
    PreFlush,
    Flush,
    Help,
    Clone,
}

enum Bucket {
    Comp,
    Comm,
    Wait,
}

impl Act {
    fn bucket(self) -> Bucket {
        match self {
            Act::Blocked | Act::Finished | Act::AwaitShed => Bucket::Wait,
            Act::Get | Act::Flush => Bucket::Comm,
            _ => Bucket::Comp,
        }
    }

    fn idle(self) -> bool {
        matches!(self, Act::Blocked | Act::Finished)
    }
}

enum Task {
    Help {
        straggler: usize,
        iv: Interval,
        iteration: u64,
        snap: Arc<Vec<f64>>,
    },
    Clone {
        task: CloneTask,
        snap: Arc<Vec<f64>>,
    },
}

/// A clone is running on part of this worker's range; updates for that part
/// are held back until the race is decided.
struct Spec {
    task: CloneTask,
    target: usize,
    held: Vec<ItemUpdate>,
}

struct Worker {
    clock: u64,
    in_iter: bool,
    act: Act,
    since: Ticks,
    gen: u64,
    rec: IterationRecord,
    base: Interval,
    snap: Arc<Vec<f64>>,
    plan: DelayPlan,
    batch_size: usize,
    batches_run: usize,
    batch: Interval,
    /// Items of the own range finished this iteration, by anyone.
    done: usize,
    rr: RrState,
    spec: Option<Spec>,
    task: Option<Task>,
    inbox: BTreeMap<usize, ReassignmentMsg>,
    nominal: Ticks,
    own_work: Ticks,
    disturbed: bool,
}

impl Worker {
    fn progress(&self) -> f64 {
        if self.base.is_empty() {
            1.0
        } else {
            self.done as f64 / self.base.len() as f64
        }
    }
}

enum Ev {
    Done { gen: u64 },
    Msg(ReassignmentMsg),
    CloneLost(CloneTask),
}

struct Sim<'a> {
    cfg: &'a ExperimentConfig,
    policy: SyncPolicy,
    wl: &'a dyn Workload,
    ps: &'a ParameterServer,
    n_items: usize,
    iterations: u64,
    batches: usize,
    cost: Ticks,
    now: Ticks,
    seq: u64,
    queue: BTreeMap<(Ticks, usize, u64), Ev>,
    w: Vec<Worker>,
    ledgers: BTreeMap<u64, CommitLedger>,
    arbiter: CommitArbiter,
    active_clones: usize,
    disruption: Option<DisruptionSchedule>,
    records: Vec<IterationRecord>,
    trace: Vec<ClockEvent>,
    shed_results: BTreeMap<(usize, u64, Interval), Vec<ItemUpdate>>,
    stats: RunStats,
    last_clock_at: Ticks,
    finished: usize,
}

pub(crate) fn run_virtual(
    cfg: &ExperimentConfig,
    cluster: &Cluster,
) -> std::result::Result<RunOutput, Partial> {
    let wl = cluster.workload.as_ref();
    let workers = cfg.workers;
    let batches = cfg.mitigation.batches();
    let policy = cfg.policy();
    let n_items = wl.num_items();
    let shed = cfg.mitigation.shed_fraction;
    let comm = cfg.timing.comm_get_us + cfg.timing.comm_add_us;
    let w = cluster
        .ranges
        .iter()
        .enumerate()
        .map(|(id, &base)| Worker {
            clock: 0,
            in_iter: false,
            act: Act::Blocked,
            since: 0,
            gen: 0,
            rec: IterationRecord::new(id, 1),
            base,
            snap: Arc::new(Vec::new()),
            plan: DelayPlan::zero(batches + 2),
            batch_size: 1,
            batches_run: 0,
            batch: Interval::default(),
            done: 0,
            rr: RrState::new(id, 1, base, n_items, shed),
            spec: None,
            task: None,
            inbox: BTreeMap::new(),
            nominal: base.len() as Ticks * wl.item_cost() + comm,
            own_work: 0,
            disturbed: false,
        })
        .collect();
    let mut sim = Sim {
        cfg,
        disruption: DisruptionSchedule::new(&cfg.straggler, workers, cfg.workers_per_machine),
        policy,
        wl,
        ps: &cluster.ps,
        n_items,
        iterations: cfg.iterations,
        batches,
        cost: wl.item_cost(),
        now: 0,
        seq: 0,
        queue: BTreeMap::new(),
        w,
        ledgers: BTreeMap::new(),
        arbiter: CommitArbiter::default(),
        active_clones: 0,
        records: Vec::new(),
        trace: Vec::new(),
        shed_results: BTreeMap::new(),
        stats: RunStats::default(),
        last_clock_at: 0,
        finished: 0,
    };
    if let Err(error) = sim.run() {
        let mut records = sim.records;
        records.sort_by_key(|r| (r.iteration, r.worker));
        return Err(Partial { error, records });
    }
    let makespan = sim.now;
    let mut records = sim.records;
    records.sort_by_key(|r| (r.iteration, r.worker));
    sim.stats.dropped = sim.w.iter().map(|x| x.rr.dropped).sum();
    // help results whose WORK_DONE was still in flight when the run ended
    sim.stats.items_discarded += sim
        .shed_results
        .keys()
        .map(|(_, _, iv)| iv.len() as u64)
        .sum::<u64>();
    Ok(RunOutput {
        records,
        trace: sim.trace,
        makespan,
        max_gap: cluster.ps.board().max_gap(),
        stats: sim.stats,
    })
}

impl<'a> Sim<'a> {
    fn run(&mut self) -> Result<()> {
        for id in 0..self.w.len() {
            self.decide(id)?;
        }
        while self.finished < self.w.len() {
            let Some(((t, target, _), ev)) = self.queue.pop_first() else {
                return Err(self.deadlock("no pending events"));
            };
            if t.saturating_sub(self.last_clock_at) > self.cfg.timing.deadlock_timeout_us {
                return Err(self.deadlock("no clock advance within the timeout"));
            }
            self.now = t;
            match ev {
                Ev::Done { gen } => {
                    if gen == self.w[target].gen {
                        self.on_done(target)?;
                    }
                }
                Ev::Msg(msg) => self.on_msg(msg)?,
                Ev::CloneLost(task) => self.on_clone_lost(target, task)?,
            }
        }
        for id in 0..self.w.len() {
            self.charge(id);
            let rec = std::mem::replace(&mut self.w[id].rec, IterationRecord::new(id, 0));
            self.records.push(rec);
        }
        Ok(())
    }

    fn deadlock(&self, why: &str) -> Error {
        let clocks: Vec<u64> = self.w.iter().map(|x| x.clock).collect();
        let acts: Vec<String> = self.w.iter().map(|x| format!("{:?}", x.act)).collect();
        Error::Deadlock(format!(
            "{why} at t={} clocks={clocks:?} activities={acts:?}",
            self.now
        ))
    }

    fn schedule(&mut self, at: Ticks, worker: usize, ev: Ev) {
        self.seq += 1;
        self.queue.insert((at, worker, self.seq), ev);
    }

    fn send(&mut self, msg: ReassignmentMsg) {
        trace!(
            "t={} {:?} {}->{} {} it{}",
            self.now,
            msg.kind,
            msg.from,
            msg.to,
            msg.interval,
            msg.iteration
        );
        if msg.kind == MsgKind::Cancel {
            self.stats.cancels += 1;
        }
        self.schedule(
            self.now + self.cfg.timing.msg_latency_us,
            msg.to,
            Ev::Msg(msg),
        );
    }

    /// Books the time since the last transition to the current activity.
    fn charge(&mut self, id: usize) {
        let now = self.now;
        let x = &mut self.w[id];
        let d = now - x.since;
        x.since = now;
        match x.act.bucket() {
            Bucket::Comp => x.rec.comp_ticks += d,
            Bucket::Comm => x.rec.comm_ticks += d,
            Bucket::Wait => x.rec.wait_ticks += d,
        }
        if x.act == Act::Batch {
            x.own_work += d;
        }
    }

    fn set_act(&mut self, id: usize, act: Act, dur: Option<Ticks>) {
        self.charge(id);
        let x = &mut self.w[id];
        x.act = act;
        x.gen += 1;
        let gen = x.gen;
        if let Some(d) = dur {
            self.schedule(self.now + d, id, Ev::Done { gen });
        }
    }

    fn compute_time(&self, id: usize, items: usize) -> Ticks {
        let work = items as Ticks * self.cost;
        match &self.disruption {
            Some(d) => d.finish_time(id, self.now, work) - self.now,
            None => work,
        }
    }

    fn process(&mut self, snap: &[f64], iv: Interval, iteration: u64) -> Result<Vec<ItemUpdate>> {
        self.stats.items_processed += iv.len() as u64;
        (iv.start..iv.end)
            .map(|item| self.wl.process_item(snap, item, iteration))
            .collect()
    }

    /// Makes `updates` for `iv` part of `owner`'s iteration: ledger entry,
    /// buffered Adds and local item state.
    fn commit(
        &mut self,
        owner: usize,
        iteration: u64,
        iv: Interval,
        updates: Vec<ItemUpdate>,
    ) -> Result<()> {
        let n = self.n_items;
        self.ledgers
            .entry(iteration)
            .or_insert_with(|| CommitLedger::new(iteration, n))
            .commit(iv)?;
        for u in updates {
            self.ps
                .add_update(owner, u.item as u64, &u.keys, &u.values)?;
            if let Some(local) = u.local {
                self.wl.commit_local(u.item, local);
            }
            self.stats.clamped += u.clamped;
        }
        Ok(())
    }

    /// Progress of `p` as seen from iteration `it`.
    fn fraction(&self, p: usize, it: u64) -> f64 {
        let x = &self.w[p];
        if x.clock >= it {
            1.0
        } else if x.in_iter && x.clock + 1 == it {
            x.progress()
        } else {
            0.0
        }
    }

    fn has(&self, f: MitigationFlag) -> bool {
        self.policy.has(f)
    }

    /// Picks the next activity for a worker that is between activities.
    fn decide(&mut self, id: usize) -> Result<()> {
        if self.try_help(id)? {
            return Ok(());
        }
        let x = &self.w[id];
        if !x.in_iter {
            if x.clock >= self.iterations {
                self.set_act(id, Act::Finished, None);
                self.scan_clones();
            } else if may_proceed(x.clock, self.ps.view().min_clock(), &self.policy) {
                self.start_iteration(id)?;
            } else {
                self.set_act(id, Act::Blocked, None);
                self.scan_clones();
            }
        } else if !x.rr.own.is_empty() {
            self.start_batch(id);
        } else if x.rr.active_shed.is_some() {
            self.set_act(id, Act::AwaitShed, None);
        } else {
            let d = x.plan.at(self.batches + 1);
            self.set_act(id, Act::PreFlush, Some(d));
        }
        Ok(())
    }

    fn start_iteration(&mut self, id: usize) -> Result<()> {
        let it = self.w[id].clock + 1;
        let snap = self
            .ps
            .try_snapshot(id)?
            .ok_or_else(|| Error::Invariant(format!("worker {id} admitted but refused a read")))?;
        let plan = inject_straggler(
            id,
            it,
            self.w[id].nominal,
            self.batches + 2,
            &self.cfg.straggler,
        )?;
        self.stats.injected_delay_ticks += plan.total_delay;
        let shed = self.cfg.mitigation.shed_fraction;
        let n = self.n_items;
        let batches = self.batches;
        let x = &mut self.w[id];
        let mut rr = RrState::new(id, it, x.base, n, shed);
        rr.helping = x.rr.helping.take();
        rr.seen_requests = std::mem::take(&mut x.rr.seen_requests);
        rr.dropped = x.rr.dropped;
        x.rr = rr;
        x.in_iter = true;
        x.disturbed = plan.total_delay > 0;
        x.batch_size = x.base.len().div_ceil(batches).max(1);
        x.batches_run = 0;
        x.done = 0;
        x.own_work = 0;
        x.snap = Arc::new(snap);
        let d = plan.at(0);
        x.plan = plan;
        debug!("t={} w{id} starts it{it}", self.now);
        self.set_act(id, Act::PreGet, Some(d));
        Ok(())
    }

    fn start_batch(&mut self, id: usize) {
        let x = &mut self.w[id];
        let iv = x.rr.consume_front(x.batch_size);
        x.batch = iv;
        x.batches_run += 1;
        let slice = x.plan.at(x.batches_run.min(self.batches));
        let d = self.compute_time(id, iv.len()) + slice;
        self.set_act(id, Act::Batch, Some(d));
    }

    fn on_done(&mut self, id: usize) -> Result<()> {
        match self.w[id].act {
            Act::PreGet => {
                let d = self.cfg.timing.comm_get_us;
                self.set_act(id, Act::Get, Some(d));
            }
            Act::Get => self.decide(id)?,
            Act::Batch => self.finish_batch(id)?,
            Act::PreFlush => {
                let d = self.cfg.timing.comm_add_us;
                self.set_act(id, Act::Flush, Some(d));
            }
            Act::Flush => self.finish_iteration(id)?,
            Act::Help => self.finish_help(id)?,
            Act::Clone => self.finish_clone(id)?,
            Act::Blocked | Act::Finished | Act::AwaitShed => {
                return Err(Error::Invariant(format!(
                    "timed event for waiting worker {id}"
                )))
            }
        }
        Ok(())
    }

    fn finish_batch(&mut self, id: usize) -> Result<()> {
        self.charge(id);
        let it = self.w[id].clock + 1;
        let iv = std::mem::take(&mut self.w[id].batch);
        let snap = self.w[id].snap.clone();
        let updates = self.process(&snap, iv, it)?;
        self.w[id].done += iv.len();
        match &mut self.w[id].spec {
            Some(spec) if spec.task.interval.covers(&iv) => spec.held.extend(updates),
            _ => self.commit(id, it, iv, updates)?,
        }
        let own_done = self.w[id].rr.own.start;
        if let Some(end) = self.w[id].spec.as_ref().map(|s| s.task.interval.end) {
            if own_done >= end {
                self.resolve_original(id)?;
            }
        }
        self.maybe_request_help(id);
        self.scan_clones();
        self.decide(id)
    }

    fn finish_iteration(&mut self, id: usize) -> Result<()> {
        self.charge(id);
        self.ps.clock(id)?;
        self.last_clock_at = self.now;
        let comm = self.cfg.timing.comm_get_us + self.cfg.timing.comm_add_us;
        let x = &mut self.w[id];
        x.clock += 1;
        x.in_iter = false;
        self.trace.push(ClockEvent {
            time: self.now,
            worker: id,
            clock: x.clock,
        });
        if !x.disturbed {
            x.nominal = x.own_work + comm;
        }
        debug!("t={} w{id} clock {}", self.now, x.clock);
        if x.clock < self.iterations {
            let next = IterationRecord::new(id, x.clock + 1);
            let rec = std::mem::replace(&mut x.rec, next);
            self.records.push(rec);
        } else {
            self.finished += 1;
        }
        let min = self.ps.view().min_clock();
        let ready: Vec<u64> = self.ledgers.range(..=min).map(|(k, _)| *k).collect();
        for k in ready {
            if let Some(l) = self.ledgers.remove(&k) {
                l.check_complete()?;
            }
        }
        if self.finished == self.w.len() {
            return Ok(());
        }
        for other in 0..self.w.len() {
            let o = &self.w[other];
            if other != id
                && o.act == Act::Blocked
                && o.task.is_none()
                && may_proceed(o.clock, min, &self.policy)
            {
                self.decide(other)?;
            }
        }
        self.decide(id)
    }

    /// Straggler side: broadcast a help request when behind the peers.
    fn maybe_request_help(&mut self, id: usize) {
        if !self.has(MitigationFlag::Reassignment) {
            return;
        }
        let x = &self.w[id];
        if x.spec.is_some()
            || x.rr.active_shed.is_some()
            || x.rr.own.tail(x.rr.shed_fraction()).is_empty()
        {
            return;
        }
        let it = x.clock + 1;
        let own = ProgressReport {
            worker: id,
            iteration: it,
            fraction_done: x.progress(),
            timestamp: self.now,
        };
        let peers: Vec<ProgressReport> = (0..self.w.len())
            .filter(|p| *p != id)
            .map(|p| ProgressReport {
                worker: p,
                iteration: it,
                fraction_done: self.fraction(p, it),
                timestamp: self.now,
            })
            .collect();
        if !detect_straggler(&own, &peers, self.cfg.mitigation.detect_threshold) {
            return;
        }
        let ids: Vec<usize> = (0..self.w.len()).collect();
        let msgs = self.w[id].rr.request_help(&ids);
        if !msgs.is_empty() {
            self.stats.help_requests += 1;
        }
        for m in msgs {
            self.send(m);
        }
    }

    /// Whether `s` is still in iteration `it` with something left to shed.
    fn open_for_help(&self, s: usize, it: u64) -> bool {
        let x = &self.w[s];
        x.in_iter
            && x.clock + 1 == it
            && x.spec.is_none()
            && x.rr.active_shed.is_none()
            && !x.rr.own.tail(x.rr.shed_fraction()).is_empty()
    }

    /// Helper side: claim the tail of a pending request if this worker is
    /// ahead of the requester.
    fn try_help(&mut self, id: usize) -> Result<bool> {
        if !self.has(MitigationFlag::Reassignment) {
            return Ok(false);
        }
        let x = &self.w[id];
        if x.task.is_some() || x.rr.active_shed.is_some() || x.spec.is_some() || x.inbox.is_empty()
        {
            return Ok(false);
        }
        let clock = x.clock;
        let stale: Vec<usize> = x
            .inbox
            .values()
            .filter(|r| self.w[r.from].clock >= r.iteration)
            .map(|r| r.from)
            .collect();
        let pick = x
            .inbox
            .values()
            .filter(|r| clock >= r.iteration && self.open_for_help(r.from, r.iteration))
            .min_by_key(|r| (r.iteration, r.from))
            .copied();
        let x = &mut self.w[id];
        for s in stale {
            x.inbox.remove(&s);
        }
        let Some(req) = pick else { return Ok(false) };
        x.inbox.remove(&req.from);
        x.rr.idle = true;
        let (mut state, out) = rr_step(&x.rr, &req);
        state.idle = false;
        x.rr = state;
        let Some(ack) = out.into_iter().find(|m| m.kind == MsgKind::HelpAck) else {
            return Ok(false);
        };
        let snap = self.w[req.from].snap.clone();
        self.send(ack);
        self.stats.help_acks += 1;
        self.w[id].task = Some(Task::Help {
            straggler: req.from,
            iv: ack.interval,
            iteration: req.iteration,
            snap,
        });
        let d = self.compute_time(id, ack.interval.len());
        self.set_act(id, Act::Help, Some(d));
        Ok(true)
    }

    fn finish_help(&mut self, id: usize) -> Result<()> {
        self.charge(id);
        let Some(Task::Help {
            straggler,
            iv,
            iteration,
            snap,
        }) = self.w[id].task.take()
        else {
            return Err(Error::Invariant(format!(
                "worker {id} finished help without a task"
            )));
        };
        let updates = self.process(&snap, iv, iteration)?;
        match self.w[id].rr.finish_help() {
            Some(done) if done.to == straggler && done.interval == iv => {
                self.shed_results.insert((id, iteration, iv), updates);
                self.send(done);
            }
            // cancelled in the meantime: results are dropped
            _ => self.stats.items_discarded += iv.len() as u64,
        }
        self.decide(id)
    }

    fn on_msg(&mut self, msg: ReassignmentMsg) -> Result<()> {
        let to = msg.to;
        match msg.kind {
            MsgKind::HelpRequest => {
                self.w[to].inbox.insert(msg.from, msg);
                let x = &self.w[to];
                if x.act.idle() && x.task.is_none() {
                    self.decide(to)?;
                }
            }
            MsgKind::HelpAck => {
                if self.w[to].spec.is_some() {
                    let c = ReassignmentMsg::new(
                        MsgKind::Cancel,
                        to,
                        msg.from,
                        msg.interval,
                        msg.iteration,
                    );
                    self.send(c);
                    return Ok(());
                }
                let before = self.w[to].rr.active_shed;
                let (state, out) = rr_step(&self.w[to].rr, &msg);
                let accepted =
                    before.is_none() && state.active_shed == Some((msg.from, msg.interval));
                self.w[to].rr = state;
                if accepted {
                    self.stats.sheds += 1;
                    self.w[to].disturbed = true;
                    debug!(
                        "t={} w{to} sheds {} to w{}",
                        self.now, msg.interval, msg.from
                    );
                }
                for m in out {
                    self.send(m);
                }
            }
            MsgKind::WorkDone => {
                let before = self.w[to].rr.active_shed;
                let (state, _) = rr_step(&self.w[to].rr, &msg);
                let matched = before == Some((msg.from, msg.interval))
                    && state.active_shed.is_none()
                    && msg.iteration == state.iteration;
                self.w[to].rr = state;
                let results = self
                    .shed_results
                    .remove(&(msg.from, msg.iteration, msg.interval));
                if matched {
                    let updates = results.ok_or_else(|| {
                        Error::Protocol(format!("WORK_DONE for {} without results", msg.interval))
                    })?;
                    self.commit(to, msg.iteration, msg.interval, updates)?;
                    self.w[to].done += msg.interval.len();
                    if self.w[to].act == Act::AwaitShed {
                        self.decide(to)?;
                    }
                } else {
                    self.stats.items_discarded += msg.interval.len() as u64;
                }
            }
            MsgKind::Cancel => {
                let before = self.w[to].rr.helping;
                let (state, _) = rr_step(&self.w[to].rr, &msg);
                self.w[to].rr = state;
                let running = matches!(
                    &self.w[to].task,
                    Some(Task::Help { straggler, iv, iteration, .. })
                        if *straggler == msg.from && *iv == msg.interval && *iteration == msg.iteration
                );
                if before == Some((msg.from, msg.interval, msg.iteration)) && running {
                    self.w[to].task = None;
                    self.stats.helps_aborted += 1;
                    self.decide(to)?;
                }
            }
        }
        Ok(())
    }

    /// Starts clones of lagging ranges on idle workers.
    fn scan_clones(&mut self) {
        if !self.has(MitigationFlag::Speculation) {
            return;
        }
        let iters: BTreeSet<u64> = self
            .w
            .iter()
            .filter(|x| x.in_iter)
            .map(|x| x.clock + 1)
            .collect();
        let policy = self.cfg.mitigation.clone_policy();
        for it in iters {
            let idle: BTreeSet<usize> = (0..self.w.len())
                .filter(|&p| {
                    let x = &self.w[p];
                    x.act.idle()
                        && x.task.is_none()
                        && x.spec.is_none()
                        && x.rr.active_shed.is_none()
                        && x.clock >= it
                })
                .collect();
            if idle.is_empty() {
                continue;
            }
            let cands: Vec<LagCandidate> = (0..self.w.len())
                .map(|p| {
                    let x = &self.w[p];
                    let eligible = x.in_iter && x.clock + 1 == it && x.spec.is_none();
                    LagCandidate {
                        report: ProgressReport {
                            worker: p,
                            iteration: it,
                            fraction_done: self.fraction(p, it),
                            timestamp: self.now,
                        },
                        remaining: if eligible {
                            x.rr.own
                        } else {
                            Interval::default()
                        },
                    }
                })
                .collect();
            for d in speculative_clone(&cands, &idle, &policy, self.active_clones) {
                let owner = d.task.worker;
                let snap = self.w[owner].snap.clone();
                self.w[owner].spec = Some(Spec {
                    task: d.task,
                    target: d.clone_target,
                    held: Vec::new(),
                });
                self.w[owner].disturbed = true;
                self.w[d.clone_target].task = Some(Task::Clone { task: d.task, snap });
                self.active_clones += 1;
                self.stats.clones += 1;
                debug!(
                    "t={} clone of w{owner} {} on w{}",
                    self.now, d.task.interval, d.clone_target
                );
                let dur = self.compute_time(d.clone_target, d.task.interval.len());
                self.set_act(d.clone_target, Act::Clone, Some(dur));
            }
        }
    }

    /// The original finished its cloned range itself.
    fn resolve_original(&mut self, id: usize) -> Result<()> {
        let Some(spec) = self.w[id].spec.take() else {
            return Ok(());
        };
        if self.arbiter.complete(spec.task, id, self.now) {
            self.active_clones -= 1;
            self.stats.original_wins += 1;
            self.commit(id, spec.task.iteration, spec.task.interval, spec.held)?;
            let at = self.now + self.cfg.timing.msg_latency_us;
            self.schedule(at, spec.target, Ev::CloneLost(spec.task));
        } else {
            self.stats.items_discarded += spec.task.interval.len() as u64;
        }
        Ok(())
    }

    fn finish_clone(&mut self, id: usize) -> Result<()> {
        self.charge(id);
        let Some(Task::Clone { task, snap }) = self.w[id].task.take() else {
            return Err(Error::Invariant(format!(
                "worker {id} finished a clone without a task"
            )));
        };
        let updates = self.process(&snap, task.interval, task.iteration)?;
        if self.arbiter.complete(task, id, self.now) {
            self.active_clones -= 1;
            self.stats.clone_wins += 1;
            self.commit(task.worker, task.iteration, task.interval, updates)?;
            let at = self.now + self.cfg.timing.msg_latency_us;
            self.schedule(at, task.worker, Ev::CloneLost(task));
        } else {
            self.stats.items_discarded += task.interval.len() as u64;
        }
        self.decide(id)
    }

    fn on_clone_lost(&mut self, id: usize, task: CloneTask) -> Result<()> {
        if matches!(&self.w[id].task, Some(Task::Clone { task: t, .. }) if *t == task) {
            // abandoned before any item was processed
            self.w[id].task = None;
            return self.decide(id);
        }
        let owns = matches!(&self.w[id].spec, Some(s) if s.task == task);
        if !owns {
            return Ok(());
        }
        let spec = self.w[id].spec.take().expect("checked above");
        let x = &mut self.w[id];
        let skipped = x.rr.own.len();
        x.rr.own.start = x.rr.own.end;
        x.done += skipped;
        let held = spec.held.len();
        self.stats.items_discarded += held as u64;
        if x.act == Act::Batch && task.interval.covers(&x.batch) {
            x.done += x.batch.len();
            x.batch = Interval::default();
            self.decide(id)?;
        }
        Ok(())
    }
}
