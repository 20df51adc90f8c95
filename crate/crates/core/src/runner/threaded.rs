//! Free-running execution on OS threads against the host clock.
//!
//! One thread per worker. Item updates are computed for real; the modelled
//! item cost, communication cost and injected delays are slept off so the
//! time split matches the virtual engine's cost model. Work shedding runs over
//! per-worker channels: stragglers poll between mini-batches, helpers poll
//! while blocked on a barrier.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::debug;

use super::config::ExperimentConfig;
use super::{ClockEvent, Cluster, Partial, RunOutput, RunStats};
use crate::bench::{IterationRecord, Ticks};
use crate::consistency::{MitigationFlag, SyncPolicy};
use crate::error::{Error, Result};
use crate::injector::{inject_straggler, DisruptionSchedule};
use crate::mitigation::{
    detect_straggler, rr_step, CommitLedger, Interval, MsgKind, ProgressReport, ReassignmentMsg,
    RrState,
};
use crate::paramserver::ParameterServer;
use crate::workloads::{ItemUpdate, Workload};

const POLL: Duration = Duration::from_micros(500);

struct Envelope {
    msg: ReassignmentMsg,
    /// Results travelling with WORK_DONE.
    results: Option<Vec<ItemUpdate>>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Progress {
    clock: u64,
    in_iter: bool,
    done: usize,
    len: usize,
    /// In an iteration with a sheddable tail and no shed in flight.
    open: bool,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    policy: SyncPolicy,
    wl: &'a dyn Workload,
    ps: &'a ParameterServer,
    start: Instant,
    batches: usize,
    disruption: Option<DisruptionSchedule>,
    progress: Vec<Mutex<Progress>>,
    snaps: Vec<Mutex<Arc<Vec<f64>>>>,
    senders: Vec<Sender<Envelope>>,
    ledgers: Mutex<BTreeMap<u64, CommitLedger>>,
    stats: Mutex<RunStats>,
    abort: AtomicBool,
    last_clock: Mutex<Ticks>,
    trace: Mutex<Vec<ClockEvent>>,
}

impl Shared<'_> {
    fn now(&self) -> Ticks {
        self.start.elapsed().as_micros() as Ticks
    }

    fn sleep_until(&self, t: Ticks) {
        loop {
            let now = self.now();
            if now >= t {
                return;
            }
            thread::sleep(Duration::from_micros(t - now));
        }
    }

    fn send(&self, msg: ReassignmentMsg, results: Option<Vec<ItemUpdate>>) {
        if msg.kind == MsgKind::Cancel {
            self.stats.lock().unwrap().cancels += 1;
        }
        // a closed channel means the peer already exited
        let _ = self.senders[msg.to].send(Envelope { msg, results });
    }

    fn fraction(&self, p: usize, it: u64) -> f64 {
        let x = *self.progress[p].lock().unwrap();
        if x.clock >= it {
            1.0
        } else if x.in_iter && x.clock + 1 == it {
            if x.len == 0 {
                1.0
            } else {
                x.done as f64 / x.len as f64
            }
        } else {
            0.0
        }
    }

    fn commit(
        &self,
        owner: usize,
        iteration: u64,
        iv: Interval,
        updates: Vec<ItemUpdate>,
    ) -> Result<()> {
        self.ledgers
            .lock()
            .unwrap()
            .entry(iteration)
            .or_insert_with(|| CommitLedger::new(iteration, self.wl.num_items()))
            .commit(iv)?;
        let mut clamped = 0;
        for u in updates {
            self.ps
                .add_update(owner, u.item as u64, &u.keys, &u.values)?;
            if let Some(local) = u.local {
                self.wl.commit_local(u.item, local);
            }
            clamped += u.clamped;
        }
        self.stats.lock().unwrap().clamped += clamped;
        Ok(())
    }

    fn process(&self, snap: &[f64], iv: Interval, iteration: u64) -> Result<Vec<ItemUpdate>> {
        self.stats.lock().unwrap().items_processed += iv.len() as u64;
        (iv.start..iv.end)
            .map(|item| self.wl.process_item(snap, item, iteration))
            .collect()
    }

    /// End of the modelled compute for `items` started at `from`.
    fn compute_end(&self, id: usize, from: Ticks, items: usize) -> Ticks {
        let work = items as Ticks * self.wl.item_cost();
        match &self.disruption {
            Some(d) => d.finish_time(id, from, work),
            None => from + work,
        }
    }

    fn check_timeout(&self) -> Result<()> {
        if self.abort.load(Ordering::SeqCst) {
            return Err(Error::Deadlock("aborted by another worker".into()));
        }
        let idle = self.now().saturating_sub(*self.last_clock.lock().unwrap());
        if idle as f64 > self.cfg.timing.real_deadlock_timeout_s * 1e6 {
            return Err(Error::Deadlock(format!(
                "no clock advance for {idle} us; clocks {:?}",
                self.ps.view().clocks()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Bucket {
    Comp,
    Comm,
    Wait,
}

struct Local<'s, 'a> {
    sh: &'s Shared<'a>,
    id: usize,
    rx: Receiver<Envelope>,
    base: Interval,
    rr: RrState,
    rec: IterationRecord,
    records: Vec<IterationRecord>,
    inbox: BTreeMap<usize, ReassignmentMsg>,
    mark: Ticks,
    nominal: Ticks,
    clock: u64,
}

pub(crate) fn run_real(
    cfg: &ExperimentConfig,
    cluster: &Cluster,
) -> std::result::Result<RunOutput, Partial> {
    let policy = cfg.policy();
    if policy.has(MitigationFlag::Speculation) {
        return Err(Error::UnsupportedMode("speculation with the real clock").into());
    }
    let workers = cfg.workers;
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..workers).map(|_| channel()).unzip();
    let sh = Shared {
        cfg,
        policy,
        wl: cluster.workload.as_ref(),
        ps: &cluster.ps,
        start: Instant::now(),
        batches: cfg.mitigation.batches(),
        disruption: DisruptionSchedule::new(&cfg.straggler, workers, cfg.workers_per_machine),
        progress: (0..workers)
            .map(|_| Mutex::new(Progress::default()))
            .collect(),
        snaps: (0..workers)
            .map(|_| Mutex::new(Arc::new(Vec::new())))
            .collect(),
        senders,
        ledgers: Mutex::new(BTreeMap::new()),
        stats: Mutex::new(RunStats::default()),
        abort: AtomicBool::new(false),
        last_clock: Mutex::new(0),
        trace: Mutex::new(Vec::new()),
    };
    let comm = cfg.timing.comm_get_us + cfg.timing.comm_add_us;
    type Outcome = (
        Result<Ticks>,
        Vec<IterationRecord>,
        u64,
        Option<Receiver<Envelope>>,
    );
    let outcomes: Vec<Outcome> = thread::scope(|s| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(id, rx)| {
                let sh = &sh;
                let base = cluster.ranges[id];
                s.spawn(move || {
                    let mut w = Local {
                        sh,
                        id,
                        rx,
                        base,
                        rr: RrState::new(
                            id,
                            1,
                            base,
                            sh.wl.num_items(),
                            cfg.mitigation.shed_fraction,
                        ),
                        rec: IterationRecord::new(id, 1),
                        records: Vec::new(),
                        inbox: BTreeMap::new(),
                        mark: 0,
                        nominal: base.len() as Ticks * sh.wl.item_cost() + comm,
                        clock: 0,
                    };
                    let res = w.run();
                    if res.is_err() {
                        sh.abort.store(true, Ordering::SeqCst);
                    }
                    let mut records = w.records;
                    if res.is_ok() {
                        records.push(w.rec);
                    }
                    (res, records, w.rr.dropped, Some(w.rx))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    (
                        Err(Error::Invariant("worker thread panicked".into())),
                        Vec::new(),
                        0,
                        None,
                    )
                })
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut makespan = 0;
    let mut first_err = None;
    let mut dropped = 0;
    let mut unclaimed = 0;
    for (res, recs, d, rx) in outcomes {
        records.extend(recs);
        dropped += d;
        // help results whose WORK_DONE arrived after the owner exited
        for env in rx.iter().flat_map(|rx| rx.try_iter()) {
            if env.results.is_some() {
                unclaimed += env.msg.interval.len() as u64;
            }
        }
        match res {
            Ok(t) => makespan = makespan.max(t),
            Err(e) => {
                // a real failure beats the aborts it caused in other workers
                let secondary = matches!(&e, Error::Deadlock(m) if m.starts_with("aborted"));
                if first_err.is_none()
                    || (!secondary
                        && matches!(&first_err, Some(Error::Deadlock(m)) if m.starts_with("aborted")))
                {
                    first_err = Some(e);
                }
            }
        }
    }
    records.sort_by_key(|r| (r.iteration, r.worker));
    if let Some(error) = first_err {
        return Err(Partial { error, records });
    }
    if let Err(error) = sh
        .ledgers
        .lock()
        .unwrap()
        .values()
        .try_for_each(|l| l.check_complete())
    {
        return Err(Partial { error, records });
    }
    let mut stats = sh.stats.into_inner().unwrap();
    stats.dropped = dropped;
    stats.items_discarded += unclaimed;
    Ok(RunOutput {
        records,
        trace: sh.trace.into_inner().unwrap(),
        makespan,
        max_gap: cluster.ps.board().max_gap(),
        stats,
    })
}

impl Local<'_, '_> {
    fn charge(&mut self, b: Bucket) {
        let now = self.sh.now();
        let d = now.saturating_sub(self.mark);
        self.mark = now;
        match b {
            Bucket::Comp => self.rec.comp_ticks += d,
            Bucket::Comm => self.rec.comm_ticks += d,
            Bucket::Wait => self.rec.wait_ticks += d,
        }
    }

    fn has_rr(&self) -> bool {
        self.sh.policy.has(MitigationFlag::Reassignment)
    }

    fn publish(&self, in_iter: bool, done: usize) {
        let open = in_iter
            && self.rr.active_shed.is_none()
            && !self.rr.own.tail(self.rr.shed_fraction()).is_empty();
        *self.sh.progress[self.id].lock().unwrap() = Progress {
            clock: self.clock,
            in_iter,
            done,
            len: self.base.len(),
            open,
        };
    }

    /// Returns the time this worker finished its last iteration.
    fn run(&mut self) -> Result<Ticks> {
        let n = self.sh.cfg.iterations;
        let mut finished_at = 0;
        self.mark = self.sh.now();
        for it in 1..=n {
            let ps = self.sh.ps;
            let id = self.id;
            self.serve_until(|| ps.admitted(id).unwrap_or(false))?;
            self.iteration(it)?;
            finished_at = self.sh.now();
            if it < n {
                let next = IterationRecord::new(self.id, it + 1);
                let rec = std::mem::replace(&mut self.rec, next);
                self.records.push(rec);
            }
        }
        let ps = self.sh.ps;
        self.serve_until(|| ps.view().min_clock() >= n)?;
        Ok(finished_at)
    }

    fn iteration(&mut self, it: u64) -> Result<()> {
        let sh = self.sh;
        let cfg = sh.cfg;
        let plan = inject_straggler(self.id, it, self.nominal, sh.batches + 2, &cfg.straggler)?;
        sh.stats.lock().unwrap().injected_delay_ticks += plan.total_delay;
        let mut rr = RrState::new(
            self.id,
            it,
            self.base,
            sh.wl.num_items(),
            cfg.mitigation.shed_fraction,
        );
        rr.seen_requests = std::mem::take(&mut self.rr.seen_requests);
        rr.dropped = self.rr.dropped;
        self.rr = rr;
        let mut disturbed = plan.total_delay > 0;
        let mut done = 0;
        self.publish(true, 0);

        sh.sleep_until(sh.now() + plan.at(0));
        self.charge(Bucket::Comp);
        let snap = Arc::new(sh.ps.try_snapshot(self.id)?.ok_or_else(|| {
            Error::Invariant(format!("worker {} admitted but refused a read", self.id))
        })?);
        *sh.snaps[self.id].lock().unwrap() = snap.clone();
        sh.sleep_until(sh.now() + cfg.timing.comm_get_us);
        self.charge(Bucket::Comm);

        let batch_size = self.base.len().div_ceil(sh.batches).max(1);
        let mut own_work = 0;
        let mut k = 0;
        while !self.rr.own.is_empty() {
            k += 1;
            let iv = self.rr.consume_front(batch_size);
            let t0 = sh.now();
            let updates = sh.process(&snap, iv, it)?;
            sh.commit(self.id, it, iv, updates)?;
            let end = sh.compute_end(self.id, t0, iv.len());
            sh.sleep_until(end);
            own_work += sh.now() - t0;
            sh.sleep_until(sh.now() + plan.at(k.min(sh.batches)));
            self.charge(Bucket::Comp);
            done += iv.len();
            self.publish(true, done);
            while let Ok(env) = self.rx.try_recv() {
                if self.on_message(env, it, &mut done, &mut disturbed)? {
                    self.publish(true, done);
                }
            }
            self.maybe_request_help(it, done);
        }
        while self.rr.active_shed.is_some() {
            sh.check_timeout()?;
            match self.rx.recv_timeout(POLL) {
                Ok(env) => {
                    self.on_message(env, it, &mut done, &mut disturbed)?;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol("inbox closed".into()))
                }
            }
        }
        self.charge(Bucket::Wait);
        self.publish(true, self.base.len());

        sh.sleep_until(sh.now() + plan.at(sh.batches + 1));
        self.charge(Bucket::Comp);
        sh.sleep_until(sh.now() + cfg.timing.comm_add_us);
        self.charge(Bucket::Comm);
        {
            // hold the trace lock so trace order matches the server's order
            let mut trace = sh.trace.lock().unwrap();
            sh.ps.clock(self.id)?;
            trace.push(ClockEvent {
                time: sh.now(),
                worker: self.id,
                clock: it,
            });
        }
        self.clock = it;
        *sh.last_clock.lock().unwrap() = sh.now();
        if !disturbed {
            self.nominal = own_work + cfg.timing.comm_get_us + cfg.timing.comm_add_us;
        }
        self.publish(false, 0);
        debug!("w{} clock {it}", self.id);
        Ok(())
    }

    /// Straggler-side handling; returns true when committed progress moved.
    fn on_message(
        &mut self,
        env: Envelope,
        it: u64,
        done: &mut usize,
        disturbed: &mut bool,
    ) -> Result<bool> {
        let msg = env.msg;
        match msg.kind {
            MsgKind::HelpRequest => {
                self.inbox.insert(msg.from, msg);
            }
            MsgKind::HelpAck => {
                let before = self.rr.active_shed;
                let (state, out) = rr_step(&self.rr, &msg);
                if before.is_none() && state.active_shed == Some((msg.from, msg.interval)) {
                    self.sh.stats.lock().unwrap().sheds += 1;
                    *disturbed = true;
                }
                self.rr = state;
                for m in out {
                    self.sh.send(m, None);
                }
            }
            MsgKind::WorkDone => {
                let before = self.rr.active_shed;
                let (state, _) = rr_step(&self.rr, &msg);
                let matched = before == Some((msg.from, msg.interval))
                    && state.active_shed.is_none()
                    && msg.iteration == it;
                self.rr = state;
                if matched {
                    let updates = env.results.ok_or_else(|| {
                        Error::Protocol(format!("WORK_DONE for {} without results", msg.interval))
                    })?;
                    self.sh.commit(self.id, it, msg.interval, updates)?;
                    *done += msg.interval.len();
                    return Ok(true);
                }
                self.sh.stats.lock().unwrap().items_discarded += msg.interval.len() as u64;
            }
            MsgKind::Cancel => {
                let (state, _) = rr_step(&self.rr, &msg);
                self.rr = state;
            }
        }
        Ok(false)
    }

    fn maybe_request_help(&mut self, it: u64, done: usize) {
        if !self.has_rr()
            || self.rr.active_shed.is_some()
            || self.rr.own.tail(self.rr.shed_fraction()).is_empty()
        {
            return;
        }
        let now = self.sh.now();
        let frac = if self.base.is_empty() {
            1.0
        } else {
            done as f64 / self.base.len() as f64
        };
        let own = ProgressReport {
            worker: self.id,
            iteration: it,
            fraction_done: frac,
            timestamp: now,
        };
        let workers = self.sh.cfg.workers;
        let peers: Vec<ProgressReport> = (0..workers)
            .filter(|p| *p != self.id)
            .map(|p| ProgressReport {
                worker: p,
                iteration: it,
                fraction_done: self.sh.fraction(p, it),
                timestamp: now,
            })
            .collect();
        if !detect_straggler(&own, &peers, self.sh.cfg.mitigation.detect_threshold) {
            return;
        }
        let ids: Vec<usize> = (0..workers).collect();
        let msgs = self.rr.request_help(&ids);
        if !msgs.is_empty() {
            self.sh.stats.lock().unwrap().help_requests += 1;
        }
        for m in msgs {
            self.sh.send(m, None);
        }
    }

    /// Blocks until `ready` holds, helping stragglers in the meantime.
    fn serve_until(&mut self, ready: impl Fn() -> bool) -> Result<()> {
        loop {
            if ready() {
                self.charge(Bucket::Wait);
                return Ok(());
            }
            self.sh.check_timeout()?;
            if self.try_help()? {
                continue;
            }
            match self.rx.recv_timeout(POLL) {
                Ok(env) => match env.msg.kind {
                    MsgKind::HelpRequest => {
                        self.inbox.insert(env.msg.from, env.msg);
                    }
                    _ => {
                        let (state, out) = rr_step(&self.rr, &env.msg);
                        self.rr = state;
                        for m in out {
                            self.sh.send(m, None);
                        }
                    }
                },
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(Error::Protocol("inbox closed".into()))
                }
            }
        }
    }

    fn try_help(&mut self) -> Result<bool> {
        if !self.has_rr() || self.inbox.is_empty() {
            return Ok(false);
        }
        let sh = self.sh;
        let clock = self.clock;
        self.inbox
            .retain(|_, r| sh.progress[r.from].lock().unwrap().clock < r.iteration);
        let pick = self
            .inbox
            .values()
            .filter(|r| {
                let p = *sh.progress[r.from].lock().unwrap();
                clock >= r.iteration && p.open && p.clock + 1 == r.iteration
            })
            .min_by_key(|r| (r.iteration, r.from))
            .copied();
        let Some(req) = pick else { return Ok(false) };
        self.inbox.remove(&req.from);
        self.charge(Bucket::Wait);
        let mut idle = self.rr.clone();
        idle.idle = true;
        let (mut state, out) = rr_step(&idle, &req);
        state.idle = false;
        self.rr = state;
        let Some(ack) = out.into_iter().find(|m| m.kind == MsgKind::HelpAck) else {
            return Ok(false);
        };
        sh.send(ack, None);
        sh.stats.lock().unwrap().help_acks += 1;
        let snap = sh.snaps[req.from].lock().unwrap().clone();
        let chunk = ack.interval.len().div_ceil(4).max(1);
        let mut updates = Vec::with_capacity(ack.interval.len());
        let mut at = ack.interval.start;
        while at < ack.interval.end {
            let iv = Interval::new(at, (at + chunk).min(ack.interval.end));
            let t0 = sh.now();
            updates.extend(sh.process(&snap, iv, req.iteration)?);
            sh.sleep_until(sh.compute_end(self.id, t0, iv.len()));
            at = iv.end;
            while let Ok(env) = self.rx.try_recv() {
                match env.msg.kind {
                    MsgKind::HelpRequest => {
                        self.inbox.insert(env.msg.from, env.msg);
                    }
                    _ => {
                        let (state, out) = rr_step(&self.rr, &env.msg);
                        self.rr = state;
                        for m in out {
                            sh.send(m, None);
                        }
                    }
                }
            }
            if self.rr.helping.is_none() {
                sh.stats.lock().unwrap().helps_aborted += 1;
                self.charge(Bucket::Comp);
                return Ok(true);
            }
        }
        self.charge(Bucket::Comp);
        if let Some(done) = self.rr.finish_help() {
            sh.send(done, Some(updates));
        }
        Ok(true)
    }
}
