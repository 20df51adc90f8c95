//! Straggler mitigation: RapidReassignment-style work shedding between peers
//! and speculative cloning of lagging work.
//!
//! A straggler notices it is behind by comparing its own progress with the
//! median progress of its peers. It then broadcasts a help request naming the
//! interval it has not started yet; an idle peer claims the tail of that
//! interval and works on it from the end while the straggler keeps going from
//! the front. Cloning instead duplicates the straggler's whole remaining
//! interval on an idle worker and keeps whichever copy finishes first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bench::Ticks;
use crate::error::{Error, Result};

/// Half-open index interval `[start, end)` over the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Interval {
    pub start: usize,
    pub end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn covers(&self, other: &Interval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    /// The last `fraction` of the interval (rounded down), possibly empty.
    pub fn tail(&self, fraction: f64) -> Interval {
        let n = (self.len() as f64 * fraction).floor() as usize;
        Interval::new(self.end - n, self.end)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressReport {
    pub worker: usize,
    pub iteration: u64,
    pub fraction_done: f64,
    pub timestamp: Ticks,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// A worker is a straggler when the median of its peers' progress exceeds
/// its own by more than `threshold`.
pub fn detect_straggler(own: &ProgressReport, peers: &[ProgressReport], threshold: f64) -> bool {
    if peers.is_empty() {
        return false;
    }
    let m = median(peers.iter().map(|p| p.fraction_done).collect());
    m - own.fraction_done > threshold
}

/// Which worker owns which part of the dataset during one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkAssignment {
    pub iteration: u64,
    pub dataset_size: usize,
    pub ranges: BTreeMap<usize, Vec<Interval>>,
}

impl WorkAssignment {
    /// Consecutive blocks of the given sizes, worker 0 first.
    pub fn contiguous(iteration: u64, sizes: &[usize]) -> Self {
        let mut ranges = BTreeMap::new();
        let mut at = 0;
        for (w, &n) in sizes.iter().enumerate() {
            ranges.insert(w, vec![Interval::new(at, at + n)]);
            at += n;
        }
        Self {
            iteration,
            dataset_size: at,
            ranges,
        }
    }

    /// Near-equal split of `n` items across `workers`.
    pub fn even_sizes(n: usize, workers: usize) -> Vec<usize> {
        (0..workers)
            .map(|w| n / workers + usize::from(w < n % workers))
            .collect()
    }

    pub fn owner_of(&self, i: usize) -> Option<usize> {
        self.ranges
            .iter()
            .find(|(_, ivs)| ivs.iter().any(|iv| iv.contains(i)))
            .map(|(w, _)| *w)
    }

    pub fn owns(&self, worker: usize, iv: &Interval) -> bool {
        self.ranges
            .get(&worker)
            .is_some_and(|ivs| ivs.iter().any(|r| r.covers(iv)))
    }

    /// Checks that the intervals are pairwise disjoint and tile the dataset.
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<Interval> = self
            .ranges
            .values()
            .flatten()
            .copied()
            .filter(|iv| !iv.is_empty())
            .collect();
        all.sort();
        let mut at = 0;
        for iv in all {
            if iv.start != at {
                return Err(Error::Invariant(format!(
                    "assignment for iteration {} has {} at {at}",
                    self.iteration,
                    if iv.start < at { "overlap" } else { "gap" }
                )));
            }
            at = iv.end;
        }
        if at != self.dataset_size {
            return Err(Error::Invariant(format!(
                "assignment covers [0,{at}) of {}",
                self.dataset_size
            )));
        }
        Ok(())
    }

    fn transfer(&mut self, from: usize, to: usize, iv: Interval) {
        if let Some(ivs) = self.ranges.get_mut(&from) {
            let mut next = Vec::with_capacity(ivs.len() + 1);
            for r in ivs.drain(..) {
                if r.covers(&iv) {
                    next.push(Interval::new(r.start, iv.start));
                    next.push(Interval::new(iv.end, r.end));
                } else {
                    next.push(r);
                }
            }
            next.retain(|r| !r.is_empty());
            *ivs = next;
        }
        self.ranges.entry(to).or_default().push(iv);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgKind {
    HelpRequest,
    HelpAck,
    WorkDone,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ReassignmentMsg {
    pub kind: MsgKind,
    pub from: usize,
    pub to: usize,
    pub interval: Interval,
    pub iteration: u64,
}

impl ReassignmentMsg {
    pub fn new(kind: MsgKind, from: usize, to: usize, interval: Interval, iteration: u64) -> Self {
        Self {
            kind,
            from,
            to,
            interval,
            iteration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShedOutcome {
    pub assignment: WorkAssignment,
    pub messages: Vec<ReassignmentMsg>,
    /// The interval that moved to the helper, `None` when rejected.
    pub moved: Option<Interval>,
}

/// Moves the tail `shed_fraction` of the straggler's not-yet-started
/// interval `remaining` to `helper` for this iteration only.
///
/// If the tail is no longer owned by the straggler (another helper already
/// took it) the request is answered with CANCEL and nothing moves.
pub fn shed_work(
    straggler: usize,
    helper: usize,
    assignment: &WorkAssignment,
    remaining: Interval,
    shed_fraction: f64,
) -> Result<ShedOutcome> {
    if !(shed_fraction > 0.0 && shed_fraction <= 0.5) {
        return Err(Error::Config(format!(
            "shed_fraction {shed_fraction} outside (0, 0.5]"
        )));
    }
    let it = assignment.iteration;
    let tail = remaining.tail(shed_fraction);
    let request = ReassignmentMsg::new(MsgKind::HelpRequest, straggler, helper, remaining, it);
    if tail.is_empty() || !assignment.owns(straggler, &tail) {
        return Ok(ShedOutcome {
            assignment: assignment.clone(),
            messages: vec![
                request,
                ReassignmentMsg::new(MsgKind::Cancel, straggler, helper, tail, it),
            ],
            moved: None,
        });
    }
    let mut next = assignment.clone();
    next.transfer(straggler, helper, tail);
    Ok(ShedOutcome {
        assignment: next,
        messages: vec![
            request,
            ReassignmentMsg::new(MsgKind::HelpAck, helper, straggler, tail, it),
        ],
        moved: Some(tail),
    })
}

/// Per-worker RapidReassignment protocol state.
///
/// As a straggler the worker owns `own` (the part of its range it has not
/// started) and at most one `active_shed` handed to a helper. As a helper it
/// works on at most one claimed interval.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RrState {
    pub worker: usize,
    pub iteration: u64,
    pub dataset_size: usize,
    /// Tail claims are `floor(len * shed_fraction)`, stored in percent.
    pub shed_percent: u32,
    pub own: Interval,
    pub active_shed: Option<(usize, Interval)>,
    pub helping: Option<(usize, Interval, u64)>,
    pub idle: bool,
    /// Finished sheds as (iteration, helper, interval).
    pub completed: BTreeSet<(u64, usize, Interval)>,
    pub seen_requests: BTreeSet<(usize, u64, Interval)>,
    pub dropped: u64,
}

impl RrState {
    pub fn new(
        worker: usize,
        iteration: u64,
        own: Interval,
        dataset_size: usize,
        shed_fraction: f64,
    ) -> Self {
        Self {
            worker,
            iteration,
            dataset_size,
            shed_percent: (shed_fraction * 100.0).round() as u32,
            own,
            active_shed: None,
            helping: None,
            idle: own.is_empty(),
            completed: BTreeSet::new(),
            seen_requests: BTreeSet::new(),
            dropped: 0,
        }
    }

    pub fn shed_fraction(&self) -> f64 {
        self.shed_percent as f64 / 100.0
    }

    /// The help request a straggler broadcasts to `peers`, if it has
    /// something to shed and no shed in flight.
    pub fn request_help(&self, peers: &[usize]) -> Vec<ReassignmentMsg> {
        if self.active_shed.is_some() || self.own.tail(self.shed_fraction()).is_empty() {
            return Vec::new();
        }
        peers
            .iter()
            .filter(|p| **p != self.worker)
            .map(|p| {
                ReassignmentMsg::new(
                    MsgKind::HelpRequest,
                    self.worker,
                    *p,
                    self.own,
                    self.iteration,
                )
            })
            .collect()
    }

    /// Helper finished its claimed interval.
    pub fn finish_help(&mut self) -> Option<ReassignmentMsg> {
        let (straggler, iv, it) = self.helping.take()?;
        Some(ReassignmentMsg::new(
            MsgKind::WorkDone,
            self.worker,
            straggler,
            iv,
            it,
        ))
    }

    /// Straggler-side: advance the front of the unstarted interval.
    pub fn consume_front(&mut self, n: usize) -> Interval {
        let take = n.min(self.own.len());
        let iv = Interval::new(self.own.start, self.own.start + take);
        self.own.start += take;
        iv
    }

    pub fn is_finished(&self) -> bool {
        self.own.is_empty() && self.active_shed.is_none()
    }
}

fn malformed(state: &RrState, msg: &ReassignmentMsg) -> bool {
    msg.interval.is_empty() || msg.interval.end > state.dataset_size || msg.to != state.worker
}

/// Applies one protocol message to `state`, returning the successor state and
/// any replies. Malformed messages are dropped and counted; duplicate and
/// stale messages leave the state unchanged.
pub fn rr_step(state: &RrState, msg: &ReassignmentMsg) -> (RrState, Vec<ReassignmentMsg>) {
    let mut s = state.clone();
    if malformed(state, msg) {
        s.dropped += 1;
        return (s, Vec::new());
    }
    let mut out = Vec::new();
    match msg.kind {
        MsgKind::HelpRequest => {
            let key = (msg.from, msg.iteration, msg.interval);
            if s.idle && s.helping.is_none() && !s.seen_requests.contains(&key) {
                let tail = msg.interval.tail(s.shed_fraction());
                if !tail.is_empty() {
                    s.seen_requests.insert(key);
                    s.helping = Some((msg.from, tail, msg.iteration));
                    out.push(ReassignmentMsg::new(
                        MsgKind::HelpAck,
                        s.worker,
                        msg.from,
                        tail,
                        msg.iteration,
                    ));
                }
            }
        }
        MsgKind::HelpAck => {
            let tail = msg.interval;
            if s.active_shed == Some((msg.from, tail))
                || s.completed.contains(&(msg.iteration, msg.from, tail))
            {
                // duplicate
            } else if msg.iteration == s.iteration
                && s.active_shed.is_none()
                && tail.end == s.own.end
                && tail.start >= s.own.start
            {
                s.own.end = tail.start;
                s.active_shed = Some((msg.from, tail));
            } else {
                out.push(ReassignmentMsg::new(
                    MsgKind::Cancel,
                    s.worker,
                    msg.from,
                    tail,
                    msg.iteration,
                ));
            }
        }
        MsgKind::WorkDone => {
            if msg.iteration == s.iteration && s.active_shed == Some((msg.from, msg.interval)) {
                s.active_shed = None;
                s.completed.insert((msg.iteration, msg.from, msg.interval));
            }
        }
        MsgKind::Cancel => {
            if s.helping == Some((msg.from, msg.interval, msg.iteration)) {
                s.helping = None;
            }
        }
    }
    (s, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClonePolicy {
    /// Minimum gap between the median peer progress and the laggard's.
    pub lag_threshold: f64,
    pub max_clones: usize,
}

impl Default for ClonePolicy {
    fn default() -> Self {
        Self {
            lag_threshold: 0.25,
            max_clones: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CloneTask {
    pub worker: usize,
    pub interval: Interval,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CloneDecision {
    pub task: CloneTask,
    pub clone_target: usize,
    pub winner: Option<usize>,
}

/// Progress of a worker together with the interval it has not started yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagCandidate {
    pub report: ProgressReport,
    pub remaining: Interval,
}

/// Picks laggards to clone onto idle workers, most-lagging first, up to
/// `max_clones` concurrently (counting `already_active`).
pub fn speculative_clone(
    candidates: &[LagCandidate],
    idle: &BTreeSet<usize>,
    policy: &ClonePolicy,
    already_active: usize,
) -> Vec<CloneDecision> {
    let budget = policy.max_clones.saturating_sub(already_active);
    if budget == 0 || idle.is_empty() || candidates.len() < 2 {
        return Vec::new();
    }
    let mut lags: Vec<(f64, &LagCandidate)> = candidates
        .iter()
        .filter(|c| !c.remaining.is_empty() && !idle.contains(&c.report.worker))
        .map(|c| {
            let peers: Vec<f64> = candidates
                .iter()
                .filter(|p| p.report.worker != c.report.worker)
                .map(|p| p.report.fraction_done)
                .collect();
            (median(peers) - c.report.fraction_done, c)
        })
        .filter(|(lag, _)| *lag > policy.lag_threshold)
        .collect();
    lags.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.report.worker.cmp(&b.1.report.worker))
    });
    lags.into_iter()
        .zip(idle.iter())
        .take(budget)
        .map(|((_, c), &target)| CloneDecision {
            task: CloneTask {
                worker: c.report.worker,
                interval: c.remaining,
                iteration: c.report.iteration,
            },
            clone_target: target,
            winner: None,
        })
        .collect()
}

/// Resolves original-versus-clone races: the first completion reported for
/// a task wins, equal timestamps go to the lower worker id.
#[derive(Debug, Default)]
pub struct CommitArbiter {
    winners: BTreeMap<CloneTask, (Ticks, usize)>,
}

impl CommitArbiter {
    /// Records that `worker` finished `task` at `time`; returns true when
    /// this completion is the one to commit.
    pub fn complete(&mut self, task: CloneTask, worker: usize, time: Ticks) -> bool {
        match self.winners.get(&task) {
            None => {
                self.winners.insert(task, (time, worker));
                true
            }
            Some(&(t, w)) => {
                if (time, worker) < (t, w) {
                    // arrived out of order but earlier; callers deliver in
                    // time order, so this only happens on exact ties
                    self.winners.insert(task, (time, worker));
                }
                false
            }
        }
    }

    pub fn winner(&self, task: &CloneTask) -> Option<usize> {
        self.winners.get(task).map(|(_, w)| *w)
    }
}

/// Tracks which dataset items have committed updates in one iteration.
#[derive(Debug, Clone)]
pub struct CommitLedger {
    iteration: u64,
    committed: Vec<bool>,
    count: usize,
}

impl CommitLedger {
    pub fn new(iteration: u64, dataset_size: usize) -> Self {
        Self {
            iteration,
            committed: vec![false; dataset_size],
            count: 0,
        }
    }

    pub fn commit(&mut self, iv: Interval) -> Result<()> {
        if iv.end > self.committed.len() {
            return Err(Error::Invariant(format!(
                "iteration {}: commit {iv} beyond dataset",
                self.iteration
            )));
        }
        for i in iv.start..iv.end {
            if self.committed[i] {
                return Err(Error::Invariant(format!(
                    "iteration {}: item {i} committed twice",
                    self.iteration
                )));
            }
            self.committed[i] = true;
        }
        self.count += iv.len();
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.count == self.committed.len()
    }

    pub fn check_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            let missing = self.committed.iter().position(|c| !c).unwrap_or(0);
            Err(Error::Invariant(format!(
                "iteration {}: {} of {} items committed, first missing {missing}",
                self.iteration,
                self.count,
                self.committed.len()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(worker: usize, f: f64) -> ProgressReport {
        ProgressReport {
            worker,
            iteration: 1,
            fraction_done: f,
            timestamp: 0,
        }
    }

    #[test]
    fn detection_examples() {
        let peers = [rep(1, 0.9), rep(2, 0.9)];
        assert!(!detect_straggler(&rep(0, 0.9), &peers, 0.25));
        let peers = [rep(1, 0.7), rep(2, 0.8), rep(3, 0.9)];
        assert!(detect_straggler(&rep(0, 0.2), &peers, 0.25));
        assert!(!detect_straggler(&rep(0, 0.55), &peers, 0.25));
        assert!(!detect_straggler(&rep(0, 0.0), &[], 0.25));
    }

    #[test]
    fn tail_split() {
        let a = WorkAssignment::contiguous(1, &[100, 100]);
        let out = shed_work(0, 1, &a, Interval::new(40, 100), 0.25).unwrap();
        assert_eq!(out.moved, Some(Interval::new(85, 100)));
        assert_eq!(out.assignment.ranges[&0], vec![Interval::new(0, 85)]);
        assert!(out.assignment.ranges[&1].contains(&Interval::new(85, 100)));
        out.assignment.validate().unwrap();
        assert_eq!(out.messages[1].kind, MsgKind::HelpAck);
    }

    #[test]
    fn shed_fraction_bounds() {
        let a = WorkAssignment::contiguous(1, &[100, 100]);
        assert!(shed_work(0, 1, &a, Interval::new(0, 100), 0.0).is_err());
        assert!(shed_work(0, 1, &a, Interval::new(0, 100), 0.6).is_err());
        assert!(shed_work(0, 1, &a, Interval::new(0, 100), 0.5).is_ok());
    }

    #[test]
    fn racing_helpers_get_one_ack() {
        let a = WorkAssignment::contiguous(1, &[100, 50, 50]);
        let first = shed_work(0, 1, &a, Interval::new(40, 100), 0.25).unwrap();
        let second = shed_work(0, 2, &first.assignment, Interval::new(40, 100), 0.25).unwrap();
        assert_eq!(first.messages[1].kind, MsgKind::HelpAck);
        assert_eq!(second.messages[1].kind, MsgKind::Cancel);
        assert_eq!(second.moved, None);
        assert_eq!(second.assignment, first.assignment);
    }

    #[test]
    fn idle_helper_acks_request() {
        let h = RrState::new(1, 1, Interval::default(), 100, 0.25);
        let req = ReassignmentMsg::new(MsgKind::HelpRequest, 0, 1, Interval::new(40, 100), 1);
        let (h2, out) = rr_step(&h, &req);
        assert_eq!(
            out,
            vec![ReassignmentMsg::new(
                MsgKind::HelpAck,
                1,
                0,
                Interval::new(85, 100),
                1
            )]
        );
        assert_eq!(h2.helping, Some((0, Interval::new(85, 100), 1)));
        // busy worker ignores requests
        let busy = RrState::new(2, 1, Interval::new(0, 10), 100, 0.25);
        let (b2, out) = rr_step(&busy, &ReassignmentMsg { to: 2, ..req });
        assert!(out.is_empty());
        assert_eq!(b2, busy);
    }

    #[test]
    fn work_done_after_cancel_is_ignored() {
        let mut s = RrState::new(0, 1, Interval::new(40, 100), 100, 0.25);
        s.completed.insert((1, 1, Interval::new(85, 100)));
        let done = ReassignmentMsg::new(MsgKind::WorkDone, 1, 0, Interval::new(85, 100), 1);
        let (s2, out) = rr_step(&s, &done);
        assert_eq!(s2, s);
        assert!(out.is_empty());
    }

    #[test]
    fn late_ack_for_finished_tail_is_cancelled() {
        let mut s = RrState::new(0, 1, Interval::new(40, 85), 100, 0.25);
        s.completed.insert((1, 1, Interval::new(85, 100)));
        let dup = ReassignmentMsg::new(MsgKind::HelpAck, 1, 0, Interval::new(85, 100), 1);
        assert!(rr_step(&s, &dup).1.is_empty());
        let other = ReassignmentMsg { from: 2, ..dup };
        let (s2, out) = rr_step(&s, &other);
        assert_eq!(s2.own, s.own);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, MsgKind::Cancel);
        assert_eq!(out[0].to, 2);
    }

    #[test]
    fn malformed_messages_are_dropped_and_counted() {
        let s = RrState::new(0, 1, Interval::new(0, 10), 10, 0.25);
        let (s2, out) = rr_step(
            &s,
            &ReassignmentMsg::new(MsgKind::HelpAck, 1, 0, Interval::new(5, 5), 1),
        );
        assert!(out.is_empty());
        assert_eq!(s2.dropped, 1);
        let (s3, _) = rr_step(
            &s2,
            &ReassignmentMsg::new(MsgKind::HelpAck, 1, 0, Interval::new(5, 20), 1),
        );
        assert_eq!(s3.dropped, 2);
    }

    #[test]
    fn straggler_accepts_first_ack_and_cancels_second() {
        let s = RrState::new(0, 1, Interval::new(40, 100), 100, 0.25);
        let ack1 = ReassignmentMsg::new(MsgKind::HelpAck, 1, 0, Interval::new(85, 100), 1);
        let ack2 = ReassignmentMsg::new(MsgKind::HelpAck, 2, 0, Interval::new(85, 100), 1);
        let (s1, out1) = rr_step(&s, &ack1);
        assert!(out1.is_empty());
        assert_eq!(s1.own, Interval::new(40, 85));
        let (s2, out2) = rr_step(&s1, &ack2);
        assert_eq!(out2[0].kind, MsgKind::Cancel);
        assert_eq!(out2[0].to, 2);
        assert_eq!(s2, s1);
        // replaying the accepted ack changes nothing
        assert_eq!(rr_step(&s1, &ack1), (s1.clone(), vec![]));
    }

    #[test]
    fn clone_policy_truth_table() {
        let idle: BTreeSet<usize> = [3].into();
        let pol = ClonePolicy::default();
        let even: Vec<LagCandidate> = (0..3)
            .map(|w| LagCandidate {
                report: rep(w, 0.5),
                remaining: Interval::new(w * 10 + 5, w * 10 + 10),
            })
            .collect();
        assert!(speculative_clone(&even, &idle, &pol, 0).is_empty());

        let mut lagging = even.clone();
        lagging[0].report.fraction_done = 0.3;
        lagging[1].report.fraction_done = 1.0;
        lagging[2].report.fraction_done = 1.0;
        let d = speculative_clone(&lagging, &idle, &pol, 0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].task.worker, 0);
        assert_eq!(d[0].task.interval, Interval::new(5, 10));
        assert_eq!(d[0].clone_target, 3);
        assert!(speculative_clone(&lagging, &BTreeSet::new(), &pol, 0).is_empty());
        assert!(speculative_clone(&lagging, &idle, &pol, 1).is_empty());
    }

    #[test]
    fn arbiter_first_wins_ties_to_lower_id() {
        let task = CloneTask {
            worker: 2,
            interval: Interval::new(0, 5),
            iteration: 1,
        };
        let mut arb = CommitArbiter::default();
        assert!(arb.complete(task, 5, 100));
        assert!(!arb.complete(task, 2, 120));
        assert_eq!(arb.winner(&task), Some(5));
        let mut tie = CommitArbiter::default();
        tie.complete(task, 5, 100);
        tie.complete(task, 2, 100);
        assert_eq!(tie.winner(&task), Some(2));
    }

    #[test]
    fn ledger_detects_double_and_missing() {
        let mut l = CommitLedger::new(1, 10);
        l.commit(Interval::new(0, 6)).unwrap();
        assert!(l.check_complete().is_err());
        assert!(l.commit(Interval::new(5, 7)).is_err());
        let mut l = CommitLedger::new(1, 10);
        l.commit(Interval::new(0, 6)).unwrap();
        l.commit(Interval::new(6, 10)).unwrap();
        l.check_complete().unwrap();
    }
}
