//! Synchronization policies: BSP barriers and SSP slack-bounded admission.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyncMode {
    Bsp,
    Ssp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MitigationFlag {
    Reassignment,
    Speculation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncPolicy {
    pub mode: SyncMode,
    pub slack: u64,
    pub mitigation: BTreeSet<MitigationFlag>,
}

impl SyncPolicy {
    pub fn bsp() -> Self {
        Self {
            mode: SyncMode::Bsp,
            slack: 0,
            mitigation: BTreeSet::new(),
        }
    }

    pub fn ssp(slack: u64) -> Self {
        Self {
            mode: SyncMode::Ssp,
            slack,
            mitigation: BTreeSet::new(),
        }
    }

    pub fn with(mut self, flag: MitigationFlag) -> Self {
        self.mitigation.insert(flag);
        self
    }

    pub fn has(&self, flag: MitigationFlag) -> bool {
        self.mitigation.contains(&flag)
    }

    /// Effective slack; BSP is always zero.
    pub fn slack(&self) -> u64 {
        match self.mode {
            SyncMode::Bsp => 0,
            SyncMode::Ssp => self.slack,
        }
    }

    pub fn validate(&self, iterations: u64) -> Result<()> {
        if self.mode == SyncMode::Bsp && self.slack != 0 {
            return Err(Error::Config(format!(
                "bsp requires slack 0, got {}",
                self.slack
            )));
        }
        if self.slack > iterations {
            return Err(Error::Config(format!(
                "slack {} exceeds iteration count {iterations}",
                self.slack
            )));
        }
        Ok(())
    }

    /// Short label used in reports, e.g. `ssp+rr`, `bsp+spec`.
    pub fn label(&self) -> String {
        let mut s = match self.mode {
            SyncMode::Bsp => "bsp".to_string(),
            SyncMode::Ssp => "ssp".to_string(),
        };
        if self.has(MitigationFlag::Reassignment) {
            s.push_str("+rr");
        }
        if self.has(MitigationFlag::Speculation) {
            s.push_str("+spec");
        }
        s
    }
}

impl fmt::Display for SyncPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Snapshot of every worker's completed-iteration count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterClockView {
    clocks: Vec<u64>,
    min_clock: u64,
}

impl ClusterClockView {
    pub fn new(clocks: Vec<u64>) -> Self {
        let min_clock = clocks.iter().copied().min().unwrap_or(0);
        Self { clocks, min_clock }
    }

    pub fn clocks(&self) -> &[u64] {
        &self.clocks
    }

    pub fn clock_of(&self, worker: usize) -> Option<u64> {
        self.clocks.get(worker).copied()
    }

    pub fn min_clock(&self) -> u64 {
        self.min_clock
    }

    pub fn max_clock(&self) -> u64 {
        self.clocks.iter().copied().max().unwrap_or(0)
    }
}

/// Admission rule: a worker that has completed `worker_clock` iterations may
/// start the next one only while it leads the slowest worker by at most the
/// policy's slack.
pub fn may_proceed(worker_clock: u64, min_clock: u64, policy: &SyncPolicy) -> bool {
    worker_clock.saturating_sub(min_clock) <= policy.slack()
}

struct BoardState {
    clocks: Vec<u64>,
    max_gap: u64,
}

/// Shared clock table for free-running (real clock) workers. Clock advances
/// wake every blocked worker, which then re-evaluates admission.
pub struct ClockBoard {
    state: Mutex<BoardState>,
    advanced: Condvar,
}

impl ClockBoard {
    pub fn new(workers: usize) -> Self {
        Self {
            state: Mutex::new(BoardState {
                clocks: vec![0; workers],
                max_gap: 0,
            }),
            advanced: Condvar::new(),
        }
    }

    pub fn view(&self) -> ClusterClockView {
        ClusterClockView::new(self.state.lock().unwrap().clocks.clone())
    }

    /// Largest max-minus-min clock gap seen after any advance.
    pub fn max_gap(&self) -> u64 {
        self.state.lock().unwrap().max_gap
    }

    pub fn advance(&self, worker: usize) -> Result<u64> {
        let mut st = self.state.lock().unwrap();
        let c = st
            .clocks
            .get_mut(worker)
            .ok_or(Error::UnknownWorker(worker))?;
        *c += 1;
        let new = *c;
        let max = st.clocks.iter().copied().max().unwrap_or(0);
        let min = st.clocks.iter().copied().min().unwrap_or(0);
        st.max_gap = st.max_gap.max(max - min);
        drop(st);
        self.advanced.notify_all();
        Ok(new)
    }

    /// Blocks until `worker` is admitted under `policy`; returns the time
    /// spent blocked. A wait longer than `timeout` is reported as deadlock.
    pub fn barrier_wait(
        &self,
        worker: usize,
        policy: &SyncPolicy,
        timeout: Duration,
    ) -> Result<Duration> {
        let start = Instant::now();
        let mut st = self.state.lock().unwrap();
        loop {
            let own = *st.clocks.get(worker).ok_or(Error::UnknownWorker(worker))?;
            let min = st.clocks.iter().copied().min().unwrap_or(0);
            if may_proceed(own, min, policy) {
                return Ok(start.elapsed());
            }
            let left = timeout
                .checked_sub(start.elapsed())
                .ok_or_else(|| deadlock(worker, own, &st.clocks))?;
            let (guard, res) = self.advanced.wait_timeout(st, left).unwrap();
            st = guard;
            if res.timed_out() {
                let own = st.clocks[worker];
                let min = st.clocks.iter().copied().min().unwrap_or(0);
                if !may_proceed(own, min, policy) {
                    return Err(deadlock(worker, own, &st.clocks));
                }
            }
        }
    }

    /// Blocks until every worker has completed at least `target` iterations.
    pub fn wait_for_min(&self, target: u64, timeout: Duration) -> Result<Duration> {
        let start = Instant::now();
        let mut st = self.state.lock().unwrap();
        while st.clocks.iter().copied().min().unwrap_or(0) < target {
            let left = timeout
                .checked_sub(start.elapsed())
                .ok_or_else(|| Error::Deadlock(format!("final barrier, clocks {:?}", st.clocks)))?;
            st = self.advanced.wait_timeout(st, left).unwrap().0;
        }
        Ok(start.elapsed())
    }
}

fn deadlock(worker: usize, own: u64, clocks: &[u64]) -> Error {
    Error::Deadlock(format!(
        "worker {worker} at clock {own} never admitted; clocks {clocks:?}"
    ))
}
