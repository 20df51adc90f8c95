//! Timing instrumentation and the per-iteration time accounting.
//!
//! All durations are integer ticks of one microsecond. A [`ClockSource`] is
//! either the host's monotonic clock or a virtual clock that only moves when
//! the simulation scheduler advances it, which is what makes virtual runs
//! bit-reproducible.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One microsecond.
pub type Ticks = u64;

pub const TICKS_PER_MS: Ticks = 1_000;
pub const TICKS_PER_SEC: Ticks = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Real,
    Virtual,
}

impl ClockMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClockMode::Real => "real",
            ClockMode::Virtual => "virtual",
        }
    }
}

#[derive(Debug, Clone)]
pub enum ClockSource {
    Real { origin: Instant },
    Virtual { now: Arc<AtomicU64> },
}

impl ClockSource {
    pub fn real() -> Self {
        ClockSource::Real {
            origin: Instant::now(),
        }
    }

    pub fn virtual_clock() -> Self {
        ClockSource::Virtual {
            now: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn mode(&self) -> ClockMode {
        match self {
            ClockSource::Real { .. } => ClockMode::Real,
            ClockSource::Virtual { .. } => ClockMode::Virtual,
        }
    }

    pub fn now(&self) -> Ticks {
        match self {
            ClockSource::Real { origin } => origin.elapsed().as_micros() as Ticks,
            ClockSource::Virtual { now } => now.load(Ordering::Acquire),
        }
    }

    /// Moves a virtual clock forward to `t`. Targets in the past are ignored,
    /// so the clock never runs backwards.
    pub fn advance_to(&self, t: Ticks) -> Result<()> {
        match self {
            ClockSource::Real { .. } => Err(Error::UnsupportedMode("real")),
            ClockSource::Virtual { now } => {
                now.fetch_max(t, Ordering::AcqRel);
                Ok(())
            }
        }
    }

    pub fn advance_by(&self, d: Ticks) -> Result<()> {
        match self {
            ClockSource::Real { .. } => Err(Error::UnsupportedMode("real")),
            ClockSource::Virtual { now } => {
                now.fetch_add(d, Ordering::AcqRel);
                Ok(())
            }
        }
    }
}

/// Accumulates measured durations until reset.
///
/// Measuring a block that itself measures into the same accumulator counts
/// the inner span twice; totals are plain sums of every `measure` call.
#[derive(Debug)]
pub struct Benchmark {
    clock: ClockSource,
    total: Cell<Ticks>,
    samples: Cell<u64>,
}

impl Benchmark {
    pub fn new(clock: ClockSource) -> Self {
        Self {
            clock,
            total: Cell::new(0),
            samples: Cell::new(0),
        }
    }

    pub fn clock(&self) -> &ClockSource {
        &self.clock
    }

    pub fn measure<F: FnOnce()>(&self, block: F) -> Ticks {
        self.measure_r(block).0
    }

    pub fn measure_r<R, F: FnOnce() -> R>(&self, block: F) -> (Ticks, R) {
        let start = self.clock.now();
        let out = block();
        let elapsed = self.clock.now().saturating_sub(start);
        self.total.set(self.total.get() + elapsed);
        self.samples.set(self.samples.get() + 1);
        (elapsed, out)
    }

    pub fn total(&self) -> Ticks {
        self.total.get()
    }

    pub fn sample_count(&self) -> u64 {
        self.samples.get()
    }

    pub fn reset(&self) {
        self.total.set(0);
        self.samples.set(0);
    }
}

/// Time split of one worker's iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub worker: usize,
    /// 1-based iteration number.
    pub iteration: u64,
    pub comp_ticks: Ticks,
    pub comm_ticks: Ticks,
    pub wait_ticks: Ticks,
}

impl IterationRecord {
    pub fn new(worker: usize, iteration: u64) -> Self {
        Self {
            worker,
            iteration,
            comp_ticks: 0,
            comm_ticks: 0,
            wait_ticks: 0,
        }
    }

    pub fn wall_ticks(&self) -> Ticks {
        self.comp_ticks + self.comm_ticks + self.wait_ticks
    }
}

/// Groups records by iteration and checks that every iteration has exactly
/// one record for every worker that appears anywhere in the table.
fn complete_grid(records: &[IterationRecord]) -> Result<BTreeMap<u64, Vec<&IterationRecord>>> {
    let workers: BTreeSet<usize> = records.iter().map(|r| r.worker).collect();
    let mut by_iter: BTreeMap<u64, Vec<&IterationRecord>> = BTreeMap::new();
    for r in records {
        by_iter.entry(r.iteration).or_default().push(r);
    }
    for (iteration, rows) in &by_iter {
        let seen: BTreeSet<usize> = rows.iter().map(|r| r.worker).collect();
        if seen.len() != rows.len() {
            return Err(Error::IncompleteData(format!(
                "duplicate worker record in iteration {iteration}"
            )));
        }
        if let Some(missing) = workers.difference(&seen).next() {
            return Err(Error::IncompleteData(format!(
                "worker {missing} has no record for iteration {iteration}"
            )));
        }
    }
    Ok(by_iter)
}

/// Sum over iterations of the slowest computation plus the slowest
/// communication among the workers.
pub fn compute_t_iteration(records: &[IterationRecord]) -> Result<Ticks> {
    let grid = complete_grid(records)?;
    Ok(grid
        .values()
        .map(|rows| {
            let comp = rows.iter().map(|r| r.comp_ticks).max().unwrap_or(0);
            let comm = rows.iter().map(|r| r.comm_ticks).max().unwrap_or(0);
            comp + comm
        })
        .sum())
}

/// Total time every worker spent blocked on synchronization.
pub fn compute_t_waste(records: &[IterationRecord]) -> Result<Ticks> {
    complete_grid(records)?;
    Ok(records.iter().map(|r| r.wait_ticks).sum())
}

/// Formats ticks as milliseconds with exactly three decimals using integer
/// arithmetic, so the text is identical on every platform.
pub fn format_ms(ticks: Ticks) -> String {
    format!("{}.{:03}", ticks / TICKS_PER_MS, ticks % TICKS_PER_MS)
}

pub const RECORDS_HEADER: [&str; 8] = [
    "run_id",
    "mode",
    "pattern",
    "iteration",
    "worker",
    "comp_ms",
    "comm_ms",
    "wait_ms",
];

/// Writes the per-worker per-iteration table, sorted by (iteration, worker).
pub fn write_records_csv<W: Write>(
    out: W,
    run_id: &str,
    mode: &str,
    pattern: &str,
    records: &[IterationRecord],
) -> Result<()> {
    let mut sorted: Vec<&IterationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.iteration, r.worker));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORDS_HEADER)?;
    for r in sorted {
        w.write_record([
            run_id.to_string(),
            mode.to_string(),
            pattern.to_string(),
            r.iteration.to_string(),
            r.worker.to_string(),
            format_ms(r.comp_ticks),
            format_ms(r.comm_ticks),
            format_ms(r.wait_ticks),
        ])?;
    }
    w.flush()?;
    Ok(())
}
