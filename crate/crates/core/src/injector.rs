//! Straggler injection: the five delay patterns, keyed deterministic
//! sampling, delay-point slicing and the CPU disruptor.
//!
//! Every random decision is drawn from a generator keyed by
//! `(seed, stream, worker, iteration)`, so concurrent workers never share RNG
//! state and a run replays bit-identically under the same seed.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{ClockMode, Ticks, TICKS_PER_SEC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    SlowWorker,
    DisruptedMachine,
    PowerLaw,
    Persistent,
    Ideal,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::SlowWorker => "slow_worker",
            Pattern::DisruptedMachine => "disrupted_machine",
            Pattern::PowerLaw => "power_law",
            Pattern::Persistent => "persistent",
            Pattern::Ideal => "ideal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StragglerConfig {
    pub enabled: bool,
    pub pattern: Pattern,
    /// 100 means a triggered worker's iteration takes twice as long.
    pub delay_percent: f64,
    /// Per worker-iteration (or per disruptor period) trigger chance.
    pub probability: f64,
    /// Disruptor cadence in seconds.
    pub period_s: f64,
    pub alpha: f64,
    pub persistent_workers: Vec<usize>,
    pub persistent_load_factor: f64,
    pub seed: u64,
    /// Upper bound on one sampled delay, as a multiple of the nominal
    /// iteration time.
    pub cap_multiplier: f64,
    /// Slow-worker delays are scaled by a uniform draw from [0, 2] when set;
    /// otherwise a triggered worker is delayed by exactly `delay_percent`.
    pub random_magnitude: bool,
}

impl Default for StragglerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pattern: Pattern::Ideal,
            delay_percent: 100.0,
            probability: 0.3,
            period_s: 0.05,
            alpha: 4.0,
            persistent_workers: Vec::new(),
            persistent_load_factor: 0.75,
            seed: 0,
            cap_multiplier: 10.0,
            random_magnitude: true,
        }
    }
}

impl StragglerConfig {
    pub fn ideal() -> Self {
        Self::default()
    }

    pub fn with_pattern(pattern: Pattern) -> Self {
        Self {
            pattern,
            ..Self::default()
        }
    }

    /// Whether any delay can be injected at all.
    pub fn active(&self) -> bool {
        self.enabled && self.pattern != Pattern::Ideal
    }

    pub fn validate(&self, workers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.probability) {
            return bad(format!("probability {} outside [0,1]", self.probability));
        }
        if !(self.delay_percent >= 0.0 && self.delay_percent.is_finite()) {
            return bad(format!("delay_percent {} must be >= 0", self.delay_percent));
        }
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return bad(format!("period_s {} must be positive", self.period_s));
        }
        if !(self.cap_multiplier >= 1.0) {
            return bad(format!(
                "cap_multiplier {} must be >= 1",
                self.cap_multiplier
            ));
        }
        if self.pattern == Pattern::PowerLaw && !(self.alpha > 1.0) {
            return bad(format!("power-law alpha {} must exceed 1", self.alpha));
        }
        if self.pattern == Pattern::Persistent {
            if self.persistent_workers.is_empty() {
                return bad("persistent pattern needs at least one straggler".into());
            }
            if let Some(w) = self.persistent_workers.iter().find(|w| **w >= workers) {
                return bad(format!("persistent straggler {w} is not a worker"));
            }
            if !(self.persistent_load_factor > 0.0 && self.persistent_load_factor <= 1.0) {
                return bad(format!(
                    "persistent_load_factor {} outside (0,1]",
                    self.persistent_load_factor
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Trigger = 1,
    Magnitude = 2,
    PowerLaw = 3,
    Disrupt = 4,
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn keyed_rng(seed: u64, stream: Stream, worker: u64, iteration: u64) -> ChaCha8Rng {
    let k = splitmix(seed ^ splitmix(stream as u64));
    let k = splitmix(k ^ splitmix(worker.wrapping_add(0x1234_5678)));
    let k = splitmix(k ^ iteration);
    ChaCha8Rng::seed_from_u64(k)
}

/// Uniform draw in (0, 1].
fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.gen::<f64>()
}

/// Delay budget for one worker-iteration, spread over its delay points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayPlan {
    pub total_delay: Ticks,
    pub num_delay_points: usize,
    pub per_point_delay: Ticks,
}

impl DelayPlan {
    pub fn zero(num_delay_points: usize) -> Self {
        slice_delay(0, num_delay_points.max(1))
    }

    /// Delay at point `i`; the last point carries the division remainder.
    pub fn at(&self, i: usize) -> Ticks {
        if i + 1 == self.num_delay_points {
            self.total_delay - self.per_point_delay * (self.num_delay_points as Ticks - 1)
        } else if i < self.num_delay_points {
            self.per_point_delay
        } else {
            0
        }
    }

    pub fn slices(&self) -> Vec<Ticks> {
        (0..self.num_delay_points).map(|i| self.at(i)).collect()
    }
}

pub fn slice_delay(total_delay: Ticks, num_delay_points: usize) -> DelayPlan {
    assert!(num_delay_points >= 1, "need at least one delay point");
    DelayPlan {
        total_delay,
        num_delay_points,
        per_point_delay: total_delay / num_delay_points as Ticks,
    }
}

pub fn check_permanent_straggler(worker: usize, config: &StragglerConfig) -> bool {
    config.pattern == Pattern::Persistent && config.persistent_workers.contains(&worker)
}

/// Bernoulli(probability) keyed by (seed, worker, iteration). Always false
/// for patterns without transient triggering.
pub fn check_transient_straggler(worker: usize, iteration: u64, config: &StragglerConfig) -> bool {
    match config.pattern {
        Pattern::SlowWorker | Pattern::DisruptedMachine | Pattern::PowerLaw => {}
        _ => return false,
    }
    if config.probability <= 0.0 {
        return false;
    }
    if config.probability >= 1.0 {
        return true;
    }
    let mut rng = keyed_rng(config.seed, Stream::Trigger, worker as u64, iteration);
    rng.gen::<f64>() < config.probability
}

/// Pareto(shape `alpha`, scale 1) multiplier minus one, by inverse CDF of
/// `u` in (0, 1].
pub fn pareto_excess(alpha: f64, u: f64) -> f64 {
    u.powf(-1.0 / alpha) - 1.0
}

/// Heavy-tailed delay: `(m - 1) * nominal` with `m ~ Pareto(alpha, 1)`,
/// capped at `cap_multiplier * nominal`.
pub fn sample_powerlaw_delay(
    alpha: f64,
    nominal: Ticks,
    u: f64,
    cap_multiplier: f64,
) -> Result<Ticks> {
    if !(alpha > 1.0) {
        return Err(Error::Config(format!(
            "power-law alpha {alpha} must exceed 1 for a finite mean"
        )));
    }
    let excess = pareto_excess(alpha, u).min(cap_multiplier);
    Ok((excess * nominal as f64).round() as Ticks)
}

/// The uniform variate the power-law sampler uses for (worker, iteration).
/// It does not depend on alpha, so sweeps over alpha share one u-stream.
pub fn powerlaw_uniform(seed: u64, worker: usize, iteration: u64) -> f64 {
    open_unit(&mut keyed_rng(
        seed,
        Stream::PowerLaw,
        worker as u64,
        iteration,
    ))
}

/// Delay plan for `worker` starting `iteration`, whose nominal (undelayed)
/// duration is `nominal`.
pub fn inject_straggler(
    worker: usize,
    iteration: u64,
    nominal: Ticks,
    num_delay_points: usize,
    config: &StragglerConfig,
) -> Result<DelayPlan> {
    let points = num_delay_points.max(1);
    if !config.active() {
        return Ok(DelayPlan::zero(points));
    }
    let total = match config.pattern {
        Pattern::SlowWorker => {
            if !check_transient_straggler(worker, iteration, config) {
                0
            } else {
                let scale = if config.random_magnitude {
                    let mut rng =
                        keyed_rng(config.seed, Stream::Magnitude, worker as u64, iteration);
                    rng.gen_range(0.0..=2.0)
                } else {
                    1.0
                };
                let d = config.delay_percent / 100.0 * scale;
                (d.min(config.cap_multiplier) * nominal as f64).round() as Ticks
            }
        }
        Pattern::PowerLaw => {
            if !check_transient_straggler(worker, iteration, config) {
                0
            } else {
                let u = powerlaw_uniform(config.seed, worker, iteration);
                sample_powerlaw_delay(config.alpha, nominal, u, config.cap_multiplier)?
            }
        }
        // Disruption is a time-window slowdown and persistent stragglers are
        // expressed through the work assignment; neither adds sleep.
        Pattern::DisruptedMachine | Pattern::Persistent | Pattern::Ideal => 0,
    };
    Ok(slice_delay(total, points))
}

/// Item count for `worker` when every worker nominally owns `base_items`:
/// non-stragglers are scaled by the load factor and the stragglers share the
/// remainder so the total is conserved.
pub fn persistent_assignment_scale(
    worker: usize,
    base_items: usize,
    workers: usize,
    config: &StragglerConfig,
) -> Result<usize> {
    let counts = persistent_partition(&vec![base_items; workers], config)?;
    counts
        .get(worker)
        .copied()
        .ok_or(Error::UnknownWorker(worker))
}

/// General form of [`persistent_assignment_scale`] for uneven base sizes.
pub fn persistent_partition(base: &[usize], config: &StragglerConfig) -> Result<Vec<usize>> {
    if config.pattern != Pattern::Persistent {
        return Ok(base.to_vec());
    }
    if config.persistent_workers.is_empty() {
        return Err(Error::Config(
            "persistent pattern needs at least one straggler".into(),
        ));
    }
    let total: usize = base.iter().sum();
    let stragglers: Vec<usize> = (0..base.len())
        .filter(|w| check_permanent_straggler(*w, config))
        .collect();
    if stragglers.is_empty() {
        return Err(Error::Config(
            "no persistent straggler among workers".into(),
        ));
    }
    let mut out: Vec<usize> = base
        .iter()
        .enumerate()
        .map(|(w, &b)| {
            if check_permanent_straggler(w, config) {
                0
            } else {
                (b as f64 * config.persistent_load_factor).round() as usize
            }
        })
        .collect();
    let remainder = total
        .checked_sub(out.iter().sum::<usize>())
        .ok_or_else(|| {
            Error::Config(format!(
                "persistent_load_factor {} leaves nothing for the stragglers",
                config.persistent_load_factor
            ))
        })?;
    let share = remainder / stragglers.len();
    let extra = remainder % stragglers.len();
    for (i, &w) in stragglers.iter().enumerate() {
        out[w] = share + usize::from(i < extra);
    }
    Ok(out)
}

pub fn disruptor_thread_count(intensity_percent: f64, cores: usize) -> usize {
    (intensity_percent / 100.0 * cores as f64).round() as usize
}

/// Running busy-loop threads that compete with the workers for CPU.
pub struct DisruptorHandle {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl DisruptorHandle {
    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn cancel(&self) {
        self.stop.store(true, Ordering::Release);
    }

    pub fn join(self) {
        self.cancel();
        for t in self.threads {
            let _ = t.join();
        }
    }
}

pub fn spawn_disruptor(
    intensity_percent: f64,
    cores: usize,
    duration: Duration,
    mode: ClockMode,
) -> Result<DisruptorHandle> {
    if mode == ClockMode::Virtual {
        return Err(Error::UnsupportedMode("virtual"));
    }
    if !(intensity_percent > 0.0) || cores == 0 {
        return Err(Error::Config(format!(
            "disruptor needs positive intensity and cores, got {intensity_percent}% on {cores}"
        )));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let deadline = Instant::now() + duration;
    let threads = (0..disruptor_thread_count(intensity_percent, cores))
        .map(|i| {
            let stop = stop.clone();
            std::thread::Builder::new()
                .name(format!("disruptor-{i}"))
                .spawn(move || {
                    let mut x = 0x2545_f491_4f6c_dd1du64 ^ i as u64;
                    while !stop.load(Ordering::Relaxed) && Instant::now() < deadline {
                        for _ in 0..10_000 {
                            x = splitmix(x);
                        }
                        std::hint::black_box(x);
                    }
                })
                .expect("spawn disruptor thread")
        })
        .collect();
    Ok(DisruptorHandle { stop, threads })
}

/// Virtual-time model of the disrupted-machine pattern. Every `period`
/// ticks, with the configured probability, one machine (round-robin over
/// periods) runs its workers' computation `1 + intensity/100` times slower
/// for the whole period.
#[derive(Debug, Clone)]
pub struct DisruptionSchedule {
    period: Ticks,
    slowdown: f64,
    probability: f64,
    seed: u64,
    machines: usize,
    workers_per_machine: usize,
}

impl DisruptionSchedule {
    pub fn new(
        config: &StragglerConfig,
        workers: usize,
        workers_per_machine: usize,
    ) -> Option<Self> {
        if !config.enabled || config.pattern != Pattern::DisruptedMachine {
            return None;
        }
        let wpm = workers_per_machine.max(1);
        Some(Self {
            period: ((config.period_s * TICKS_PER_SEC as f64).round() as Ticks).max(1),
            slowdown: 1.0 + config.delay_percent / 100.0,
            probability: config.probability,
            seed: config.seed,
            machines: workers.div_ceil(wpm),
            workers_per_machine: wpm,
        })
    }

    pub fn machine_of(&self, worker: usize) -> usize {
        worker / self.workers_per_machine
    }

    /// Machine disrupted during period `k`, if any.
    pub fn disrupted_in_period(&self, k: u64) -> Option<usize> {
        let machine = (k % self.machines as u64) as usize;
        let hit = if self.probability >= 1.0 {
            true
        } else if self.probability <= 0.0 {
            false
        } else {
            keyed_rng(self.seed, Stream::Disrupt, machine as u64, k).gen::<f64>() < self.probability
        };
        hit.then_some(machine)
    }

    pub fn slowdown_at(&self, worker: usize, t: Ticks) -> f64 {
        if self.disrupted_in_period(t / self.period) == Some(self.machine_of(worker)) {
            self.slowdown
        } else {
            1.0
        }
    }

    /// Time at which `work` ticks of undisturbed computation started at
    /// `start` on `worker` complete, integrating the slowdown over periods.
    pub fn finish_time(&self, worker: usize, start: Ticks, work: Ticks) -> Ticks {
        let mut t = start;
        let mut left = work as f64;
        while left > 0.0 {
            let boundary = (t / self.period + 1) * self.period;
            let rate = 1.0 / self.slowdown_at(worker, t);
            let span = (boundary - t) as f64;
            if span * rate >= left {
                return t + (left / rate).ceil() as Ticks;
            }
            left -= span * rate;
            t = boundary;
        }
        t
    }
}
