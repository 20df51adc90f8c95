//! Experiment orchestration: assembles a cluster from a config, executes it
//! on the virtual-time engine or on real threads, and writes the CSV outputs.

pub mod config;
mod sim;
mod threaded;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

pub use config::{ExperimentConfig, MitigationSection, SyncSection, TimingSection};

use crate::bench::{
    compute_t_iteration, compute_t_waste, format_ms, write_records_csv, ClockMode, IterationRecord,
    Ticks,
};
use crate::error::{Error, Result};
use crate::injector::persistent_partition;
use crate::mitigation::{Interval, WorkAssignment};
use crate::paramserver::{ParameterKey, ParameterServer, TableConfig};
use crate::workloads::Workload;

/// Counters of what the mitigation machinery did during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub injected_delay_ticks: Ticks,
    pub help_requests: u64,
    pub help_acks: u64,
    pub sheds: u64,
    pub cancels: u64,
    pub helps_aborted: u64,
    pub clones: u64,
    pub clone_wins: u64,
    pub original_wins: u64,
    pub items_processed: u64,
    pub items_discarded: u64,
    pub dropped: u64,
    pub clamped: u64,
}

pub(crate) struct Cluster {
    pub workload: Box<dyn Workload>,
    pub ps: ParameterServer,
    pub ranges: Vec<Interval>,
}

/// One worker finishing an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockEvent {
    pub time: Ticks,
    pub worker: usize,
    /// The worker's clock after the event.
    pub clock: u64,
}

pub(crate) struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub trace: Vec<ClockEvent>,
    pub makespan: Ticks,
    pub max_gap: u64,
    pub stats: RunStats,
}

/// An aborted run: the error plus the records completed before it.
pub(crate) struct Partial {
    pub error: Error,
    pub records: Vec<IterationRecord>,
}

impl From<Error> for Partial {
    fn from(error: Error) -> Self {
        Partial {
            error,
            records: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// The resolved config the run executed.
    pub config: ExperimentConfig,
    pub records: Vec<IterationRecord>,
    /// Clock advances in the order the server applied them.
    pub trace: Vec<ClockEvent>,
    pub makespan: Ticks,
    pub max_gap: u64,
    pub stats: RunStats,
    pub t_iteration: Ticks,
    pub t_waste: Ticks,
    pub objective_initial: f64,
    pub objective_final: f64,
    /// Final dense parameter table.
    pub table: Vec<f64>,
}

impl RunResult {
    pub fn mode(&self) -> String {
        self.config.policy().label()
    }

    pub fn pattern(&self) -> &'static str {
        if self.config.straggler.active() {
            self.config.straggler.pattern.as_str()
        } else {
            "ideal"
        }
    }

    /// Wall time per iteration.
    pub fn avg_iter_ticks(&self) -> Ticks {
        self.makespan / self.config.iterations
    }

    /// t_iteration averaged over the last `k` iterations (all if fewer).
    pub fn avg_t_iteration_last(&self, k: u64) -> Result<Ticks> {
        let n = self.config.iterations;
        let k = k.min(n);
        let tail: Vec<IterationRecord> = self
            .records
            .iter()
            .filter(|r| r.iteration > n - k)
            .copied()
            .collect();
        Ok(compute_t_iteration(&tail)? / k)
    }

    /// The run's summary row. Without a baseline the deltas are known only
    /// for plain BSP, which is 0% against itself.
    pub fn summary(&self) -> ModeSummary {
        let mode = self.mode();
        let own = (mode == "bsp").then_some(0.0);
        ModeSummary {
            run_id: self.config.run_id.clone(),
            mode,
            pattern: self.pattern().to_string(),
            avg_iter_ticks: self.avg_iter_ticks(),
            total_waste_ticks: self.t_waste,
            pct_vs_bsp_iter: own,
            pct_vs_bsp_waste: own,
        }
    }
}

/// Contiguous per-worker item ranges, skewed for the persistent pattern.
pub fn partition(cfg: &ExperimentConfig, n_items: usize) -> Result<Vec<Interval>> {
    if n_items < cfg.workers {
        return Err(Error::Config(format!(
            "{n_items} items cannot be split over {} workers",
            cfg.workers
        )));
    }
    let even = WorkAssignment::even_sizes(n_items, cfg.workers);
    let sizes = if cfg.straggler.active() {
        persistent_partition(&even, &cfg.straggler)?
    } else {
        even
    };
    let mut start = 0;
    Ok(sizes
        .into_iter()
        .map(|s| {
            let iv = Interval::new(start, start + s);
            start += s;
            iv
        })
        .collect())
}

fn assemble(cfg: &ExperimentConfig) -> Result<Cluster> {
    let workload = cfg.workload.build(cfg.seed)?;
    let ranges = partition(cfg, workload.num_items())?;
    let ps = ParameterServer::new(
        TableConfig {
            capacity: workload.table_capacity(),
            dimension: workload.dimension(),
            num_shards: cfg.num_shards(),
            merge: cfg.merge,
        },
        cfg.workers,
        cfg.policy(),
    )?;
    for (key, value) in workload.initial_values() {
        ps.install(ParameterKey(key), value)?;
    }
    Ok(Cluster {
        workload,
        ps,
        ranges,
    })
}

fn execute(cfg: &ExperimentConfig) -> std::result::Result<RunResult, Partial> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let cluster = assemble(&cfg)?;
    let objective_initial = cluster.workload.objective(&cluster.ps.dense());
    info!(
        "{}: {} {} on {} workers, {} items",
        cfg.run_id,
        cfg.policy().label(),
        cfg.workload.name(),
        cfg.workers,
        cluster.workload.num_items()
    );
    let out = match cfg.clock_mode {
        ClockMode::Virtual => sim::run_virtual(&cfg, &cluster)?,
        ClockMode::Real => threaded::run_real(&cfg, &cluster)?,
    };
    let table = cluster.ps.dense();
    let objective_final = cluster.workload.objective(&table);
    let t_iteration = compute_t_iteration(&out.records)?;
    let t_waste = compute_t_waste(&out.records)?;
    info!(
        "{}: makespan {} ms, waste {} ms, objective {objective_initial:.6} -> {objective_final:.6}",
        cfg.run_id,
        format_ms(out.makespan),
        format_ms(t_waste)
    );
    Ok(RunResult {
        config: cfg,
        records: out.records,
        trace: out.trace,
        makespan: out.makespan,
        max_gap: out.max_gap,
        stats: out.stats,
        t_iteration,
        t_waste,
        objective_initial,
        objective_final,
        table,
    })
}

/// Runs one experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    execute(cfg).map_err(|p| p.error)
}

/// Runs one experiment and writes `<out>/<run_id>/{config.echo, records.csv,
/// summary.csv, metrics.csv}`. On an aborted run the records completed so far
/// are still written before the error is returned.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    let dir = out.join(&cfg.run_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.echo"), cfg.to_toml()?)?;
    match execute(cfg) {
        Ok(r) => {
            write_run(&r, &dir)?;
            Ok(r)
        }
        Err(p) => {
            let pattern = if cfg.straggler.active() {
                cfg.straggler.pattern.as_str()
            } else {
                "ideal"
            };
            let f = fs::File::create(dir.join("records.csv"))?;
            write_records_csv(f, &cfg.run_id, &cfg.policy().label(), pattern, &p.records)?;
            Err(p.error)
        }
    }
}

fn write_run(r: &RunResult, dir: &Path) -> Result<()> {
    let f = fs::File::create(dir.join("records.csv"))?;
    write_records_csv(f, &r.config.run_id, &r.mode(), r.pattern(), &r.records)?;
    write_summary_csv(fs::File::create(dir.join("summary.csv"))?, &[r.summary()])?;
    write_metrics_csv(fs::File::create(dir.join("metrics.csv"))?, r)
}

pub const SUMMARY_HEADER: [&str; 7] = [
    "run_id",
    "mode",
    "pattern",
    "avg_iter_ms",
    "total_waste_ms",
    "pct_vs_bsp_iter",
    "pct_vs_bsp_waste",
];

/// One row of the comparison summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub run_id: String,
    pub mode: String,
    pub pattern: String,
    pub avg_iter_ticks: Ticks,
    pub total_waste_ticks: Ticks,
    pub pct_vs_bsp_iter: Option<f64>,
    pub pct_vs_bsp_waste: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub baseline: String,
    pub rows: Vec<ModeSummary>,
}

impl ComparisonReport {
    pub fn row(&self, mode: &str) -> Option<&ModeSummary> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

/// `(base − x) / base × 100`; undefined for a zero base unless x is zero too.
pub fn pct_vs(base: Ticks, x: Ticks) -> Option<f64> {
    if base == 0 {
        (x == 0).then_some(0.0)
    } else {
        Some((base as f64 - x as f64) / base as f64 * 100.0)
    }
}

fn fmt_pct(p: Option<f64>) -> String {
    p.map(|v| format!("{v:.3}")).unwrap_or_default()
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[ModeSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.mode.clone(),
            r.pattern.clone(),
            format_ms(r.avg_iter_ticks),
            format_ms(r.total_waste_ticks),
            fmt_pct(r.pct_vs_bsp_iter),
            fmt_pct(r.pct_vs_bsp_waste),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics_csv<W: Write>(out: W, r: &RunResult) -> Result<()> {
    let n = r.config.iterations;
    let ms = |t: Ticks| format_ms(t);
    let s = &r.stats;
    let rows: Vec<(&str, String)> = vec![
        ("t_iteration_ms", ms(r.t_iteration)),
        ("t_waste_ms", ms(r.t_waste)),
        ("makespan_ms", ms(r.makespan)),
        ("avg_wall_iter_ms", ms(r.avg_iter_ticks())),
        ("avg_t_iteration_all_ms", ms(r.t_iteration / n)),
        ("avg_t_iteration_last15_ms", ms(r.avg_t_iteration_last(15)?)),
        ("slack", r.config.policy().slack().to_string()),
        ("max_clock_gap", r.max_gap.to_string()),
        ("objective_initial", format!("{:.9}", r.objective_initial)),
        ("objective_final", format!("{:.9}", r.objective_final)),
        ("injected_delay_ms", ms(s.injected_delay_ticks)),
        ("help_requests", s.help_requests.to_string()),
        ("help_acks", s.help_acks.to_string()),
        ("sheds", s.sheds.to_string()),
        ("cancels", s.cancels.to_string()),
        ("helps_aborted", s.helps_aborted.to_string()),
        ("clones", s.clones.to_string()),
        ("clone_wins", s.clone_wins.to_string()),
        ("original_wins", s.original_wins.to_string()),
        ("items_processed", s.items_processed.to_string()),
        ("items_discarded", s.items_discarded.to_string()),
        ("dropped_messages", s.dropped.to_string()),
        ("clamped_counts", s.clamped.to_string()),
    ];
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-iteration plot-ready rows: one line per (run, iteration, metric).
pub fn write_long_csv<W: Write>(out: W, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run_id",
        "mode",
        "pattern",
        "iteration",
        "metric",
        "value_ms",
    ])?;
    for r in results {
        let mode = r.mode();
        for it in 1..=r.config.iterations {
            let rows: Vec<&IterationRecord> =
                r.records.iter().filter(|x| x.iteration == it).collect();
            let comp = rows.iter().map(|x| x.comp_ticks).max().unwrap_or(0);
            let comm = rows.iter().map(|x| x.comm_ticks).max().unwrap_or(0);
            let wait: Ticks = rows.iter().map(|x| x.wait_ticks).sum();
            let wall = rows.iter().map(|x| x.wall_ticks()).max().unwrap_or(0);
            for (metric, v) in [
                ("t_iteration", comp + comm),
                ("max_comp", comp),
                ("max_comm", comm),
                ("waste", wait),
                ("max_wall", wall),
            ] {
                w.write_record([
                    r.config.run_id.as_str(),
                    mode.as_str(),
                    r.pattern(),
                    &it.to_string(),
                    metric,
                    &format_ms(v),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Builds the report for finished runs against the run whose mode label is
/// `baseline`.
pub fn summarize(results: &[RunResult], baseline: &str) -> Result<ComparisonReport> {
    let base = results
        .iter()
        .find(|r| r.mode() == baseline)
        .ok_or_else(|| Error::Config(format!("no {baseline} run in the comparison set")))?;
    let rows = results
        .iter()
        .map(|r| {
            let mut row = r.summary();
            row.pct_vs_bsp_iter = pct_vs(base.avg_iter_ticks(), r.avg_iter_ticks());
            row.pct_vs_bsp_waste = pct_vs(base.t_waste, r.t_waste);
            row
        })
        .collect();
    Ok(ComparisonReport {
        baseline: baseline.to_string(),
        rows,
    })
}

/// Checks that the configs differ only in synchronization and mitigation.
fn check_comparable(configs: &[ExperimentConfig], baseline: &str) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::Config("nothing to compare".into()));
    };
    if !configs.iter().any(|c| c.policy().label() == baseline) {
        return Err(Error::Config(format!(
            "no {baseline} config in the comparison set"
        )));
    }
    let ids: BTreeSet<&str> = configs.iter().map(|c| c.run_id.as_str()).collect();
    if ids.len() != configs.len() {
        return Err(Error::Config(
            "run_id values must be unique within a comparison".into(),
        ));
    }
    for c in configs {
        let same = c.workers == first.workers
            && c.iterations == first.iterations
            && c.seed == first.seed
            && c.clock_mode == first.clock_mode
            && c.workload == first.workload
            && c.straggler == first.straggler
            && c.workers_per_machine == first.workers_per_machine
            && c.merge == first.merge
            && c.timing == first.timing;
        if !same {
            return Err(Error::Config(format!(
                "{} differs from {} in more than sync and mitigation",
                c.run_id, first.run_id
            )));
        }
    }
    Ok(())
}

/// Runs every config and reports each against the `baseline` mode.
pub fn compare_modes(
    configs: &[ExperimentConfig],
    baseline: &str,
) -> Result<(ComparisonReport, Vec<RunResult>)> {
    check_comparable(configs, baseline)?;
    let results = configs
        .iter()
        .map(run_experiment)
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(&results, baseline)?, results))
}

/// [`compare_modes`] with every run and the comparison written under `out`.
/// The comparison files go to `<out>/<name>/{summary.csv, long.csv}`.
pub fn compare_to_dir(
    configs: &[ExperimentConfig],
    baseline: &str,
    out: &Path,
    name: &str,
) -> Result<(ComparisonReport, PathBuf)> {
    check_comparable(configs, baseline)?;
    let results = configs
        .iter()
        .map(|c| run_to_dir(c, out))
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&results, baseline)?;
    let dir = out.join(name);
    fs::create_dir_all(&dir)?;
    write_summary_csv(fs::File::create(dir.join("summary.csv"))?, &report.rows)?;
    write_long_csv(fs::File::create(dir.join("long.csv"))?, &results)?;
    Ok((report, dir))
}

/// Parameters that `sweep` can vary.
pub const SWEEP_PARAMS: [&str; 11] = [
    "alpha",
    "delay_percent",
    "probability",
    "persistent_load_factor",
    "period_s",
    "slack",
    "workers",
    "iterations",
    "seed",
    "shed_fraction",
    "detect_threshold",
];

/// Returns `cfg` with one parameter set from its text value.
pub fn with_param(cfg: &ExperimentConfig, param: &str, value: &str) -> Result<ExperimentConfig> {
    fn num<T: std::str::FromStr>(param: &str, v: &str) -> Result<T> {
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("{param}: cannot parse {v:?}")))
    }
    let mut c = cfg.clone();
    match param {
        "alpha" => c.straggler.alpha = num(param, value)?,
        "delay_percent" => c.straggler.delay_percent = num(param, value)?,
        "probability" => c.straggler.probability = num(param, value)?,
        "persistent_load_factor" => c.straggler.persistent_load_factor = num(param, value)?,
        "period_s" => c.straggler.period_s = num(param, value)?,
        "slack" => c.sync.slack = num(param, value)?,
        "workers" => c.workers = num(param, value)?,
        "iterations" => c.iterations = num(param, value)?,
        "seed" => c = c.with_seed(num(param, value)?),
        "shed_fraction" => c.mitigation.shed_fraction = num(param, value)?,
        "detect_threshold" => c.mitigation.detect_threshold = num(param, value)?,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.run_id = format!("{}-{param}{}", cfg.run_id, value.trim());
    c.validate()?;
    Ok(c)
}

/// One run per value of `param`.
pub fn sweep(cfg: &ExperimentConfig, param: &str, values: &[String]) -> Result<Vec<RunResult>> {
    let configs = values
        .iter()
        .map(|v| with_param(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    configs.iter().map(run_experiment).collect()
}

/// [`sweep`] with every run written under `out` and a summary in
/// `<out>/<run_id>-sweep-<param>/`.
pub fn sweep_to_dir(
    cfg: &ExperimentConfig,
    param: &str,
    values: &[String],
    out: &Path,
) -> Result<(Vec<RunResult>, PathBuf)> {
    let configs = values
        .iter()
        .map(|v| with_param(cfg, param, v))
        .collect::<Result<Vec<_>>>()?;
    let results = configs
        .iter()
        .map(|c| run_to_dir(c, out))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ModeSummary> = results.iter().map(RunResult::summary).collect();
    let dir = out.join(format!("{}-sweep-{param}", cfg.run_id));
    fs::create_dir_all(&dir)?;
    write_summary_csv(fs::File::create(dir.join("summary.csv"))?, &rows)?;
    write_long_csv(fs::File::create(dir.join("long.csv"))?, &results)?;
    Ok((results, dir))
}
