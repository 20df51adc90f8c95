//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured numbers, then asserts.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psbench_core::bench::{compute_t_iteration, compute_t_waste, IterationRecord, Ticks};
use psbench_core::consistency::{MitigationFlag, SyncMode};
use psbench_core::injector::{
    check_transient_straggler, pareto_excess, powerlaw_uniform, Pattern, StragglerConfig,
};
use psbench_core::mitigation::Interval;
use psbench_core::paramserver::MergeOrder;
use psbench_core::runner::{run_experiment, run_to_dir, ExperimentConfig, RunResult};
use psbench_core::workloads::lda::{lda_gibbs_iteration, Corpus, TopicState};
use psbench_core::workloads::lr::{log_loss, lr_sgd_iteration, sigmoid, LabeledExample};
use psbench_core::workloads::mf::{gen_mf, mf_sequential_epoch, rmse, FactorModel};
use psbench_core::workloads::{LdaConfig, LrConfig, MfConfig, WorkloadConfig};

fn report(n: u32, pass: bool, what: &str, detail: String) {
    println!(
        "criterion {n}: {} {what}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn workload(name: &str) -> WorkloadConfig {
    match name {
        "mf" => WorkloadConfig::Mf(MfConfig::default()),
        "lr" => WorkloadConfig::Lr(LrConfig::default()),
        "lda" => WorkloadConfig::Lda(LdaConfig::default()),
        other => panic!("unknown workload {other}"),
    }
}

/// Default desk-scale config for `workload` under `mode`.
fn config(name: &str, mode: &str, straggler: StragglerConfig, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        run_id: format!("{name}-{}", mode.replace('+', "-")),
        workload: workload(name),
        straggler,
        ..Default::default()
    }
    .with_seed(seed);
    let (sync, flags): (SyncMode, &[MitigationFlag]) = match mode {
        "bsp" => (SyncMode::Bsp, &[]),
        "ssp" => (SyncMode::Ssp, &[]),
        "ssp+rr" => (SyncMode::Ssp, &[MitigationFlag::Reassignment]),
        "bsp+rr" => (SyncMode::Bsp, &[MitigationFlag::Reassignment]),
        "bsp+spec" => (SyncMode::Bsp, &[MitigationFlag::Speculation]),
        other => panic!("unknown mode {other}"),
    };
    c.sync.mode = sync;
    c.mitigation.flags = flags.iter().copied().collect();
    c
}

fn slow_worker() -> StragglerConfig {
    let mut s = StragglerConfig::with_pattern(Pattern::SlowWorker);
    s.probability = 0.3;
    s.delay_percent = 100.0;
    s
}

/// Largest `max clock − min clock` seen in the run's clock trace.
fn trace_gap(r: &RunResult) -> u64 {
    let mut clocks = vec![0u64; r.config.workers];
    let mut gap = 0;
    for e in &r.trace {
        clocks[e.worker] = e.clock;
        let max = *clocks.iter().max().unwrap();
        let min = *clocks.iter().min().unwrap();
        gap = gap.max(max - min);
    }
    gap
}

/// The staleness bound of criterion 6, checked on every run of the suite.
fn staleness_ok(r: &RunResult) -> bool {
    let bound = r.config.policy().slack() + 1;
    let gap = trace_gap(r);
    let ok = gap <= bound
        && r.max_gap <= bound
        && r.trace.len() as u64 == r.config.workers as u64 * r.config.iterations;
    if !ok {
        println!(
            "criterion 6: FAIL staleness in {} ({}): trace gap {gap}, server gap {}, bound {bound}",
            r.config.run_id,
            r.mode(),
            r.max_gap
        );
    }
    ok
}

fn run(c: &ExperimentConfig) -> RunResult {
    let r = run_experiment(c).unwrap_or_else(|e| panic!("{}: {e}", c.run_id));
    assert!(staleness_ok(&r), "criterion 6 violated in {}", c.run_id);
    r
}

fn ms(t: Ticks) -> f64 {
    t as f64 / 1000.0
}

#[test]
fn criterion_01_ideal_baseline_has_no_waste() {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["mf", "lr", "lda"] {
        let t0 = Instant::now();
        let c = config(name, "bsp", StragglerConfig::ideal(), 0);
        let r = run(&c);
        let took = t0.elapsed();
        let pass = r.t_waste == 0
            && c.workers == 8
            && c.iterations == 20
            && took < Duration::from_secs(10);
        ok &= pass;
        parts.push(format!("{name} waste={} us in {:.2?}", r.t_waste, took));
    }
    report(1, ok, "ideal baseline", parts.join(", "));
    assert!(ok);
}

#[test]
fn criterion_02_slow_worker_ordering() {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["mf", "lr", "lda"] {
        let t0 = Instant::now();
        let mut good = 0;
        let mut ratios = Vec::new();
        for seed in 0..5 {
            let waste = |mode: &str| run(&config(name, mode, slow_worker(), seed)).t_waste;
            let (bsp, ssp, rr) = (waste("bsp"), waste("ssp"), waste("ssp+rr"));
            let ratio = rr as f64 / bsp as f64;
            ratios.push(format!("{ratio:.3}"));
            if rr < ssp && ssp < bsp && ratio <= 0.65 {
                good += 1;
            }
        }
        let took = t0.elapsed();
        let pass = good >= 4 && took < Duration::from_secs(60);
        ok &= pass;
        parts.push(format!(
            "{name} {good}/5 seeds ordered, rr/bsp waste [{}], {:.1?}",
            ratios.join(" "),
            took
        ));
    }
    report(2, ok, "slow-worker ordering", parts.join("; "));
    assert!(ok);
}

#[test]
fn criterion_03_disrupted_machine_near_ideal() {
    let t0 = Instant::now();
    let ideal = run(&config("mf", "ssp", StragglerConfig::ideal(), 0));
    let rr = run(&config(
        "mf",
        "ssp+rr",
        StragglerConfig::with_pattern(Pattern::DisruptedMachine),
        0,
    ));
    let bsp = run(&config(
        "mf",
        "bsp",
        StragglerConfig::with_pattern(Pattern::DisruptedMachine),
        0,
    ));
    // the ideal run's wall time is its makespan; the sum over workers is
    // printed as the looser reading
    let ideal_wall: Ticks = ideal.records.iter().map(IterationRecord::wall_ticks).sum();
    let took = t0.elapsed();
    let share = rr.t_waste as f64 / ideal.makespan as f64;
    let pass = share <= 0.15 && ideal.t_waste == 0 && took < Duration::from_secs(60);
    report(
        3,
        pass,
        "disrupted machine",
        format!(
            "ssp+rr waste {:.3} ms = {:.2}% of ideal wall time {:.3} ms ({:.2}% of the {:.3} ms summed over workers; bsp waste {:.3} ms), {:.1?}",
            ms(rr.t_waste),
            share * 100.0,
            ms(ideal.makespan),
            rr.t_waste as f64 / ideal_wall as f64 * 100.0,
            ms(ideal_wall),
            ms(bsp.t_waste),
            took
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_power_law_monotonicity() {
    let t0 = Instant::now();
    let alphas = [4.0, 7.0, 11.0];
    let mut ok = true;
    let mut increases = BTreeMap::new();
    let mut parts = Vec::new();
    for mode in ["bsp", "ssp", "ssp+rr", "bsp+spec"] {
        let times: Vec<Ticks> = alphas
            .iter()
            .map(|&alpha| {
                let mut s = StragglerConfig::with_pattern(Pattern::PowerLaw);
                s.alpha = alpha;
                run(&config("mf", mode, s, 0)).makespan
            })
            .collect();
        let monotone = times.windows(2).all(|w| w[0] >= w[1]);
        ok &= monotone;
        let inc = (times[0] as f64 - times[2] as f64) / times[2] as f64;
        increases.insert(mode, inc);
        parts.push(format!(
            "{mode} {:.1}/{:.1}/{:.1} ms (+{:.1}%{})",
            ms(times[0]),
            ms(times[1]),
            ms(times[2]),
            inc * 100.0,
            if monotone { "" } else { ", not monotone" }
        ));
    }
    let rr = increases["ssp+rr"];
    let smallest = increases.iter().all(|(m, v)| *m == "ssp+rr" || rr < *v);
    let took = t0.elapsed();
    ok &= smallest && took < Duration::from_secs(180);
    report(
        4,
        ok,
        "power-law monotonicity",
        format!(
            "run-time at alpha 4/7/11: {}; ssp+rr smallest increase: {smallest}; {:.1?}",
            parts.join(", "),
            took
        ),
    );
    assert!(ok);
}

/// Brute-force t_iteration: per iteration, scan every record for the
/// maxima; t_waste: plain sum.
fn oracle_metrics(records: &[IterationRecord]) -> (Ticks, Ticks) {
    let max_iter = records.iter().map(|r| r.iteration).max().unwrap_or(0);
    let mut t_iter = 0;
    for it in 1..=max_iter {
        let mut comp = 0;
        let mut comm = 0;
        for r in records {
            if r.iteration == it {
                comp = comp.max(r.comp_ticks);
                comm = comm.max(r.comm_ticks);
            }
        }
        t_iter += comp + comm;
    }
    let waste = records.iter().fold(0, |acc, r| acc + r.wait_ticks);
    (t_iter, waste)
}

#[test]
fn criterion_05_metrics_match_brute_force() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let workers = rng.gen_range(1..=12);
        let iterations = rng.gen_range(1..=25);
        let mut records = Vec::new();
        for it in 1..=iterations {
            for w in 0..workers {
                records.push(IterationRecord {
                    worker: w,
                    iteration: it,
                    comp_ticks: rng.gen_range(0..5_000_000),
                    comm_ticks: rng.gen_range(0..1_000_000),
                    wait_ticks: if rng.gen_bool(0.3) {
                        0
                    } else {
                        rng.gen_range(0..3_000_000)
                    },
                });
            }
        }
        // the metric must not depend on row order
        let len = records.len();
        for i in (1..len).rev() {
            records.swap(i, rng.gen_range(0..=i));
        }
        let got = (
            compute_t_iteration(&records).unwrap(),
            compute_t_waste(&records).unwrap(),
        );
        if got != oracle_metrics(&records) {
            mismatches += 1;
        }
    }
    let took = t0.elapsed();
    let pass = mismatches == 0 && took < Duration::from_secs(5);
    report(
        5,
        pass,
        "metrics oracle",
        format!("{mismatches} mismatches in 1000 tables, {took:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_06_staleness_bound() {
    let t0 = Instant::now();
    let mut runs = 0;
    let mut worst = String::new();
    let mut ok = true;
    let patterns = [
        StragglerConfig::ideal(),
        slow_worker(),
        StragglerConfig::with_pattern(Pattern::PowerLaw),
        StragglerConfig::with_pattern(Pattern::DisruptedMachine),
        {
            let mut s = StragglerConfig::with_pattern(Pattern::Persistent);
            s.persistent_workers = vec![2];
            s
        },
    ];
    for name in ["mf", "lr", "lda"] {
        for s in &patterns {
            for mode in ["bsp", "ssp", "ssp+rr", "bsp+rr", "bsp+spec"] {
                for slack in [0, 1, 3] {
                    if mode.starts_with("bsp") && slack > 0 {
                        continue;
                    }
                    let mut c = config(name, mode, s.clone(), 1);
                    c.sync.slack = slack;
                    c.iterations = 8;
                    let r = run_experiment(&c).unwrap();
                    runs += 1;
                    let gap = trace_gap(&r);
                    let bound = r.config.policy().slack() + 1;
                    if !staleness_ok(&r) {
                        ok = false;
                        worst = format!("{name}/{}/{} gap {gap} > {bound}", r.pattern(), r.mode());
                    }
                }
            }
        }
    }
    report(
        6,
        ok,
        "staleness bound",
        format!(
            "{runs} runs here plus every run of the other criteria; max clock gap <= slack+1 in all{} ({:.1?})",
            if ok { String::new() } else { format!("; violated: {worst}") },
            t0.elapsed()
        ),
    );
    assert!(ok);
}

/// Small BSP run with random mitigation timing on at most 100 items.
fn random_schedule(case: u64) -> ExperimentConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57 ^ case);
    let mut c = ExperimentConfig {
        run_id: format!("case{case}"),
        workers: rng.gen_range(2..=6),
        iterations: rng.gen_range(2..=5),
        merge: MergeOrder::Canonical,
        ..Default::default()
    }
    .with_seed(case);
    c.workload = if rng.gen_bool(0.5) {
        WorkloadConfig::Mf(MfConfig {
            rows: 10,
            cols: 10,
            rank: 2,
            density: rng.gen_range(0.3..=1.0),
            item_cost_us: rng.gen_range(1..=50),
            ..Default::default()
        })
    } else {
        WorkloadConfig::Lr(LrConfig {
            n: rng.gen_range(12..=100),
            dim: 16,
            nnz: 4,
            item_cost_us: rng.gen_range(1..=50),
            ..Default::default()
        })
    };
    c.straggler = match rng.gen_range(0..3) {
        0 => slow_worker(),
        1 => StragglerConfig::with_pattern(Pattern::PowerLaw),
        _ => {
            let mut s = StragglerConfig::with_pattern(Pattern::DisruptedMachine);
            s.period_s = 0.001;
            s
        }
    };
    c.straggler.seed = rng.gen();
    c.straggler.probability = rng.gen_range(0.1..=0.9);
    c.mitigation.flags = match rng.gen_range(0..3) {
        0 => [MitigationFlag::Reassignment].into(),
        1 => [MitigationFlag::Speculation].into(),
        _ => [MitigationFlag::Reassignment, MitigationFlag::Speculation].into(),
    };
    c.mitigation.shed_fraction = rng.gen_range(0.05..=0.5);
    c.mitigation.detect_threshold = rng.gen_range(0.05..0.6);
    c.mitigation.clone_lag_threshold = rng.gen_range(0.05..0.6);
    c.mitigation.max_clones = rng.gen_range(1..=3);
    c.mitigation.progress_broadcast_interval = [0.1, 0.2, 0.25, 0.5, 1.0][rng.gen_range(0..5)];
    c.timing.msg_latency_us = rng.gen_range(0..=500);
    c.timing.comm_get_us = rng.gen_range(0..=300);
    c.timing.comm_add_us = rng.gen_range(0..=300);
    c
}

#[test]
fn criterion_07_exactly_once_under_mitigation() {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let (mut sheds, mut clones, mut clone_wins) = (0, 0, 0);
    for case in 0..1000 {
        let c = random_schedule(case);
        let r = match run_experiment(&c) {
            Ok(r) => r,
            Err(e) => {
                failures.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let mut off = c.clone();
        off.mitigation.flags.clear();
        let oracle = run_experiment(&off).unwrap();
        let items = oracle.stats.items_processed / c.iterations;
        let committed = r.stats.items_processed - r.stats.items_discarded;
        if committed != items * c.iterations {
            failures.push(format!(
                "case {case}: {committed} commits for {items} items x {} iterations, {:?}",
                c.iterations, r.stats
            ));
        }
        if r.table != oracle.table {
            failures.push(format!(
                "case {case}: table differs from the mitigation-off run"
            ));
        }
        sheds += r.stats.sheds;
        clones += r.stats.clones;
        clone_wins += r.stats.clone_wins;
        if !staleness_ok(&r) {
            failures.push(format!("case {case}: staleness"));
        }
    }
    let pass = failures.is_empty() && sheds > 0 && clones > 0 && clone_wins > 0;
    report(
        7,
        pass,
        "exactly-once under mitigation",
        format!(
            "1000 schedules, {sheds} sheds, {clones} clones ({clone_wins} won by the clone), {} failures{} ({:.1?})",
            failures.len(),
            failures.iter().map(|f| format!("; {f}")).collect::<String>(),
            t0.elapsed()
        ),
    );
    assert!(pass);
}

fn random_example(rng: &mut ChaCha8Rng, dim: usize) -> LabeledExample {
    let nnz = rng.gen_range(1..=8.min(dim));
    let mut idx: Vec<u32> = rand::seq::index::sample(rng, dim, nnz)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    idx.sort_unstable();
    LabeledExample {
        features: idx
            .into_iter()
            .map(|j| (j, rng.gen_range(-2.0..2.0)))
            .collect(),
        label: rng.gen_range(0..=1),
    }
}

fn loss_at(w: &[f64], ex: &LabeledExample) -> f64 {
    log_loss(sigmoid(ex.margin_score(w)), ex.label)
}

#[test]
fn criterion_08_workload_correctness() {
    let t0 = Instant::now();

    // LR: the SGD delta is -step * dL/dw; compare with central differences
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let dim = rng.gen_range(2..=30);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ex = random_example(&mut rng, dim);
        let step = rng.gen_range(0.01..1.0);
        let (deltas, _) = lr_sgd_iteration(&w, std::slice::from_ref(&ex), step).unwrap();
        for (j, d) in deltas {
            let analytic = -d[0] / step;
            let h = 1e-5;
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[j as usize] += h;
            wm[j as usize] -= h;
            let fd = (loss_at(&wp, &ex) - loss_at(&wm, &ex)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    let lr_ok = worst < 1e-5;

    // MF: sequential SGD on planted rank-3 data
    let ratings = gen_mf(60, 60, 3, 0.5, 0.0, 8).unwrap();
    let mut model = FactorModel::random(60, 60, 3, 0.5, 8);
    let before = rmse(&model.view(), &ratings);
    for _ in 0..30 {
        mf_sequential_epoch(&mut model, &ratings, 0.05, 0.0).unwrap();
    }
    let after = rmse(&model.view(), &ratings);
    let mf_ok = before / after >= 10.0;

    // LDA: counts rebuild-consistent after every sweep, tokens conserved
    let cfg = LdaConfig {
        docs: 200,
        doc_len: 50,
        vocab: 500,
        topics: 10,
        ..Default::default()
    };
    let corpus: Corpus =
        psbench_core::workloads::lda::gen_corpus(cfg.docs, cfg.doc_len, cfg.vocab, cfg.topics, 8)
            .unwrap();
    let mut state = TopicState::random(&corpus, 8).unwrap();
    let tokens = corpus.total_tokens();
    let mut lda_ok = true;
    for it in 1..=20 {
        let res = lda_gibbs_iteration(
            &state,
            &corpus,
            Interval::new(0, corpus.docs.len()),
            cfg.alpha_prior,
            cfg.beta_prior,
            8,
            it,
        )
        .unwrap();
        state.apply(&res).unwrap();
        lda_ok &= state.check_consistent(&corpus).is_ok() && state.total_count() == tokens;
    }
    // and end to end: the server's table after a mitigated SSP run
    let mut c = config("lda", "ssp+rr", slow_worker(), 3);
    c.workload = WorkloadConfig::Lda(cfg.clone());
    c.workers = 4;
    let r = run(&c);
    let k = cfg.topics;
    let mut word_freq = vec![0.0; cfg.vocab];
    for d in &corpus_for(&cfg, c.seed).docs {
        for &w in d {
            word_freq[w as usize] += 1.0;
        }
    }
    let rows: Vec<f64> = r.table.chunks(k).map(|row| row.iter().sum()).collect();
    let totals = &r.table[cfg.vocab * k..];
    let column_sums: Vec<f64> = (0..k)
        .map(|t| (0..cfg.vocab).map(|w| r.table[w * k + t]).sum())
        .collect();
    lda_ok &= rows[..cfg.vocab] == word_freq[..]
        && rows[cfg.vocab] == corpus_for(&cfg, c.seed).total_tokens() as f64
        && totals == &column_sums[..]
        && r.table.iter().all(|x| *x >= 0.0);

    let took = t0.elapsed();
    let pass = lr_ok && mf_ok && lda_ok && took < Duration::from_secs(60);
    report(
        8,
        pass,
        "workload correctness",
        format!(
            "lr worst relative FD error {worst:.2e}; mf rmse {before:.4} -> {after:.6} ({:.0}x); lda consistent and conserved: {lda_ok}; {took:.1?}",
            before / after
        ),
    );
    assert!(pass);
}

fn corpus_for(cfg: &LdaConfig, seed: u64) -> Corpus {
    psbench_core::workloads::lda::gen_corpus(cfg.docs, cfg.doc_len, cfg.vocab, cfg.topics, seed)
        .unwrap()
}

#[test]
fn criterion_09_determinism() {
    let t0 = Instant::now();
    let mut configs = vec![
        config("mf", "ssp+rr", slow_worker(), 4),
        config(
            "lr",
            "bsp+spec",
            StragglerConfig::with_pattern(Pattern::PowerLaw),
            4,
        ),
        config(
            "lda",
            "ssp",
            StragglerConfig::with_pattern(Pattern::DisruptedMachine),
            4,
        ),
    ];
    let mut both = config("mf", "bsp", slow_worker(), 4);
    both.mitigation.flags = [MitigationFlag::Reassignment, MitigationFlag::Speculation].into();
    both.run_id = "mf-bsp-both".into();
    configs.push(both);
    let mut identical = 0;
    for c in &configs {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_to_dir(c, a.path()).unwrap();
        run_to_dir(c, b.path()).unwrap();
        assert!(staleness_ok(&ra));
        let same = ["records.csv", "summary.csv"].iter().all(|f| {
            let x = std::fs::read(a.path().join(&c.run_id).join(f)).unwrap();
            let y = std::fs::read(b.path().join(&c.run_id).join(f)).unwrap();
            !x.is_empty() && x == y
        });
        identical += usize::from(same);
    }
    let pass = identical == configs.len();
    report(
        9,
        pass,
        "determinism",
        format!(
            "{identical}/{} configs byte-identical records.csv and summary.csv across two runs ({:.1?})",
            configs.len(),
            t0.elapsed()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_injection_statistics() {
    let t0 = Instant::now();
    let mut s = slow_worker();
    s.seed = 10;
    let mut hits = 0u64;
    let draws = 100_000u64;
    for k in 0..draws {
        // keyed by (worker, iteration) over a 100 x 1000 grid
        if check_transient_straggler((k % 100) as usize, k / 100 + 1, &s) {
            hits += 1;
        }
    }
    let rate = hits as f64 / draws as f64;
    let rate_ok = (rate - s.probability).abs() <= 0.005;

    let mut pareto = Vec::new();
    let mut pareto_ok = true;
    for alpha in [4.0, 7.0, 11.0] {
        let n = 1_000_000u64;
        let mean = (0..n)
            .map(|k| {
                pareto_excess(
                    alpha,
                    powerlaw_uniform(11, (k % 1000) as usize, k / 1000 + 1),
                )
            })
            .sum::<f64>()
            / n as f64;
        let expect = 1.0 / (alpha - 1.0);
        let rel = (mean - expect).abs() / expect;
        pareto_ok &= rel < 0.01;
        pareto.push(format!(
            "alpha {alpha}: {mean:.5} vs {expect:.5} ({:.2}%)",
            rel * 100.0
        ));
    }
    let pass = rate_ok && pareto_ok;
    report(
        10,
        pass,
        "injection statistics",
        format!(
            "trigger rate {rate:.4} vs {} over {draws} draws; pareto mean excess {}; {:.1?}",
            s.probability,
            pareto.join(", "),
            t0.elapsed()
        ),
    );
    assert!(pass);
}
