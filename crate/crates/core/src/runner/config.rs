//! Experiment configuration: one TOML file, unknown keys rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{ClockMode, Ticks};
use crate::consistency::{MitigationFlag, SyncMode, SyncPolicy};
use crate::error::{Error, Result};
use crate::injector::StragglerConfig;
use crate::mitigation::ClonePolicy;
use crate::paramserver::MergeOrder;
use crate::workloads::WorkloadConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncSection {
    pub mode: SyncMode,
    /// Ignored (forced to 0) under BSP.
    pub slack: u64,
}

impl Default for SyncSection {
    fn default() -> Self {
        Self {
            mode: SyncMode::Bsp,
            slack: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MitigationSection {
    pub flags: BTreeSet<MitigationFlag>,
    pub detect_threshold: f64,
    pub shed_fraction: f64,
    /// Progress is reported after every this fraction of a worker's range.
    pub progress_broadcast_interval: f64,
    pub clone_lag_threshold: f64,
    pub max_clones: usize,
}

impl Default for MitigationSection {
    fn default() -> Self {
        Self {
            flags: BTreeSet::new(),
            detect_threshold: 0.25,
            shed_fraction: 0.25,
            progress_broadcast_interval: 0.1,
            clone_lag_threshold: 0.25,
            max_clones: 1,
        }
    }
}

impl MitigationSection {
    pub fn clone_policy(&self) -> ClonePolicy {
        ClonePolicy {
            lag_threshold: self.clone_lag_threshold,
            max_clones: self.max_clones,
        }
    }

    /// Mini-batches per iteration implied by the broadcast interval.
    pub fn batches(&self) -> usize {
        ((1.0 / self.progress_broadcast_interval).round() as usize).max(1)
    }
}

/// Simulated costs of the parts of an iteration that are not item compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub comm_get_us: Ticks,
    pub comm_add_us: Ticks,
    /// One-way latency of a mitigation message.
    pub msg_latency_us: Ticks,
    /// Virtual time without any clock advance after which the run aborts.
    pub deadlock_timeout_us: Ticks,
    /// Same guard for real-clock runs, in seconds.
    pub real_deadlock_timeout_s: f64,
}

impl Default for TimingSection {
    fn default() -> Self {
        Self {
            comm_get_us: 1_000,
            comm_add_us: 1_000,
            msg_latency_us: 100,
            deadlock_timeout_us: 1_000_000,
            real_deadlock_timeout_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub workers: usize,
    pub iterations: u64,
    pub clock_mode: ClockMode,
    /// Seeds dataset generation and model initialization.
    pub seed: u64,
    /// Defaults to the worker count.
    pub shards: Option<usize>,
    /// Grouping of workers into machines for the disrupted-machine pattern.
    pub workers_per_machine: usize,
    pub merge: MergeOrder,
    pub sync: SyncSection,
    pub mitigation: MitigationSection,
    pub straggler: StragglerConfig,
    pub workload: WorkloadConfig,
    pub timing: TimingSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            workers: 8,
            iterations: 20,
            clock_mode: ClockMode::Virtual,
            seed: 0,
            shards: None,
            workers_per_machine: 2,
            merge: MergeOrder::Arrival,
            sync: SyncSection::default(),
            mitigation: MitigationSection::default(),
            straggler: StragglerConfig::default(),
            workload: WorkloadConfig::default(),
            timing: TimingSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The config with every default spelled out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.resolved()).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills derived defaults (shard count, BSP slack).
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.shards = Some(c.shards.unwrap_or(c.workers).max(1));
        if c.sync.mode == SyncMode::Bsp {
            c.sync.slack = 0;
        }
        c
    }

    /// Sets the run seed and the straggler seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.straggler.seed = seed;
        self
    }

    pub fn policy(&self) -> SyncPolicy {
        let mut p = match self.sync.mode {
            SyncMode::Bsp => SyncPolicy::bsp(),
            SyncMode::Ssp => SyncPolicy::ssp(self.sync.slack),
        };
        for f in &self.mitigation.flags {
            p = p.with(*f);
        }
        p
    }

    pub fn num_shards(&self) -> usize {
        self.shards.unwrap_or(self.workers).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.contains("..")
        {
            return bad(format!("run_id {:?} is not a plain name", self.run_id));
        }
        if self.shards == Some(0) {
            return bad("shards must be positive".into());
        }
        if self.workers_per_machine == 0 {
            return bad("workers_per_machine must be positive".into());
        }
        self.policy().validate(self.iterations)?;
        self.straggler.validate(self.workers)?;
        let m = &self.mitigation;
        if !(m.detect_threshold > 0.0 && m.detect_threshold < 1.0) {
            return bad(format!(
                "detect_threshold {} outside (0,1)",
                m.detect_threshold
            ));
        }
        if !(m.shed_fraction > 0.0 && m.shed_fraction <= 0.5) {
            return bad(format!("shed_fraction {} outside (0,0.5]", m.shed_fraction));
        }
        if !(m.progress_broadcast_interval > 0.0 && m.progress_broadcast_interval <= 1.0) {
            return bad(format!(
                "progress_broadcast_interval {} outside (0,1]",
                m.progress_broadcast_interval
            ));
        }
        if !(m.clone_lag_threshold > 0.0 && m.clone_lag_threshold < 1.0) {
            return bad(format!(
                "clone_lag_threshold {} outside (0,1)",
                m.clone_lag_threshold
            ));
        }
        if m.max_clones == 0 && m.flags.contains(&MitigationFlag::Speculation) {
            return bad("speculation needs max_clones >= 1".into());
        }
        if !(self.timing.real_deadlock_timeout_s > 0.0) || self.timing.deadlock_timeout_us == 0 {
            return bad("deadlock timeouts must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("run_id = \"a\"\n").unwrap();
        assert_eq!(c.workers, 8);
        assert_eq!(c.iterations, 20);
        assert_eq!(c.workload.name(), "mf");
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let text = r#"
            run_id = "x"
            workers = 4
            [sync]
            mode = "ssp"
            slack = 2
            [mitigation]
            flags = ["reassignment"]
            [straggler]
            pattern = "power_law"
            alpha = 7.0
            [workload]
            name = "lda"
            docs = 50
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.policy().label(), "ssp+rr");
        assert_eq!(c.policy().slack(), 2);
        assert_eq!(c.workload.name(), "lda");
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("wrokers = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[sync]\nslak = 3\n").is_err());
        assert!(ExperimentConfig::from_toml("[workload]\nname = \"mf\"\nrnak = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.mitigation.shed_fraction = 0.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sync.mode = SyncMode::Ssp;
        c.sync.slack = 50;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.run_id = "../x".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.sync.mode = SyncMode::Ssp;
        c.mitigation.flags.insert(MitigationFlag::Speculation);
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c.resolved());
        assert!(text.contains("shards = 8"));
    }
}
