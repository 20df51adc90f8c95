//! Iterative-convergent ML applications run on top of the parameter server.
//!
//! Every workload exposes its dataset as a sequence of items (ratings,
//! labelled examples, documents). Processing an item reads only the
//! parameter snapshot taken at the start of the iteration plus the item's own
//! local state, so the result does not depend on which worker processes it.
//! That is what lets work move between workers without changing the model.

pub mod lda;
pub mod lr;
pub mod mf;

use serde::{Deserialize, Serialize};

use crate::bench::Ticks;
use crate::error::Result;

pub use lda::{Corpus, LdaConfig, LdaWorkload, TopicState};
pub use lr::{LabeledExample, LrConfig, LrWorkload};
pub use mf::{FactorModel, MfConfig, MfWorkload, RatingsMatrix};

/// Parameter deltas and side effects of processing one item.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ItemUpdate {
    pub item: usize,
    /// Parameter keys touched by the item.
    pub keys: Vec<u64>,
    /// One delta of table dimension per key, back to back.
    pub values: Vec<f64>,
    /// Replacement local state for the item (LDA topic assignments).
    pub local: Option<Vec<u32>>,
    /// The item's contribution to the training objective.
    pub loss: f64,
    /// Count entries clamped at zero while sampling from stale tables.
    pub clamped: u64,
}

impl ItemUpdate {
    /// Packs per-key deltas into the flat layout.
    pub fn pack(deltas: Vec<(u64, Vec<f64>)>) -> (Vec<u64>, Vec<f64>) {
        let keys = deltas.iter().map(|(k, _)| *k).collect();
        let values = deltas.into_iter().flat_map(|(_, d)| d).collect();
        (keys, values)
    }

    /// The deltas as `(key, delta)` pairs.
    pub fn deltas(&self) -> impl Iterator<Item = (u64, &[f64])> {
        let dim = if self.keys.is_empty() {
            1
        } else {
            self.values.len() / self.keys.len()
        };
        self.keys.iter().copied().zip(self.values.chunks(dim))
    }
}

pub trait Workload: Send + Sync {
    fn name(&self) -> &'static str;

    fn num_items(&self) -> usize;

    fn table_capacity(&self) -> u64;

    fn dimension(&self) -> usize;

    /// Values installed into the table before the first iteration.
    fn initial_values(&self) -> Vec<(u64, Vec<f64>)>;

    /// Virtual-time cost of processing one item.
    fn item_cost(&self) -> Ticks;

    fn process_item(&self, snapshot: &[f64], item: usize, iteration: u64) -> Result<ItemUpdate>;

    /// Installs the item's new local state once its update has committed.
    fn commit_local(&self, _item: usize, _local: Vec<u32>) {}

    /// Objective of the model in `snapshot` over the whole dataset
    /// (RMSE for MF, mean log-loss for LR, per-token log-likelihood for LDA).
    fn objective(&self, snapshot: &[f64]) -> f64;

    /// Writes the dataset as plain text for inspection.
    fn dump(&self, out: &mut dyn std::io::Write) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum WorkloadConfig {
    Mf(MfConfig),
    Lr(LrConfig),
    Lda(LdaConfig),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Mf(MfConfig::default())
    }
}

impl WorkloadConfig {
    pub fn name(&self) -> &'static str {
        match self {
            WorkloadConfig::Mf(_) => "mf",
            WorkloadConfig::Lr(_) => "lr",
            WorkloadConfig::Lda(_) => "lda",
        }
    }

    /// Generates the dataset and the initial model.
    pub fn build(&self, seed: u64) -> Result<Box<dyn Workload>> {
        Ok(match self {
            WorkloadConfig::Mf(c) => Box::new(MfWorkload::generate(c, seed)?),
            WorkloadConfig::Lr(c) => Box::new(LrWorkload::generate(c, seed)?),
            WorkloadConfig::Lda(c) => Box::new(LdaWorkload::generate(c, seed)?),
        })
    }
}

pub(crate) fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(crate::error::Error::Numeric(format!("{what} produced {x}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packed_deltas_round_trip() {
        let deltas = vec![
            (3, vec![1.0, 2.0]),
            (0, vec![-1.0, 0.5]),
            (3, vec![4.0, 4.0]),
        ];
        let (keys, values) = ItemUpdate::pack(deltas.clone());
        let u = ItemUpdate {
            keys,
            values,
            ..Default::default()
        };
        let back: Vec<(u64, Vec<f64>)> = u.deltas().map(|(k, d)| (k, d.to_vec())).collect();
        assert_eq!(back, deltas);
        assert_eq!(ItemUpdate::default().deltas().count(), 0);
    }
}
