//! Binary logistic regression by SGD over sparse examples.
//!
//! Table layout: one key per feature, value dimension 1.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mf::parse;
use super::{check_finite, ItemUpdate, Workload};
use crate::bench::Ticks;
use crate::error::{Error, Result};

const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub n: usize,
    pub dim: usize,
    pub margin: f64,
    /// Non-zero features per example.
    pub nnz: usize,
    pub step: f64,
    pub item_cost_us: Ticks,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            n: 50_000,
            dim: 1_000,
            margin: 1.0,
            nnz: 20,
            step: 0.1,
            item_cost_us: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<(u32, f64)>,
    pub label: u8,
}

impl LabeledExample {
    pub fn margin_score(&self, w: &[f64]) -> f64 {
        self.features.iter().map(|&(j, x)| w[j as usize] * x).sum()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

pub fn log_loss(p: f64, label: u8) -> f64 {
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Linearly separable data: a random planted separator `w*` and sparse
/// examples pushed out (scaled by at most 4) so that `(2y - 1) w*·x >= margin`.
pub fn gen_lr(
    n: usize,
    dim: usize,
    margin: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<f64>)> {
    gen_lr_sparse(n, dim, dim.min(20), margin, seed)
}

pub fn gen_lr_sparse(
    n: usize,
    dim: usize,
    nnz: usize,
    margin: f64,
    seed: u64,
) -> Result<(Vec<LabeledExample>, Vec<f64>)> {
    if n == 0 || dim == 0 || nnz == 0 || nnz > dim || !(margin >= 0.0) {
        return Err(Error::Config(format!(
            "lr generator n={n} dim={dim} nnz={nnz} margin={margin} is infeasible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c72);
    let planted: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let mut idx: Vec<u32> = sample(&mut rng, dim, nnz)
            .into_iter()
            .map(|i| i as u32)
            .collect();
        idx.sort_unstable();
        let mut features: Vec<(u32, f64)> = idx
            .into_iter()
            .map(|j| (j, rng.gen_range(-1.0..1.0)))
            .collect();
        let s: f64 = features.iter().map(|&(j, x)| planted[j as usize] * x).sum();
        // near-boundary points are redrawn so the rescale below stays bounded
        if s.abs() < margin / 4.0 || s.abs() < 1e-6 {
            continue;
        }
        if s.abs() < margin {
            let k = margin / s.abs();
            for f in &mut features {
                f.1 *= k;
            }
        }
        data.push(LabeledExample {
            features,
            label: u8::from(s > 0.0),
        });
    }
    Ok((data, planted))
}

/// Scaled gradient factor `step (y - p)` and log-loss of one example.
fn lr_step(weights: &[f64], ex: &LabeledExample, step: f64) -> Result<(f64, f64)> {
    if let Some(&(j, _)) = ex
        .features
        .iter()
        .find(|(j, _)| *j as usize >= weights.len())
    {
        return Err(Error::KeyOutOfRange {
            key: j as u64,
            capacity: weights.len() as u64,
        });
    }
    let p = sigmoid(ex.margin_score(weights));
    let loss = log_loss(p, ex.label);
    check_finite("lr loss", &[loss])?;
    Ok((step * (ex.label as f64 - p), loss))
}

/// SGD deltas for `batch` against the fixed weights: `Δw = step (y - p) x`
/// per example. Returns the deltas (one per feature occurrence, in order)
/// and the summed log-loss.
pub fn lr_sgd_iteration(
    weights: &[f64],
    batch: &[LabeledExample],
    step: f64,
) -> Result<(Vec<(u64, Vec<f64>)>, f64)> {
    let mut deltas = Vec::new();
    let mut loss = 0.0;
    for ex in batch {
        let (g, l) = lr_step(weights, ex, step)?;
        loss += l;
        for &(j, x) in &ex.features {
            deltas.push((j as u64, vec![g * x]));
        }
    }
    Ok((deltas, loss))
}

/// Sequential SGD epoch (updates applied immediately); returns summed loss.
pub fn lr_sequential_epoch(weights: &mut [f64], data: &[LabeledExample], step: f64) -> Result<f64> {
    let mut loss = 0.0;
    for ex in data {
        let (deltas, l) = lr_sgd_iteration(weights, std::slice::from_ref(ex), step)?;
        loss += l;
        for (j, d) in deltas {
            weights[j as usize] += d[0];
        }
    }
    Ok(loss)
}

pub fn accuracy(weights: &[f64], data: &[LabeledExample]) -> f64 {
    let hits = data
        .iter()
        .filter(|ex| u8::from(ex.margin_score(weights) > 0.0) == ex.label)
        .count();
    hits as f64 / data.len() as f64
}

pub fn dump_svmlight(data: &[LabeledExample], out: &mut dyn Write) -> Result<()> {
    for ex in data {
        write!(out, "{}", ex.label)?;
        for (j, x) in &ex.features {
            write!(out, " {j}:{x:?}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn load_svmlight<R: BufRead>(input: R) -> Result<Vec<LabeledExample>> {
    let mut data = Vec::new();
    for line in input.lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(label) = parts.next() else { continue };
        let label: u8 = parse(Some(label), "label")?;
        if label > 1 {
            return Err(Error::Config(format!("label {label} is not binary")));
        }
        let features = parts
            .map(|p| {
                let (j, x) = p
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad feature {p}")))?;
                Ok((parse(Some(j), "index")?, parse(Some(x), "value")?))
            })
            .collect::<Result<Vec<_>>>()?;
        data.push(LabeledExample { features, label });
    }
    Ok(data)
}

pub struct LrWorkload {
    cfg: LrConfig,
    data: Vec<LabeledExample>,
}

impl LrWorkload {
    pub fn generate(cfg: &LrConfig, seed: u64) -> Result<Self> {
        let (data, _) = gen_lr_sparse(cfg.n, cfg.dim, cfg.nnz, cfg.margin, seed)?;
        Ok(Self::new(cfg.clone(), data))
    }

    pub fn new(cfg: LrConfig, data: Vec<LabeledExample>) -> Self {
        Self { cfg, data }
    }

    pub fn data(&self) -> &[LabeledExample] {
        &self.data
    }
}

impl Workload for LrWorkload {
    fn name(&self) -> &'static str {
        "lr"
    }

    fn num_items(&self) -> usize {
        self.data.len()
    }

    fn table_capacity(&self) -> u64 {
        self.cfg.dim as u64
    }

    fn dimension(&self) -> usize {
        1
    }

    fn initial_values(&self) -> Vec<(u64, Vec<f64>)> {
        Vec::new()
    }

    fn item_cost(&self) -> Ticks {
        self.cfg.item_cost_us
    }

    fn process_item(&self, snapshot: &[f64], item: usize, _iteration: u64) -> Result<ItemUpdate> {
        let ex = &self.data[item];
        let (g, loss) = lr_step(snapshot, ex, self.cfg.step)?;
        Ok(ItemUpdate {
            item,
            keys: ex.features.iter().map(|&(j, _)| j as u64).collect(),
            values: ex.features.iter().map(|&(_, x)| g * x).collect(),
            local: None,
            loss,
            clamped: 0,
        })
    }

    fn objective(&self, snapshot: &[f64]) -> f64 {
        let total: f64 = self
            .data
            .iter()
            .map(|ex| log_loss(sigmoid(ex.margin_score(snapshot)), ex.label))
            .sum();
        total / self.data.len() as f64
    }

    fn dump(&self, out: &mut dyn Write) -> Result<()> {
        dump_svmlight(&self.data, out)
    }
}
