//! Matrix factorization by SGD: `X ≈ L R` over the observed entries.
//!
//! Table layout: key `i < rows` holds row factor `L_i`, key `rows + j` holds
//! column factor `R_j`; the value dimension is the rank.

use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, ItemUpdate, Workload};
use crate::bench::Ticks;
use crate::error::{Error, Result};
use crate::mitigation::Interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub density: f64,
    pub noise: f64,
    pub step: f64,
    pub reg: f64,
    pub init_scale: f64,
    pub item_cost_us: Ticks,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            rows: 1000,
            cols: 1000,
            rank: 10,
            density: 0.05,
            noise: 0.0,
            step: 0.03,
            reg: 0.05,
            init_scale: 0.1,
            item_cost_us: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl RatingsMatrix {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::with_capacity(self.entries.len());
        for &(i, j, v) in &self.entries {
            if i as usize >= self.rows || j as usize >= self.cols {
                return Err(Error::Config(format!("rating ({i},{j}) out of range")));
            }
            if !v.is_finite() {
                return Err(Error::Numeric(format!("rating ({i},{j}) = {v}")));
            }
            if !seen.insert((i, j)) {
                return Err(Error::Config(format!("duplicate rating ({i},{j})")));
            }
        }
        Ok(())
    }

    /// One `row col value` triple per line.
    pub fn dump(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "# {} {}", self.rows, self.cols)?;
        for (i, j, v) in &self.entries {
            writeln!(out, "{i} {j} {v:?}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut rows = 0;
        let mut cols = 0;
        let mut entries = Vec::new();
        for line in input.lines() {
            let line = line?;
            let mut parts = line.split_whitespace();
            if line.starts_with('#') {
                parts.next();
                rows = parse(parts.next(), "rows")?;
                cols = parse(parts.next(), "cols")?;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let i: u32 = parse(parts.next(), "row")?;
            let j: u32 = parse(parts.next(), "col")?;
            let v: f64 = parse(parts.next(), "value")?;
            rows = rows.max(i as usize + 1);
            cols = cols.max(j as usize + 1);
            entries.push((i, j, v));
        }
        let m = Self {
            rows,
            cols,
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Config(format!("cannot parse {what}")))
}

/// Planted low-rank matrix: `X = U V + noise` observed on exactly
/// `round(density * rows * cols)` distinct cells, in shuffled order.
pub fn gen_mf(
    rows: usize,
    cols: usize,
    rank: usize,
    density: f64,
    noise: f64,
    seed: u64,
) -> Result<RatingsMatrix> {
    if rows == 0 || cols == 0 || rank == 0 || rank > rows.min(cols) {
        return Err(Error::Config(format!(
            "mf shape {rows}x{cols} rank {rank} is infeasible"
        )));
    }
    if !(density > 0.0 && density <= 1.0) || !(noise >= 0.0) {
        return Err(Error::Config(format!(
            "mf density {density} / noise {noise} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d66);
    // entries of X have unit variance
    let a = (3.0 / (rank as f64).sqrt()).sqrt();
    let u: Vec<f64> = (0..rows * rank).map(|_| rng.gen_range(-a..a)).collect();
    let v: Vec<f64> = (0..rank * cols).map(|_| rng.gen_range(-a..a)).collect();
    let cells = ((density * (rows * cols) as f64).round() as usize).max(1);
    let mut entries = Vec::with_capacity(cells);
    for cell in sample(&mut rng, rows * cols, cells) {
        let (i, j) = (cell / cols, cell % cols);
        let mut x: f64 = (0..rank).map(|k| u[i * rank + k] * v[k * cols + j]).sum();
        if noise > 0.0 {
            x += rng.gen_range(-noise..noise);
        }
        entries.push((i as u32, j as u32, x));
    }
    if entries.is_empty() {
        return Err(Error::Config("mf generator produced no ratings".into()));
    }
    entries.shuffle(&mut rng);
    Ok(RatingsMatrix {
        rows,
        cols,
        entries,
    })
}

/// Factor matrices stored in the table layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub params: Vec<f64>,
}

impl FactorModel {
    pub fn zeros(rows: usize, cols: usize, rank: usize) -> Self {
        Self {
            rows,
            cols,
            rank,
            params: vec![0.0; (rows + cols) * rank],
        }
    }

    pub fn random(rows: usize, cols: usize, rank: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d66_696e);
        let params = (0..(rows + cols) * rank)
            .map(|_| rng.gen::<f64>() * scale)
            .collect();
        Self {
            rows,
            cols,
            rank,
            params,
        }
    }

    /// Planted model `(u, v)` with `v` given column-major (one rank-vector
    /// per column).
    pub fn from_factors(rows: usize, cols: usize, rank: usize, u: &[f64], v_cols: &[f64]) -> Self {
        let mut params = u.to_vec();
        params.extend_from_slice(v_cols);
        Self {
            rows,
            cols,
            rank,
            params,
        }
    }

    pub fn view(&self) -> FactorView<'_> {
        FactorView {
            rows: self.rows,
            rank: self.rank,
            params: &self.params,
        }
    }

    fn apply(&mut self, key: u64, delta: &[f64]) {
        let at = key as usize * self.rank;
        for (p, d) in self.params[at..at + self.rank].iter_mut().zip(delta) {
            *p += d;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FactorView<'a> {
    pub rows: usize,
    pub rank: usize,
    pub params: &'a [f64],
}

impl<'a> FactorView<'a> {
    pub fn l(&self, i: usize) -> &'a [f64] {
        &self.params[i * self.rank..(i + 1) * self.rank]
    }

    pub fn r(&self, j: usize) -> &'a [f64] {
        let at = (self.rows + j) * self.rank;
        &self.params[at..at + self.rank]
    }

    pub fn predict(&self, i: usize, j: usize) -> f64 {
        dot(self.l(i), self.r(j))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient step for one rating against a fixed model: returns the error and
/// the (row key, delta), (column key, delta) pair.
fn rating_deltas(
    view: &FactorView<'_>,
    rating: (u32, u32, f64),
    step: f64,
    reg: f64,
) -> (f64, (u64, Vec<f64>), (u64, Vec<f64>)) {
    let (i, j, v) = (rating.0 as usize, rating.1 as usize, rating.2);
    let (li, rj) = (view.l(i), view.r(j));
    let e = v - dot(li, rj);
    let dl = li
        .iter()
        .zip(rj)
        .map(|(l, r)| step * (e * r - reg * l))
        .collect();
    let dr = li
        .iter()
        .zip(rj)
        .map(|(l, r)| step * (e * l - reg * r))
        .collect();
    (e, (i as u64, dl), ((view.rows + j) as u64, dr))
}

/// SGD deltas for the ratings in `interval`, all computed against `model`.
/// Returns the deltas in rating order and the summed squared error.
pub fn mf_sgd_iteration(
    model: &FactorView<'_>,
    ratings: &RatingsMatrix,
    interval: Interval,
    step: f64,
    reg: f64,
) -> Result<(Vec<(u64, Vec<f64>)>, f64)> {
    if interval.end > ratings.entries.len() {
        return Err(Error::Config(format!(
            "interval {interval} beyond {} ratings",
            ratings.entries.len()
        )));
    }
    let mut deltas = Vec::with_capacity(2 * interval.len());
    let mut sq = 0.0;
    for &rating in &ratings.entries[interval.start..interval.end] {
        let (e, dl, dr) = rating_deltas(model, rating, step, reg);
        check_finite("mf error", &[e])?;
        check_finite("mf delta", &dl.1)?;
        check_finite("mf delta", &dr.1)?;
        sq += e * e;
        deltas.push(dl);
        deltas.push(dr);
    }
    Ok((deltas, sq))
}

/// One epoch of classic sequential SGD (each update applied immediately).
/// Returns the summed squared error seen during the epoch.
pub fn mf_sequential_epoch(
    model: &mut FactorModel,
    ratings: &RatingsMatrix,
    step: f64,
    reg: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for &rating in &ratings.entries {
        let (e, (kl, dl), (kr, dr)) = rating_deltas(&model.view(), rating, step, reg);
        check_finite("mf delta", &dl)?;
        check_finite("mf delta", &dr)?;
        sq += e * e;
        model.apply(kl, &dl);
        model.apply(kr, &dr);
    }
    Ok(sq)
}

pub fn rmse(model: &FactorView<'_>, ratings: &RatingsMatrix) -> f64 {
    let sq: f64 = ratings
        .entries
        .iter()
        .map(|&(i, j, v)| {
            let e = v - model.predict(i as usize, j as usize);
            e * e
        })
        .sum();
    (sq / ratings.entries.len() as f64).sqrt()
}

pub struct MfWorkload {
    cfg: MfConfig,
    seed: u64,
    ratings: RatingsMatrix,
}

impl MfWorkload {
    pub fn generate(cfg: &MfConfig, seed: u64) -> Result<Self> {
        let ratings = gen_mf(cfg.rows, cfg.cols, cfg.rank, cfg.density, cfg.noise, seed)?;
        Ok(Self::new(cfg.clone(), ratings, seed))
    }

    pub fn new(cfg: MfConfig, ratings: RatingsMatrix, seed: u64) -> Self {
        Self { cfg, seed, ratings }
    }

    pub fn ratings(&self) -> &RatingsMatrix {
        &self.ratings
    }

    pub fn initial_model(&self) -> FactorModel {
        FactorModel::random(
            self.ratings.rows,
            self.ratings.cols,
            self.cfg.rank,
            self.cfg.init_scale,
            self.seed,
        )
    }

    fn view<'a>(&self, snapshot: &'a [f64]) -> FactorView<'a> {
        FactorView {
            rows: self.ratings.rows,
            rank: self.cfg.rank,
            params: snapshot,
        }
    }
}

impl Workload for MfWorkload {
    fn name(&self) -> &'static str {
        "mf"
    }

    fn num_items(&self) -> usize {
        self.ratings.entries.len()
    }

    fn table_capacity(&self) -> u64 {
        (self.ratings.rows + self.ratings.cols) as u64
    }

    fn dimension(&self) -> usize {
        self.cfg.rank
    }

    fn initial_values(&self) -> Vec<(u64, Vec<f64>)> {
        let m = self.initial_model();
        m.params
            .chunks(self.cfg.rank)
            .enumerate()
            .map(|(k, v)| (k as u64, v.to_vec()))
            .collect()
    }

    fn item_cost(&self) -> Ticks {
        self.cfg.item_cost_us
    }

    fn process_item(&self, snapshot: &[f64], item: usize, _iteration: u64) -> Result<ItemUpdate> {
        let (deltas, sq) = mf_sgd_iteration(
            &self.view(snapshot),
            &self.ratings,
            Interval::new(item, item + 1),
            self.cfg.step,
            self.cfg.reg,
        )?;
        let (keys, values) = ItemUpdate::pack(deltas);
        Ok(ItemUpdate {
            item,
            keys,
            values,
            local: None,
            loss: sq,
            clamped: 0,
        })
    }

    fn objective(&self, snapshot: &[f64]) -> f64 {
        rmse(&self.view(snapshot), &self.ratings)
    }

    fn dump(&self, out: &mut dyn Write) -> Result<()> {
        self.ratings.dump(out)
    }
}
