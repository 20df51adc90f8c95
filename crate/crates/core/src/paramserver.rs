//! Sharded in-memory parameter table with the Get / Add / Clock client API.
//!
//! Adds are buffered per worker and become visible when that worker calls
//! [`ParameterServer::clock`], or under [`MergeOrder::Canonical`] once every
//! worker has clocked the iteration. Reads are admitted according to the active
//! [`SyncPolicy`]; a worker that runs too far ahead of the slowest one blocks
//! inside `get` until the slowest catches up.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::consistency::{may_proceed, ClockBoard, ClusterClockView, SyncPolicy};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParameterKey(pub u64);

impl fmt::Display for ParameterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

pub type ParameterValue = Vec<f64>;

pub fn shard_of(key: ParameterKey, num_shards: usize) -> usize {
    assert!(num_shards >= 1, "shard count must be positive");
    (key.0 % num_shards as u64) as usize
}

/// Order in which buffered Adds are folded into the table.
///
/// `Arrival` applies each worker's buffer as soon as it clocks. `Canonical`
/// holds an iteration's Adds until every worker has clocked it and then
/// applies them sorted by item index, so the floating-point result does not
/// depend on scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeOrder {
    #[default]
    Arrival,
    Canonical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableConfig {
    /// Number of addressable keys.
    pub capacity: u64,
    pub dimension: usize,
    pub num_shards: usize,
    pub merge: MergeOrder,
}

#[derive(Debug, Clone, Copy)]
struct BufferedAdd {
    item: u64,
    worker: usize,
    key: u64,
    /// Offset of the delta in the owning buffer's `values`.
    at: usize,
}

/// One worker's Adds since its last clock; deltas are packed in `values`.
#[derive(Debug, Default)]
struct AddBuffer {
    adds: Vec<BufferedAdd>,
    values: Vec<f64>,
}

#[derive(Default)]
struct Shard {
    entries: FxHashMap<u64, ParameterValue>,
}

impl Shard {
    fn apply(&mut self, key: u64, delta: &[f64]) {
        let entry = self
            .entries
            .entry(key)
            .or_insert_with(|| vec![0.0; delta.len()]);
        for (e, d) in entry.iter_mut().zip(delta) {
            *e += d;
        }
    }
}

/// Tag used for Adds that are not attributed to a dataset item; they sort
/// after all item-tagged Adds in canonical mode.
pub const UNTAGGED: u64 = u64::MAX;

pub struct ParameterServer {
    cfg: TableConfig,
    policy: SyncPolicy,
    shards: Vec<Mutex<Shard>>,
    buffers: Vec<Mutex<AddBuffer>>,
    pending: Mutex<BTreeMap<u64, Vec<AddBuffer>>>,
    board: ClockBoard,
    wait_timeout: Duration,
}

impl ParameterServer {
    pub fn new(cfg: TableConfig, workers: usize, policy: SyncPolicy) -> Result<Self> {
        if cfg.dimension == 0 || cfg.num_shards == 0 || cfg.capacity == 0 {
            return Err(Error::Config(format!(
                "table needs positive capacity, dimension and shard count: {cfg:?}"
            )));
        }
        if workers == 0 {
            return Err(Error::Config("no workers".into()));
        }
        Ok(Self {
            shards: (0..cfg.num_shards).map(|_| Mutex::default()).collect(),
            buffers: (0..workers).map(|_| Mutex::default()).collect(),
            pending: Mutex::default(),
            board: ClockBoard::new(workers),
            wait_timeout: Duration::from_secs(30),
            cfg,
            policy,
        })
    }

    pub fn with_wait_timeout(mut self, timeout: Duration) -> Self {
        self.wait_timeout = timeout;
        self
    }

    pub fn config(&self) -> &TableConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &SyncPolicy {
        &self.policy
    }

    pub fn workers(&self) -> usize {
        self.buffers.len()
    }

    pub fn board(&self) -> &ClockBoard {
        &self.board
    }

    pub fn view(&self) -> ClusterClockView {
        self.board.view()
    }

    fn check_worker(&self, worker: usize) -> Result<()> {
        if worker < self.buffers.len() {
            Ok(())
        } else {
            Err(Error::UnknownWorker(worker))
        }
    }

    fn check_key(&self, key: ParameterKey) -> Result<()> {
        if key.0 < self.cfg.capacity {
            Ok(())
        } else {
            Err(Error::KeyOutOfRange {
                key: key.0,
                capacity: self.cfg.capacity,
            })
        }
    }

    /// True when `worker` may read under the active policy right now.
    pub fn admitted(&self, worker: usize) -> Result<bool> {
        self.check_worker(worker)?;
        let view = self.board.view();
        Ok(may_proceed(
            view.clocks()[worker],
            view.min_clock(),
            &self.policy,
        ))
    }

    /// Reads `key`, blocking until the caller is admitted.
    pub fn get(&self, worker: usize, key: ParameterKey) -> Result<ParameterValue> {
        Ok(self.get_with_wait(worker, key)?.0)
    }

    /// Like [`get`](Self::get) but also reports how long admission blocked.
    pub fn get_with_wait(
        &self,
        worker: usize,
        key: ParameterKey,
    ) -> Result<(ParameterValue, Duration)> {
        self.check_worker(worker)?;
        self.check_key(key)?;
        let waited = self
            .board
            .barrier_wait(worker, &self.policy, self.wait_timeout)?;
        Ok((self.read(key), waited))
    }

    /// Non-blocking read: `None` when the caller is not admitted yet.
    pub fn try_get(&self, worker: usize, key: ParameterKey) -> Result<Option<ParameterValue>> {
        self.check_key(key)?;
        if !self.admitted(worker)? {
            return Ok(None);
        }
        Ok(Some(self.read(key)))
    }

    fn read(&self, key: ParameterKey) -> ParameterValue {
        let shard = self.shards[shard_of(key, self.cfg.num_shards)]
            .lock()
            .unwrap();
        shard
            .entries
            .get(&key.0)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.cfg.dimension])
    }

    /// Dense copy of the whole table (`capacity × dimension`, row-major),
    /// taken after the caller has been admitted. `None` when not admitted.
    pub fn try_snapshot(&self, worker: usize) -> Result<Option<Vec<f64>>> {
        if !self.admitted(worker)? {
            return Ok(None);
        }
        Ok(Some(self.dense()))
    }

    /// Blocking dense read; returns the snapshot and the admission wait.
    pub fn snapshot(&self, worker: usize) -> Result<(Vec<f64>, Duration)> {
        self.check_worker(worker)?;
        let waited = self
            .board
            .barrier_wait(worker, &self.policy, self.wait_timeout)?;
        Ok((self.dense(), waited))
    }

    /// Dense copy without any admission check.
    pub fn dense(&self) -> Vec<f64> {
        let dim = self.cfg.dimension;
        let mut out = vec![0.0; self.cfg.capacity as usize * dim];
        for shard in &self.shards {
            let shard = shard.lock().unwrap();
            for (k, v) in &shard.entries {
                let at = *k as usize * dim;
                out[at..at + dim].copy_from_slice(v);
            }
        }
        out
    }

    /// Writes `value` into the table directly, bypassing buffers and clocks.
    /// Meant for initial model values before any worker starts.
    pub fn install(&self, key: ParameterKey, value: ParameterValue) -> Result<()> {
        self.check_key(key)?;
        if value.len() != self.cfg.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.dimension,
                got: value.len(),
            });
        }
        let mut shard = self.shards[shard_of(key, self.cfg.num_shards)]
            .lock()
            .unwrap();
        shard.entries.insert(key.0, value);
        Ok(())
    }

    pub fn add(&self, worker: usize, key: ParameterKey, delta: ParameterValue) -> Result<()> {
        self.add_for_item(worker, UNTAGGED, key, delta)
    }

    /// Buffers an Add attributed to dataset `item` (used for canonical
    /// ordering).
    pub fn add_for_item(
        &self,
        worker: usize,
        item: u64,
        key: ParameterKey,
        delta: ParameterValue,
    ) -> Result<()> {
        self.add_update(worker, item, &[key.0], &delta)
    }

    /// Buffers the Adds of one item at once: `values` holds one delta of
    /// table dimension per key, back to back. Nothing is buffered when any
    /// part is invalid.
    pub fn add_update(&self, worker: usize, item: u64, keys: &[u64], values: &[f64]) -> Result<()> {
        self.check_worker(worker)?;
        let dim = self.cfg.dimension;
        if values.len() != keys.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: keys.len() * dim,
                got: values.len(),
            });
        }
        for (&key, delta) in keys.iter().zip(values.chunks(dim)) {
            self.check_key(ParameterKey(key))?;
            if let Some(bad) = delta.iter().find(|d| !d.is_finite()) {
                return Err(Error::Numeric(format!(
                    "add to {} carries {bad}",
                    ParameterKey(key)
                )));
            }
        }
        let mut buf = self.buffers[worker].lock().unwrap();
        let base = buf.values.len();
        for (i, &key) in keys.iter().enumerate() {
            buf.adds.push(BufferedAdd {
                item,
                worker,
                key,
                at: base + i * dim,
            });
        }
        buf.values.extend_from_slice(values);
        Ok(())
    }

    /// Ends the caller's iteration: flushes its buffered Adds and advances
    /// its clock by one. Returns the new clock value.
    pub fn clock(&self, worker: usize) -> Result<u64> {
        self.check_worker(worker)?;
        let flushed = {
            let mut buf = self.buffers[worker].lock().unwrap();
            // the next iteration usually buffers about as much
            let next = AddBuffer {
                adds: Vec::with_capacity(buf.adds.len()),
                values: Vec::with_capacity(buf.values.len()),
            };
            std::mem::replace(&mut *buf, next)
        };
        let iteration = self.board.view().clocks()[worker] + 1;
        match self.cfg.merge {
            MergeOrder::Arrival => self.apply_all(flushed.adds.iter().map(|a| (a, &flushed))),
            MergeOrder::Canonical => {
                self.pending
                    .lock()
                    .unwrap()
                    .entry(iteration)
                    .or_default()
                    .push(flushed);
            }
        }
        let new = self.board.advance(worker)?;
        if self.cfg.merge == MergeOrder::Canonical {
            self.release_complete_iterations();
        }
        Ok(new)
    }

    fn apply_all<'a>(&self, adds: impl IntoIterator<Item = (&'a BufferedAdd, &'a AddBuffer)>) {
        let dim = self.cfg.dimension;
        let mut shards: Vec<_> = self.shards.iter().map(|s| s.lock().unwrap()).collect();
        for (a, buf) in adds {
            shards[shard_of(ParameterKey(a.key), self.cfg.num_shards)]
                .apply(a.key, &buf.values[a.at..a.at + dim]);
        }
    }

    fn release_complete_iterations(&self) {
        let min = self.board.view().min_clock();
        let mut pending = self.pending.lock().unwrap();
        let ready: Vec<u64> = pending.range(..=min).map(|(k, _)| *k).collect();
        for it in ready {
            let bufs = pending.remove(&it).unwrap_or_default();
            let mut adds: Vec<_> = bufs
                .iter()
                .flat_map(|b| b.adds.iter().map(move |a| (a, b)))
                .collect();
            adds.sort_by_key(|(a, _)| (a.item, a.worker));
            self.apply_all(adds);
        }
    }

    pub fn clock_of(&self, worker: usize) -> Result<u64> {
        self.check_worker(worker)?;
        Ok(self.board.view().clocks()[worker])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::SyncPolicy;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;
    use std::thread;

    fn server(workers: usize, dim: usize, policy: SyncPolicy) -> ParameterServer {
        ParameterServer::new(
            TableConfig {
                capacity: 64,
                dimension: dim,
                num_shards: 4,
                merge: MergeOrder::Arrival,
            },
            workers,
            policy,
        )
        .unwrap()
    }

    #[test]
    fn shard_routing() {
        assert_eq!(shard_of(ParameterKey(0), 4), 0);
        assert_eq!(shard_of(ParameterKey(7), 4), 3);
        assert_eq!(shard_of(ParameterKey(1_000_003), 8), 3);
    }

    #[test]
    fn absent_key_reads_zero() {
        let ps = server(1, 3, SyncPolicy::bsp());
        assert_eq!(ps.get(0, ParameterKey(5)).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn adds_aggregate_after_clock() {
        let ps = server(2, 2, SyncPolicy::bsp());
        let k = ParameterKey(9);
        ps.add(0, k, vec![1.0, 2.0]).unwrap();
        ps.add(1, k, vec![3.0, 4.0]).unwrap();
        // buffered until the owner clocks
        assert_eq!(ps.dense()[18..20], [0.0, 0.0]);
        ps.clock(0).unwrap();
        ps.clock(1).unwrap();
        assert_eq!(ps.get(0, k).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn item_update_is_all_or_nothing() {
        let ps = server(1, 2, SyncPolicy::bsp());
        // second key out of range: nothing from the batch may land
        assert!(ps
            .add_update(0, 4, &[1, 64], &[1.0, 1.0, 2.0, 2.0])
            .is_err());
        assert!(ps.add_update(0, 4, &[1, 2], &[1.0, 1.0, 2.0]).is_err());
        assert!(ps
            .add_update(0, 4, &[1, 2], &[1.0, f64::INFINITY, 2.0, 2.0])
            .is_err());
        ps.add_update(0, 4, &[1, 2], &[1.0, 1.5, 2.0, 2.5]).unwrap();
        ps.clock(0).unwrap();
        assert_eq!(ps.dense()[2..6], [1.0, 1.5, 2.0, 2.5]);
    }

    #[test]
    fn zero_and_inverse_adds() {
        let ps = server(1, 1, SyncPolicy::bsp());
        let k = ParameterKey(3);
        ps.add(0, k, vec![0.0]).unwrap();
        ps.clock(0).unwrap();
        assert_eq!(ps.get(0, k).unwrap(), vec![0.0]);
        ps.add(0, k, vec![1.0]).unwrap();
        ps.add(0, k, vec![-1.0]).unwrap();
        ps.clock(0).unwrap();
        assert_eq!(ps.get(0, k).unwrap(), vec![0.0]);
    }

    #[test]
    fn contract_errors() {
        let ps = server(1, 2, SyncPolicy::bsp());
        assert!(matches!(
            ps.add(0, ParameterKey(1), vec![1.0]),
            Err(Error::DimensionMismatch {
                expected: 2,
                got: 1
            })
        ));
        assert!(matches!(ps.clock(3), Err(Error::UnknownWorker(3))));
        assert!(matches!(
            ps.get(7, ParameterKey(0)),
            Err(Error::UnknownWorker(7))
        ));
        assert!(ps.add(0, ParameterKey(64), vec![1.0, 1.0]).is_err());
        assert!(matches!(
            ps.add(0, ParameterKey(1), vec![f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn clocks_count_per_worker() {
        let ps = server(4, 1, SyncPolicy::ssp(40));
        assert_eq!(ps.clock(0).unwrap(), 1);
        for _ in 1..20 {
            ps.clock(0).unwrap();
        }
        assert_eq!(ps.clock_of(0).unwrap(), 20);
        // scripted interleaving
        let script = [1, 2, 1, 3, 3, 3, 2, 1, 1];
        for w in script {
            ps.clock(w).unwrap();
        }
        assert_eq!(ps.clock_of(1).unwrap(), 4);
        assert_eq!(ps.clock_of(2).unwrap(), 2);
        assert_eq!(ps.clock_of(3).unwrap(), 3);
        assert_eq!(ps.clock_of(0).unwrap(), 20);
    }

    #[test]
    fn arrival_order_does_not_change_sums_of_small_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adds: Vec<(usize, u64, f64)> = (0..100)
            .map(|_| {
                (
                    rng.gen_range(0..3),
                    rng.gen_range(0..10),
                    rng.gen_range(-50..50) as f64,
                )
            })
            .collect();
        let run = |order: &[(usize, u64, f64)]| {
            let ps = server(3, 1, SyncPolicy::ssp(100));
            for &(w, k, v) in order {
                ps.add(w, ParameterKey(k), vec![v]).unwrap();
            }
            for w in 0..3 {
                ps.clock(w).unwrap();
            }
            ps.dense()
        };
        let mut shuffled = adds.clone();
        shuffled.shuffle(&mut rng);
        let mut sorted = adds.clone();
        sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)).then(a.2.total_cmp(&b.2)));
        // sequential oracle
        let mut oracle = vec![0.0; 64];
        for &(_, k, v) in &adds {
            oracle[k as usize] += v;
        }
        assert_eq!(run(&shuffled), oracle);
        assert_eq!(run(&sorted), oracle);
    }

    #[test]
    fn canonical_merge_is_order_independent_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let adds: Vec<(usize, u64, f64)> = (0..100)
            .map(|i| (rng.gen_range(0..3), i, rng.gen::<f64>() * 1e3 - 0.3))
            .collect();
        let run = |order: &[(usize, u64, f64)]| {
            let ps = ParameterServer::new(
                TableConfig {
                    capacity: 4,
                    dimension: 1,
                    num_shards: 2,
                    merge: MergeOrder::Canonical,
                },
                3,
                SyncPolicy::bsp(),
            )
            .unwrap();
            for &(w, item, v) in order {
                ps.add_for_item(w, item, ParameterKey(item % 4), vec![v])
                    .unwrap();
            }
            ps.clock(2).unwrap();
            ps.clock(0).unwrap();
            // not released until every worker clocked
            assert_eq!(ps.dense(), vec![0.0; 4]);
            ps.clock(1).unwrap();
            ps.dense()
        };
        let mut shuffled = adds.clone();
        shuffled.shuffle(&mut rng);
        let a = run(&adds);
        let b = run(&shuffled);
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ssp_get_blocks_until_slowest_is_within_slack() {
        let ps = Arc::new(server(2, 1, SyncPolicy::ssp(2)));
        for _ in 0..5 {
            ps.clock(0).unwrap();
        }
        ps.clock(1).unwrap();
        ps.clock(1).unwrap();
        assert_eq!(ps.try_get(0, ParameterKey(0)).unwrap(), None);
        let p = ps.clone();
        let h = thread::spawn(move || {
            let (_, waited) = p.get_with_wait(0, ParameterKey(0)).unwrap();
            (waited, p.clock_of(1).unwrap())
        });
        thread::sleep(Duration::from_millis(30));
        ps.clock(1).unwrap();
        let (waited, slow_clock) = h.join().unwrap();
        assert!(waited >= Duration::from_millis(20));
        assert_eq!(slow_clock, 3);
    }

    #[test]
    fn admitted_reads_see_everything_through_clock_minus_slack() {
        // Every worker adds 1 to its own key each iteration. A read admitted
        // at clock c must see at least c - slack contributions from everyone.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for slack in 0..4u64 {
            let ps = server(3, 1, SyncPolicy::ssp(slack));
            let mut clocks = [0u64; 3];
            for _ in 0..300 {
                let w = rng.gen_range(0..3);
                if ps.try_get(w, ParameterKey(0)).unwrap().is_none() {
                    continue;
                }
                let snap = ps.try_snapshot(w).unwrap().unwrap();
                let floor = clocks[w].saturating_sub(slack);
                for (peer, seen) in snap.iter().take(3).enumerate() {
                    assert!(*seen >= floor as f64, "peer {peer} saw {seen} < {floor}");
                }
                ps.add(w, ParameterKey(w as u64), vec![1.0]).unwrap();
                clocks[w] = ps.clock(w).unwrap();
                let v = ps.view();
                assert!(v.max_clock() - v.min_clock() <= slack + 1);
            }
        }
    }
}
