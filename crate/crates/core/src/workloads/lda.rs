//! Latent Dirichlet allocation by collapsed Gibbs sampling.
//!
//! Table layout: key `w < vocab` holds the word-topic counts of word `w`,
//! key `vocab` holds the topic totals; the value dimension is the topic
//! count. Doc-topic counts never leave the worker: they are derived from the
//! document's assignment vector, which is the item's local state.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mf::parse;
use super::{check_finite, ItemUpdate, Workload};
use crate::bench::Ticks;
use crate::error::{Error, Result};
use crate::injector::splitmix;
use crate::mitigation::Interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdaConfig {
    pub docs: usize,
    pub doc_len: usize,
    pub vocab: usize,
    pub topics: usize,
    pub alpha_prior: f64,
    pub beta_prior: f64,
    pub item_cost_us: Ticks,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            docs: 2000,
            doc_len: 100,
            vocab: 5000,
            topics: 10,
            alpha_prior: 0.1,
            beta_prior: 0.01,
            item_cost_us: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub docs: Vec<Vec<u32>>,
    pub vocab_size: usize,
    pub num_topics: usize,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_topics == 0 {
            return Err(Error::Config("corpus needs a vocabulary and topics".into()));
        }
        for (d, doc) in self.docs.iter().enumerate() {
            if let Some(w) = doc.iter().find(|&&w| w as usize >= self.vocab_size) {
                return Err(Error::Config(format!(
                    "doc {d}: word {w} outside vocabulary"
                )));
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> u64 {
        self.docs.iter().map(|d| d.len() as u64).sum()
    }

    /// One line per document of space-separated word ids.
    pub fn dump(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "# {} {}", self.vocab_size, self.num_topics)?;
        for doc in &self.docs {
            let line: Vec<String> = doc.iter().map(u32::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        let mut head = header.strip_prefix('#').unwrap_or("").split_whitespace();
        let vocab_size = parse(head.next(), "vocab")?;
        let num_topics = parse(head.next(), "topics")?;
        let mut docs = Vec::new();
        for line in lines {
            let line = line?;
            docs.push(
                line.split_whitespace()
                    .map(|t| parse(Some(t), "word id"))
                    .collect::<Result<Vec<u32>>>()?,
            );
        }
        let c = Corpus {
            docs,
            vocab_size,
            num_topics,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Planted topics: topic `k` owns a contiguous block of the vocabulary and
/// emits from it 90% of the time. Each document mixes a primary topic (70%)
/// with a secondary one.
pub fn gen_corpus(
    docs: usize,
    doc_len: usize,
    vocab: usize,
    topics: usize,
    seed: u64,
) -> Result<Corpus> {
    if docs == 0 || doc_len == 0 || topics == 0 || vocab < topics {
        return Err(Error::Config(format!(
            "corpus docs={docs} doc_len={doc_len} vocab={vocab} topics={topics} is infeasible"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1da0);
    let block = vocab / topics;
    let docs = (0..docs)
        .map(|_| {
            let primary = rng.gen_range(0..topics);
            let secondary = rng.gen_range(0..topics);
            (0..doc_len)
                .map(|_| {
                    let k = if rng.gen_bool(0.7) {
                        primary
                    } else {
                        secondary
                    };
                    if rng.gen_bool(0.9) {
                        (k * block + rng.gen_range(0..block)) as u32
                    } else {
                        rng.gen_range(0..vocab) as u32
                    }
                })
                .collect()
        })
        .collect();
    Ok(Corpus {
        docs,
        vocab_size: vocab,
        num_topics: topics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicState {
    pub topics: usize,
    pub vocab: usize,
    pub assignment: Vec<Vec<u32>>,
    pub doc_topic: Vec<Vec<u64>>,
    /// `vocab × topics`, row-major.
    pub word_topic: Vec<u64>,
    pub topic_totals: Vec<u64>,
}

impl TopicState {
    pub fn from_assignment(corpus: &Corpus, assignment: Vec<Vec<u32>>) -> Result<Self> {
        let k = corpus.num_topics;
        let v = corpus.vocab_size;
        if assignment.len() != corpus.docs.len() {
            return Err(Error::DimensionMismatch {
                expected: corpus.docs.len(),
                got: assignment.len(),
            });
        }
        let mut s = TopicState {
            topics: k,
            vocab: v,
            doc_topic: vec![vec![0; k]; corpus.docs.len()],
            word_topic: vec![0; v * k],
            topic_totals: vec![0; k],
            assignment,
        };
        for (d, (doc, z)) in corpus.docs.iter().zip(&s.assignment).enumerate() {
            if doc.len() != z.len() {
                return Err(Error::DimensionMismatch {
                    expected: doc.len(),
                    got: z.len(),
                });
            }
            for (&w, &t) in doc.iter().zip(z) {
                let t = t as usize;
                if t >= k || w as usize >= v {
                    return Err(Error::Invariant(format!(
                        "doc {d}: token ({w},{t}) out of range"
                    )));
                }
                s.doc_topic[d][t] += 1;
                s.word_topic[w as usize * k + t] += 1;
                s.topic_totals[t] += 1;
            }
        }
        Ok(s)
    }

    pub fn random(corpus: &Corpus, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1da1);
        let z = corpus
            .docs
            .iter()
            .map(|d| {
                d.iter()
                    .map(|_| rng.gen_range(0..corpus.num_topics) as u32)
                    .collect()
            })
            .collect();
        Self::from_assignment(corpus, z)
    }

    /// Fails unless every count table equals the one rebuilt from the
    /// assignment vector.
    pub fn check_consistent(&self, corpus: &Corpus) -> Result<()> {
        let rebuilt = Self::from_assignment(corpus, self.assignment.clone())?;
        if rebuilt != *self {
            return Err(Error::Invariant(
                "topic counts disagree with assignment".into(),
            ));
        }
        Ok(())
    }

    pub fn total_count(&self) -> u64 {
        self.word_topic.iter().sum()
    }

    /// Dense parameter-table image: word rows then the totals row.
    pub fn table(&self) -> Vec<f64> {
        self.word_topic
            .iter()
            .chain(&self.topic_totals)
            .map(|&c| c as f64)
            .collect()
    }

    /// Applies a Gibbs result: count deltas into the shared tables and the
    /// new assignments into the documents.
    pub fn apply(&mut self, result: &GibbsResult) -> Result<()> {
        let k = self.topics;
        for (key, delta) in &result.deltas {
            let row = match *key as usize {
                w if w < self.vocab => &mut self.word_topic[w * k..(w + 1) * k],
                w if w == self.vocab => &mut self.topic_totals[..],
                _ => {
                    return Err(Error::KeyOutOfRange {
                        key: *key,
                        capacity: self.vocab as u64 + 1,
                    })
                }
            };
            for (c, d) in row.iter_mut().zip(delta) {
                let next = *c as i64 + *d as i64;
                if next < 0 {
                    return Err(Error::Invariant(format!(
                        "count for key {key} went negative"
                    )));
                }
                *c = next as u64;
            }
        }
        for (d, z) in &result.assignments {
            let mut counts = vec![0; k];
            for &t in z {
                counts[t as usize] += 1;
            }
            self.doc_topic[*d] = counts;
            self.assignment[*d] = z.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GibbsResult {
    pub deltas: Vec<(u64, Vec<f64>)>,
    pub assignments: Vec<(usize, Vec<u32>)>,
    pub log_likelihood: f64,
    pub clamped: u64,
}

struct DocSample {
    assignment: Vec<u32>,
    deltas: Vec<(u64, Vec<f64>)>,
    log_likelihood: f64,
    clamped: u64,
}

fn doc_rng(seed: u64, iteration: u64, doc: usize) -> ChaCha8Rng {
    let k = splitmix(splitmix(seed ^ 0x1da2) ^ iteration);
    ChaCha8Rng::seed_from_u64(splitmix(k ^ doc as u64))
}

/// Resamples every token of one document against a fixed table image plus
/// the document's own pending changes. Effective counts below zero (possible
/// when the image is stale) are clamped and counted.
#[allow(clippy::too_many_arguments)]
fn resample_doc(
    table: &[f64],
    vocab: usize,
    topics: usize,
    doc: &[u32],
    assign: &[u32],
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DocSample> {
    let k = topics;
    let mut nd = vec![0i64; k];
    for &t in assign {
        nd[t as usize] += 1;
    }
    let mut word_ov: BTreeMap<u32, Vec<i64>> = BTreeMap::new();
    let mut tot_ov = vec![0i64; k];
    let mut z = assign.to_vec();
    let mut p = vec![0.0; k];
    let mut ll = 0.0;
    let mut clamped = 0;
    let vbeta = vocab as f64 * beta;
    let denom_doc = (doc.len() as f64 - 1.0) + k as f64 * alpha;
    for (i, &w) in doc.iter().enumerate() {
        let old = z[i] as usize;
        nd[old] -= 1;
        let ov = word_ov.entry(w).or_insert_with(|| vec![0; k]);
        ov[old] -= 1;
        tot_ov[old] -= 1;
        let row = &table[w as usize * k..(w as usize + 1) * k];
        let totals = &table[vocab * k..(vocab + 1) * k];
        let mut sum = 0.0;
        for t in 0..k {
            let mut nw = row[t] + ov[t] as f64;
            let mut nt = totals[t] + tot_ov[t] as f64;
            if nw < 0.0 {
                nw = 0.0;
                clamped += 1;
            }
            if nt < 0.0 {
                nt = 0.0;
                clamped += 1;
            }
            sum += (nd[t] as f64 + alpha) * (nw + beta) / (nt + vbeta);
            p[t] = sum;
        }
        check_finite("lda weight", &[sum])?;
        ll += (sum / denom_doc).ln();
        let u = rng.gen::<f64>() * sum;
        let new = p.iter().position(|&c| u < c).unwrap_or(k - 1);
        nd[new] += 1;
        ov[new] += 1;
        tot_ov[new] += 1;
        z[i] = new as u32;
    }
    let mut deltas: Vec<(u64, Vec<f64>)> = word_ov
        .into_iter()
        .filter(|(_, d)| d.iter().any(|&x| x != 0))
        .map(|(w, d)| (w as u64, d.into_iter().map(|x| x as f64).collect()))
        .collect();
    if tot_ov.iter().any(|&x| x != 0) {
        deltas.push((vocab as u64, tot_ov.into_iter().map(|x| x as f64).collect()));
    }
    Ok(DocSample {
        assignment: z,
        deltas,
        log_likelihood: ll,
        clamped,
    })
}

/// One Gibbs pass over the documents in `interval`, all sampled against the
/// counts in `state` as they stand on entry.
pub fn lda_gibbs_iteration(
    state: &TopicState,
    corpus: &Corpus,
    interval: Interval,
    alpha_prior: f64,
    beta_prior: f64,
    seed: u64,
    iteration: u64,
) -> Result<GibbsResult> {
    if interval.end > corpus.docs.len() {
        return Err(Error::Config(format!("interval {interval} outside corpus")));
    }
    let table = state.table();
    let mut out = GibbsResult::default();
    for d in interval.start..interval.end {
        let mut rng = doc_rng(seed, iteration, d);
        let s = resample_doc(
            &table,
            corpus.vocab_size,
            corpus.num_topics,
            &corpus.docs[d],
            &state.assignment[d],
            alpha_prior,
            beta_prior,
            &mut rng,
        )?;
        out.deltas.extend(s.deltas);
        out.assignments.push((d, s.assignment));
        out.log_likelihood += s.log_likelihood;
        out.clamped += s.clamped;
    }
    Ok(out)
}

/// Classic sequential collapsed Gibbs sweep with immediate count updates.
pub fn lda_sequential_sweep(
    state: &mut TopicState,
    corpus: &Corpus,
    alpha: f64,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let k = state.topics;
    let vbeta = state.vocab as f64 * beta;
    let mut p = vec![0.0; k];
    for (d, doc) in corpus.docs.iter().enumerate() {
        for (i, &w) in doc.iter().enumerate() {
            let w = w as usize;
            let old = state.assignment[d][i] as usize;
            state.doc_topic[d][old] -= 1;
            state.word_topic[w * k + old] -= 1;
            state.topic_totals[old] -= 1;
            let mut sum = 0.0;
            for t in 0..k {
                sum += (state.doc_topic[d][t] as f64 + alpha)
                    * (state.word_topic[w * k + t] as f64 + beta)
                    / (state.topic_totals[t] as f64 + vbeta);
                p[t] = sum;
            }
            let u = rng.gen::<f64>() * sum;
            let new = p.iter().position(|&c| u < c).unwrap_or(k - 1);
            state.doc_topic[d][new] += 1;
            state.word_topic[w * k + new] += 1;
            state.topic_totals[new] += 1;
            state.assignment[d][i] = new as u32;
        }
    }
    Ok(())
}

pub struct LdaWorkload {
    cfg: LdaConfig,
    seed: u64,
    corpus: Corpus,
    initial: TopicState,
    assignments: Vec<Mutex<Vec<u32>>>,
}

impl LdaWorkload {
    pub fn generate(cfg: &LdaConfig, seed: u64) -> Result<Self> {
        if !(cfg.alpha_prior > 0.0 && cfg.beta_prior > 0.0) {
            return Err(Error::Config("lda priors must be positive".into()));
        }
        let corpus = gen_corpus(cfg.docs, cfg.doc_len, cfg.vocab, cfg.topics, seed)?;
        Self::new(cfg.clone(), corpus, seed)
    }

    pub fn new(cfg: LdaConfig, corpus: Corpus, seed: u64) -> Result<Self> {
        corpus.validate()?;
        let initial = TopicState::random(&corpus, seed)?;
        let assignments = initial.assignment.iter().cloned().map(Mutex::new).collect();
        Ok(Self {
            cfg,
            seed,
            corpus,
            initial,
            assignments,
        })
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn initial_state(&self) -> &TopicState {
        &self.initial
    }

    /// Count tables rebuilt from the committed assignments.
    pub fn current_state(&self) -> Result<TopicState> {
        let z = self
            .assignments
            .iter()
            .map(|m| m.lock().expect("assignment lock").clone())
            .collect();
        TopicState::from_assignment(&self.corpus, z)
    }
}

impl Workload for LdaWorkload {
    fn name(&self) -> &'static str {
        "lda"
    }

    fn num_items(&self) -> usize {
        self.corpus.docs.len()
    }

    fn table_capacity(&self) -> u64 {
        self.corpus.vocab_size as u64 + 1
    }

    fn dimension(&self) -> usize {
        self.corpus.num_topics
    }

    fn initial_values(&self) -> Vec<(u64, Vec<f64>)> {
        self.initial
            .table()
            .chunks(self.corpus.num_topics)
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&c| c != 0.0))
            .map(|(w, row)| (w as u64, row.to_vec()))
            .collect()
    }

    fn item_cost(&self) -> Ticks {
        self.cfg.item_cost_us
    }

    fn process_item(&self, snapshot: &[f64], item: usize, iteration: u64) -> Result<ItemUpdate> {
        let assign = self.assignments[item]
            .lock()
            .expect("assignment lock")
            .clone();
        let mut rng = doc_rng(self.seed, iteration, item);
        let s = resample_doc(
            snapshot,
            self.corpus.vocab_size,
            self.corpus.num_topics,
            &self.corpus.docs[item],
            &assign,
            self.cfg.alpha_prior,
            self.cfg.beta_prior,
            &mut rng,
        )?;
        let (keys, values) = ItemUpdate::pack(s.deltas);
        Ok(ItemUpdate {
            item,
            keys,
            values,
            local: Some(s.assignment),
            loss: -s.log_likelihood,
            clamped: s.clamped,
        })
    }

    fn commit_local(&self, item: usize, local: Vec<u32>) {
        *self.assignments[item].lock().expect("assignment lock") = local;
    }

    /// Mean per-token log-likelihood under the committed assignments.
    fn objective(&self, snapshot: &[f64]) -> f64 {
        let k = self.corpus.num_topics;
        let v = self.corpus.vocab_size;
        let (alpha, beta) = (self.cfg.alpha_prior, self.cfg.beta_prior);
        let totals = &snapshot[v * k..(v + 1) * k];
        let mut ll = 0.0;
        for (d, doc) in self.corpus.docs.iter().enumerate() {
            let z = self.assignments[d].lock().expect("assignment lock");
            let mut nd = vec![0.0; k];
            for &t in z.iter() {
                nd[t as usize] += 1.0;
            }
            let dn = doc.len() as f64 + k as f64 * alpha;
            for &w in doc {
                let row = &snapshot[w as usize * k..(w as usize + 1) * k];
                let p: f64 = (0..k)
                    .map(|t| {
                        (nd[t] + alpha) / dn * (row[t].max(0.0) + beta)
                            / (totals[t].max(0.0) + v as f64 * beta)
                    })
                    .sum();
                ll += p.ln();
            }
        }
        ll / self.corpus.total_tokens() as f64
    }

    fn dump(&self, out: &mut dyn Write) -> Result<()> {
        self.corpus.dump(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Corpus {
        gen_corpus(30, 20, 40, 4, 5).unwrap()
    }

    #[test]
    fn single_topic_is_fixed() {
        let c = gen_corpus(10, 15, 20, 1, 2).unwrap();
        let s = TopicState::random(&c, 0).unwrap();
        let r = lda_gibbs_iteration(&s, &c, Interval::new(0, 10), 0.1, 0.01, 0, 1).unwrap();
        assert!(r.deltas.is_empty());
        let mut next = s.clone();
        next.apply(&r).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn counts_conserved_and_consistent() {
        let c = small();
        let mut s = TopicState::random(&c, 1).unwrap();
        let total = c.total_tokens();
        for it in 1..=5 {
            let r = lda_gibbs_iteration(&s, &c, Interval::new(0, 30), 0.1, 0.01, 9, it).unwrap();
            s.apply(&r).unwrap();
            s.check_consistent(&c).unwrap();
            assert_eq!(s.total_count(), total);
            assert_eq!(s.topic_totals.iter().sum::<u64>(), total);
        }
    }

    #[test]
    fn negative_count_is_breach() {
        let c = small();
        let mut s = TopicState::random(&c, 1).unwrap();
        let bad = GibbsResult {
            deltas: vec![(0, vec![-1e6, 0.0, 0.0, 0.0])],
            ..Default::default()
        };
        assert!(matches!(s.apply(&bad), Err(Error::Invariant(_))));
    }

    #[test]
    fn stale_table_clamps() {
        let c = small();
        let s = TopicState::random(&c, 1).unwrap();
        let zeros = vec![0.0; (c.vocab_size + 1) * c.num_topics];
        let mut rng = doc_rng(0, 0, 0);
        let r = resample_doc(
            &zeros,
            40,
            4,
            &c.docs[0],
            &s.assignment[0],
            0.1,
            0.01,
            &mut rng,
        )
        .unwrap();
        assert!(r.clamped > 0);
    }

    #[test]
    fn disjoint_halves_separate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let docs: Vec<Vec<u32>> = (0..40)
            .map(|d| {
                let base = if d % 2 == 0 { 0 } else { 10 };
                (0..30).map(|_| base + rng.gen_range(0..10)).collect()
            })
            .collect();
        let c = Corpus {
            docs,
            vocab_size: 20,
            num_topics: 2,
        };
        let mut s = TopicState::random(&c, 4).unwrap();
        for _ in 0..100 {
            lda_sequential_sweep(&mut s, &c, 0.1, 0.01, &mut rng).unwrap();
        }
        s.check_consistent(&c).unwrap();
        for half in [0..10usize, 10..20] {
            let mut per_topic = [0u64; 2];
            for w in half {
                per_topic[0] += s.word_topic[w * 2];
                per_topic[1] += s.word_topic[w * 2 + 1];
            }
            let frac =
                *per_topic.iter().max().unwrap() as f64 / per_topic.iter().sum::<u64>() as f64;
            assert!(frac >= 0.9, "concentration {frac}");
        }
    }

    #[test]
    fn workload_matches_free_function() {
        let cfg = LdaConfig {
            docs: 30,
            doc_len: 20,
            vocab: 40,
            topics: 4,
            ..Default::default()
        };
        let w = LdaWorkload::generate(&cfg, 5).unwrap();
        let s = w.initial_state().clone();
        let r = lda_gibbs_iteration(&s, w.corpus(), Interval::new(0, 30), 0.1, 0.01, 5, 1).unwrap();
        let table = s.table();
        for d in 0..30 {
            let u = w.process_item(&table, d, 1).unwrap();
            assert_eq!(u.local.as_ref(), Some(&r.assignments[d].1));
        }
        assert!(w.objective(&table).is_finite());
    }

    #[test]
    fn corpus_round_trip() {
        let c = small();
        let mut buf = Vec::new();
        c.dump(&mut buf).unwrap();
        assert_eq!(Corpus::load(&buf[..]).unwrap(), c);
        assert_eq!(gen_corpus(30, 20, 40, 4, 5).unwrap(), c);
    }
}
