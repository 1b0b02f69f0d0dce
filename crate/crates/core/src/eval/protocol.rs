use std::collections::BTreeMap;

use rand::Rng;

use super::metrics::{aggregate_metrics, MetricsReport, SessionResult};
use super::split::{eval_cases, EvalCase, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{BatchInput, ParsRecModel};
use crate::numerics::{Graph, Scalar};
use crate::rng::{stream, Purpose, StreamRng};
use crate::synth::Dataset;
use crate::training::forcing::{take, teacher_force_next};

/// Negatives drawn per step.
pub const NEGATIVES: usize = 100;
const EVAL_BATCH: usize = 256;
const FALLBACK_SLOT: u64 = 0xFFFF;

/// Up to `negatives` distinct items drawn uniformly from `0..n_items`
/// minus `remaining`, followed by `remaining` itself.
///
/// Items are visited in a random order and those in `remaining` skipped, so
/// two calls with the same stream pick the same negatives wherever their
/// remaining sets agree.
pub fn sample_candidates<R: Rng + ?Sized>(
    n_items: usize,
    remaining: &[usize],
    negatives: usize,
    rng: &mut R,
) -> Vec<usize> {
    let pool = n_items - remaining.iter().filter(|&&r| r < n_items).count();
    let want = negatives.min(pool);
    let mut out = Vec::with_capacity(want + remaining.len());
    if want * 2 > pool {
        let mut all: Vec<usize> = (0..n_items).filter(|i| !remaining.contains(i)).collect();
        for i in 0..want {
            let j = rng.random_range(i..all.len());
            all.swap(i, j);
        }
        out.extend_from_slice(&all[..want]);
    } else {
        let mut seen = vec![false; n_items];
        while out.len() < want {
            let i = rng.random_range(0..n_items);
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if !remaining.contains(&i) {
                out.push(i);
            }
        }
    }
    out.extend_from_slice(remaining);
    out
}

/// Candidate order: higher score first, lower item id on ties.
#[inline]
fn ahead(sa: f64, a: usize, sb: f64, b: usize) -> bool {
    sa > sb || (sa == sb && a < b)
}

/// Best 1-based rank among `remaining` and the top candidate, given scores
/// aligned with `candidates`.
pub fn rank_step(candidates: &[usize], scores: &[f64], remaining: &[usize]) -> (usize, usize) {
    let mut top = 0;
    for i in 1..candidates.len() {
        if ahead(scores[i], candidates[i], scores[top], candidates[top]) {
            top = i;
        }
    }
    let mut best = usize::MAX;
    for (p, &c) in candidates.iter().enumerate() {
        if !remaining.contains(&c) {
            continue;
        }
        let rank = 1 + candidates
            .iter()
            .enumerate()
            .filter(|&(q, &o)| q != p && ahead(scores[q], o, scores[p], c))
            .count();
        best = best.min(rank);
    }
    (best, candidates[top])
}

/// Popularity baseline: interaction counts over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct PopModel {
    pub counts: Vec<u64>,
}

pub fn poprec_fit(ds: &Dataset, splits: &SplitSpec) -> PopModel {
    let mut counts = vec![0u64; ds.n_items];
    for us in &splits.users {
        for b in &ds.sessions[us.user][..us.train_end] {
            for &i in &b.items {
                counts[i] += 1;
            }
        }
    }
    PopModel { counts }
}

/// Candidates by descending count, lower id first on ties.
pub fn poprec_rank(pop: &PopModel, candidates: &[usize]) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| pop.counts[b].cmp(&pop.counts[a]).then(a.cmp(&b)));
    c
}

/// What ranks the candidates at each step.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a, T: Scalar = f32> {
    Model(&'a ParsRecModel<T>),
    Pop(&'a PopModel),
    /// Independent uniform scores per candidate and step.
    Random,
    /// Scores remaining basket items above everything else.
    Oracle,
}

impl<T: Scalar> Scorer<'_, T> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Model(_) => "parsrec",
            Scorer::Pop(_) => "poprec",
            Scorer::Random => "random",
            Scorer::Oracle => "oracle",
        }
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Validation => 1,
        Split::Test => 2,
    }
}

fn case_stream(seed: u64, purpose: Purpose, split: Split, user: usize, slot: u64) -> StreamRng {
    stream(
        seed,
        purpose,
        (split_tag(split) << 40) | ((user as u64) << 16) | slot,
    )
}

/// Per-basket stepping state shared by every scorer.
struct Walk {
    user: usize,
    remaining: Vec<usize>,
    ranks: Vec<usize>,
    fallback: StreamRng,
}

impl Walk {
    fn new(case: &EvalCase, split: Split, seed: u64) -> Self {
        Walk {
            user: case.user,
            remaining: case.basket.clone(),
            ranks: Vec::with_capacity(case.basket.len()),
            fallback: case_stream(seed, Purpose::Evaluation, split, case.user, FALLBACK_SLOT),
        }
    }

    fn candidates(&self, n_items: usize, split: Split, seed: u64) -> Vec<usize> {
        let step = self.ranks.len() as u64;
        let mut rng = case_stream(seed, Purpose::Evaluation, split, self.user, step);
        sample_candidates(n_items, &self.remaining, NEGATIVES, &mut rng)
    }

    /// Records the step and returns the item fed next.
    fn advance(&mut self, candidates: &[usize], scores: &[f64]) -> Result<usize> {
        let (rank, top) = rank_step(candidates, scores, &self.remaining);
        self.ranks.push(rank);
        let fed = teacher_force_next(top, &self.remaining, &mut self.fallback)?;
        take(&mut self.remaining, fed);
        Ok(fed)
    }

    fn finish(self) -> SessionResult {
        SessionResult {
            user: self.user,
            ranks: self.ranks,
        }
    }
}

/// Scores every case step by step. Candidates and fallback picks come from
/// streams keyed by (seed, split, user, step), so every scorer sees the same
/// negatives and the result does not depend on batching.
pub fn evaluate_cases<T: Scalar>(
    scorer: Scorer<'_, T>,
    cases: &[EvalCase],
    n_items: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<SessionResult>> {
    let mut out: Vec<Option<SessionResult>> = vec![None; cases.len()];
    match scorer {
        Scorer::Model(model) => {
            let mut by_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, c) in cases.iter().enumerate() {
                by_size.entry(c.basket.len()).or_default().push(i);
            }
            for (size, idx) in by_size {
                for chunk in idx.chunks(EVAL_BATCH) {
                    let results = model_batch(model, cases, chunk, size, n_items, split, seed)?;
                    for (&i, r) in chunk.iter().zip(results) {
                        out[i] = Some(r);
                    }
                }
            }
        }
        _ => {
            for (i, case) in cases.iter().enumerate() {
                let mut walk = Walk::new(case, split, seed);
                for step in 0..case.basket.len() {
                    let cands = walk.candidates(n_items, split, seed);
                    let scores: Vec<f64> = match scorer {
                        Scorer::Pop(p) => cands.iter().map(|&c| p.counts[c] as f64).collect(),
                        Scorer::Random => {
                            let mut rng = case_stream(
                                seed,
                                Purpose::RandomScorer,
                                split,
                                case.user,
                                step as u64,
                            );
                            cands.iter().map(|_| rng.random::<f64>()).collect()
                        }
                        Scorer::Oracle => cands
                            .iter()
                            .map(|c| if walk.remaining.contains(c) { 1.0 } else { 0.0 })
                            .collect(),
                        Scorer::Model(_) => unreachable!(),
                    };
                    walk.advance(&cands, &scores)?;
                }
                out[i] = Some(walk.finish());
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|r| r.expect("every case scored"))
        .collect())
}

fn model_batch<T: Scalar>(
    model: &ParsRecModel<T>,
    cases: &[EvalCase],
    chunk: &[usize],
    steps: usize,
    n_items: usize,
    split: Split,
    seed: u64,
) -> Result<Vec<SessionResult>> {
    if n_items > model.config().n_items {
        return Err(Error::InvalidArgument(format!(
            "dataset has {n_items} items, model {}",
            model.config().n_items
        )));
    }
    let users: Vec<usize> = chunk.iter().map(|&i| cases[i].user).collect();
    let histories: Vec<Vec<usize>> = chunk.iter().map(|&i| cases[i].history.clone()).collect();
    let mut walks: Vec<Walk> = chunk
        .iter()
        .map(|&i| Walk::new(&cases[i], split, seed))
        .collect();
    let mut g = Graph::new(&model.params);
    let input = BatchInput {
        users: &users,
        histories: &histories,
        steps,
        training: false,
        record_attention: false,
    };
    // Dropout is off in eval mode, so this stream is never drawn from.
    let mut unused = stream(seed, Purpose::Dropout, u64::MAX);
    model.arch.unroll(&mut g, input, &mut unused, |_, logits| {
        walks
            .iter_mut()
            .enumerate()
            .map(|(s, w)| {
                let cands = w.candidates(n_items, split, seed);
                let row = logits.row(s);
                let scores: Vec<f64> = cands.iter().map(|&c| row[c].as_f64()).collect();
                w.advance(&cands, &scores)
            })
            .collect()
    })?;
    Ok(walks.into_iter().map(Walk::finish).collect())
}

/// Runs a scorer over one split and aggregates the metrics.
pub fn evaluate_model<T: Scalar>(
    scorer: Scorer<'_, T>,
    ds: &Dataset,
    splits: &SplitSpec,
    split: Split,
    seed: u64,
    ks: &[usize],
) -> Result<MetricsReport> {
    let cases = eval_cases(ds, splits, split);
    let results = evaluate_cases(scorer, &cases, ds.n_items, split, seed)?;
    aggregate_metrics(&results, ks)
}
