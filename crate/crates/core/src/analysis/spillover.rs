use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{eval_cases, EvalCase, Split, SplitSpec};
use crate::model::{BatchInput, ParsRecModel};
use crate::numerics::{Graph, Scalar};
use crate::rng::{stream, Purpose};
use crate::synth::Dataset;
use crate::training::forcing::{take, teacher_force_next};

const BATCH: usize = 256;
/// Stream slot offset that keeps spillover draws apart from atlas draws.
const SPILLOVER_SLOT: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpilloverRow {
    pub group: usize,
    pub category: usize,
    /// Summed per-step top-k share of the category.
    pub predicted: f64,
    /// Items of the category in the evaluated baskets.
    pub actual: usize,
    /// `|predicted - actual| / actual`; `None` without actual sales.
    pub mape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpilloverReport {
    pub removed: Option<usize>,
    pub k: usize,
    pub rows: Vec<SpilloverRow>,
    /// Prediction steps per group.
    pub steps: Vec<usize>,
    /// Evaluated baskets per group.
    pub baskets: Vec<usize>,
}

impl SpilloverReport {
    pub fn row(&self, group: usize, category: usize) -> Option<&SpilloverRow> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.category == category)
    }

    /// Predicted sales of a category per prediction step of the group.
    pub fn predicted_share(&self, group: usize, category: usize) -> f64 {
        self.row(group, category).map_or(f64::NAN, |r| r.predicted) / self.steps[group] as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,category,predicted,actual,mape\n");
        for r in &self.rows {
            let mape = r.mape.map_or("NaN".to_string(), |m| format!("{m:.6}"));
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{mape}",
                r.group, r.category, r.predicted, r.actual
            );
        }
        s
    }
}

/// Relative change of the per-step predicted share of `category` for
/// `group`, from `baseline` to `removed`.
pub fn spillover_change(
    removed: &SpilloverReport,
    baseline: &SpilloverReport,
    group: usize,
    category: usize,
) -> f64 {
    removed.predicted_share(group, category) / baseline.predicted_share(group, category) - 1.0
}

/// The `k` best candidates by logit, lower id first on ties.
fn top_k<T: Scalar>(row: &[T], allowed: &[bool], k: usize) -> Vec<usize> {
    let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, &ok) in allowed.iter().enumerate() {
        if !ok {
            continue;
        }
        let v = row[i].as_f64();
        if top.len() == k && !(v > top[k - 1].0) {
            continue;
        }
        let pos = top.partition_point(|&(s, j)| s > v || (s == v && j < i));
        top.insert(pos, (v, i));
        top.truncate(k);
    }
    top.into_iter().map(|(_, i)| i).collect()
}

/// Test-time category removal.
///
/// With `removed = Some(c0)`, test baskets containing `c0` are dropped and
/// `c0`'s items are taken out of the assortment. Every remaining item is a
/// candidate (no negative sampling). At each step, every category earns the
/// fraction of the top-`k` recommendations that belong to it; summed per
/// group this is the predicted unit sales. `removed = None` is the
/// no-removal reference run.
pub fn spillover_experiment<T: Scalar>(
    model: &ParsRecModel<T>,
    ds: &Dataset,
    splits: &SplitSpec,
    removed: Option<usize>,
    k: usize,
    seed: u64,
) -> Result<SpilloverReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(c0) = removed {
        if c0 >= ds.n_categories {
            return Err(Error::IndexOutOfRange {
                what: "removed category",
                index: c0,
                len: ds.n_categories,
            });
        }
    }
    let n_items = ds.n_items;
    if n_items > model.config().n_items {
        return Err(Error::InvalidArgument(format!(
            "dataset has {n_items} items, model {}",
            model.config().n_items
        )));
    }
    let allowed: Vec<bool> = (0..n_items)
        .map(|i| Some(ds.item_category[i]) != removed)
        .collect();
    let cases: Vec<EvalCase> = eval_cases(ds, splits, Split::Test)
        .into_iter()
        .filter(|c| c.basket.iter().all(|&i| allowed[i]))
        .collect();
    if cases.is_empty() {
        return Err(Error::Empty("test baskets after removal"));
    }

    let (g_n, c_n) = (ds.n_groups, ds.n_categories);
    let mut predicted = vec![0.0; g_n * c_n];
    let mut actual = vec![0usize; g_n * c_n];
    let mut steps = vec![0usize; g_n];
    let mut baskets = vec![0usize; g_n];
    for c in &cases {
        let g = ds.user_group[c.user];
        baskets[g] += 1;
        steps[g] += c.basket.len();
        for &i in &c.basket {
            actual[g * c_n + ds.item_category[i]] += 1;
        }
    }

    let mut by_size: BTreeMap<usize, Vec<&EvalCase>> = BTreeMap::new();
    for c in &cases {
        by_size.entry(c.basket.len()).or_default().push(c);
    }
    let mut unused = stream(seed, Purpose::Dropout, u64::MAX);
    let share = 1.0 / k as f64;
    for (n_steps, group) in by_size {
        for chunk in group.chunks(BATCH) {
            let users: Vec<usize> = chunk.iter().map(|c| c.user).collect();
            let histories: Vec<Vec<usize>> = chunk.iter().map(|c| c.history.clone()).collect();
            let mut remaining: Vec<Vec<usize>> = chunk.iter().map(|c| c.basket.clone()).collect();
            let mut rngs: Vec<_> = users
                .iter()
                .map(|&u| stream(seed, Purpose::Analysis, SPILLOVER_SLOT | u as u64))
                .collect();
            let mut graph = Graph::new(&model.params);
            let input = BatchInput {
                users: &users,
                histories: &histories,
                steps: n_steps,
                training: false,
                record_attention: false,
            };
            model
                .arch
                .unroll(&mut graph, input, &mut unused, |_, logits| {
                    let mut fed = Vec::with_capacity(users.len());
                    for (s, &u) in users.iter().enumerate() {
                        let g = ds.user_group[u];
                        let top = top_k(logits.row(s), &allowed, k);
                        for &i in &top {
                            predicted[g * c_n + ds.item_category[i]] += share;
                        }
                        let next = teacher_force_next(top[0], &remaining[s], &mut rngs[s])?;
                        take(&mut remaining[s], next);
                        fed.push(next);
                    }
                    Ok(fed)
                })?;
        }
    }

    let mut rows = Vec::with_capacity(g_n * c_n);
    for g in 0..g_n {
        for c in 0..c_n {
            let p = predicted[g * c_n + c];
            let a = actual[g * c_n + c];
            rows.push(SpilloverRow {
                group: g,
                category: c,
                predicted: p,
                actual: a,
                mape: (a > 0).then(|| (p - a as f64).abs() / a as f64),
            });
        }
    }
    Ok(SpilloverReport {
        removed,
        k,
        rows,
        steps,
        baskets,
    })
}

/// Spillover MAPE as a plain number.
pub fn mape(predicted: f64, actual: f64) -> Option<f64> {
    (actual != 0.0).then(|| (predicted - actual).abs() / actual.abs())
}
