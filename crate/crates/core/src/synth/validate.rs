use super::config::{build_group_sigma, CovarianceBlockPlan};
use super::linalg::cholesky;
use super::{Dataset, SynthConfig};

/// Outcome of [`validate_dataset`]; valid when `violations` is empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub sessions: usize,
    pub actions: usize,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of a dataset.
///
/// Basket bounds come from the embedded config, or the simulator defaults
/// when the dataset carries none.
pub fn validate_dataset(ds: &Dataset) -> ValidationReport {
    let defaults = SynthConfig::default();
    let cfg = ds.config.as_ref().unwrap_or(&defaults);
    let mut v = Vec::new();
    if ds.user_group.len() != ds.sessions.len() {
        v.push(format!(
            "user_group has {} entries for {} users",
            ds.user_group.len(),
            ds.sessions.len()
        ));
    }
    if let Some(g) = ds.user_group.iter().find(|&&g| g >= ds.n_groups.max(1)) {
        v.push(format!("group id {g} out of range"));
    }
    if ds.item_category.len() != ds.n_items {
        v.push("item_category length differs from n_items".into());
    }
    if ds.item_category.iter().any(|&c| c >= ds.n_categories) {
        v.push("item category out of range".into());
    }
    for (u, baskets) in ds.sessions.iter().enumerate() {
        let mut prev = None;
        for b in baskets {
            if prev.is_some_and(|p| b.t <= p) {
                v.push(format!("user {u}: timestamp {} not increasing", b.t));
            }
            prev = Some(b.t);
            let n = b.items.len();
            if n < cfg.basket_min || n > cfg.basket_max {
                v.push(format!(
                    "user {u} t {}: basket size {n} outside bounds",
                    b.t
                ));
            }
            let mut cats: Vec<usize> = Vec::with_capacity(n);
            for &i in &b.items {
                match ds.item_category.get(i) {
                    None => v.push(format!("user {u} t {}: item {i} out of range", b.t)),
                    Some(&c) if cats.contains(&c) => {
                        v.push(format!("user {u} t {}: two items of category {c}", b.t))
                    }
                    Some(&c) => cats.push(c),
                }
            }
        }
    }
    for (g, _) in ds.group_sigmas.iter().enumerate() {
        match ds.group_sigma(g) {
            None => v.push(format!("group {g}: covariance has wrong size")),
            Some(s) => {
                if let Err(e) = cholesky(&s) {
                    v.push(format!("group {g}: covariance {e}"));
                }
                if let Some(c) = &ds.config {
                    match build_group_sigma(&c.covariance, g, ds.n_categories) {
                        Ok(expected) if expected == s => {}
                        _ => v.push(format!("group {g}: covariance differs from the block plan")),
                    }
                }
            }
        }
    }
    if let Some(p) = &ds.prices {
        if p.base.len() != ds.n_categories || p.item.len() != ds.n_items {
            v.push("price table has wrong size".into());
        } else {
            for (i, &price) in p.item.iter().enumerate() {
                let nu = p.base[ds.item_category[i]];
                if !(nu > 0.0 && price >= nu / 2.0 && price <= 2.0 * nu) {
                    v.push(format!(
                        "item {i}: price {price} outside [{}, {}]",
                        nu / 2.0,
                        2.0 * nu
                    ));
                }
            }
        }
    }
    ValidationReport {
        sessions: ds.n_sessions(),
        actions: ds.n_actions(),
        violations: v,
    }
}

/// Category occurrence and pairwise co-occurrence counts over baskets.
#[derive(Debug, Clone, PartialEq)]
pub struct Cooccurrence {
    pub n_categories: usize,
    pub baskets: usize,
    pub marginal: Vec<f64>,
    /// Row-major `C×C`, symmetric, zero diagonal.
    pub joint: Vec<f64>,
}

impl Cooccurrence {
    /// `P(a, b) / (P(a) P(b))`; `None` when either category never occurs.
    pub fn lift(&self, a: usize, b: usize) -> Option<f64> {
        let (ma, mb) = (self.marginal[a], self.marginal[b]);
        if ma == 0.0 || mb == 0.0 {
            return None;
        }
        Some(self.joint[a * self.n_categories + b] * self.baskets as f64 / (ma * mb))
    }
}

/// Counts over all baskets, or only over users of `group`.
pub fn cooccurrence(ds: &Dataset, group: Option<usize>) -> Cooccurrence {
    let c = ds.n_categories;
    let mut marginal = vec![0.0; c];
    let mut joint = vec![0.0; c * c];
    let mut baskets = 0;
    for (u, b) in ds.iter_baskets() {
        if group.is_some_and(|g| ds.user_group[u] != g) {
            continue;
        }
        baskets += 1;
        let cats: Vec<usize> = b.items.iter().map(|&i| ds.item_category[i]).collect();
        for (k, &a) in cats.iter().enumerate() {
            marginal[a] += 1.0;
            for &bb in &cats[k + 1..] {
                joint[a * c + bb] += 1.0;
                joint[bb * c + a] += 1.0;
            }
        }
    }
    Cooccurrence {
        n_categories: c,
        baskets,
        marginal,
        joint,
    }
}

/// Mean lifts of category pairs by their relation in a group's plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftSummary {
    pub positive: f64,
    pub negative: f64,
    /// Pairs in different blocks (or outside all blocks).
    pub independent: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_independent: usize,
    /// Nonzero block entries whose lift lies on the plan's side of the
    /// independent mean.
    pub sign_agreements: usize,
}

impl LiftSummary {
    pub fn positive_over_independent(&self) -> f64 {
        self.positive / self.independent
    }
}

pub(crate) fn block_of(plan: &CovarianceBlockPlan, group: usize, category: usize) -> Option<usize> {
    plan.variant(group)?
        .blocks
        .iter()
        .position(|b| b.categories.contains(&category))
}

pub fn lift_summary(ds: &Dataset, plan: &CovarianceBlockPlan, group: usize) -> LiftSummary {
    let co = cooccurrence(ds, Some(group));
    let c = ds.n_categories;
    let (mut pos, mut neg, mut ind) = (Vec::new(), Vec::new(), Vec::new());
    let mut signed = Vec::new();
    for a in 0..c {
        for b in a + 1..c {
            let Some(l) = co.lift(a, b) else { continue };
            let same_block = match (block_of(plan, group, a), block_of(plan, group, b)) {
                (Some(x), Some(y)) => x == y,
                _ => false,
            };
            let r = plan.correlation(group, a, b);
            if !same_block {
                ind.push(l);
            } else if r > 0.0 {
                pos.push(l);
                signed.push((l, 1.0));
            } else if r < 0.0 {
                neg.push(l);
                signed.push((l, -1.0));
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let independent = mean(&ind);
    LiftSummary {
        positive: mean(&pos),
        negative: mean(&neg),
        independent,
        n_positive: pos.len(),
        n_negative: neg.len(),
        n_independent: ind.len(),
        sign_agreements: signed
            .iter()
            .filter(|(l, s)| (l - independent) * s > 0.0)
            .count(),
    }
}
