use serde::{Deserialize, Serialize};

use super::linalg::cholesky;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Parameters of the market-basket simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_groups: usize,
    pub sessions_per_user: usize,
    pub n_categories: usize,
    pub products_per_category: usize,
    /// Base utility of every category.
    pub alpha: f64,
    /// Price sensitivity of product choice.
    pub beta: f64,
    /// Std of the per-occasion product noise.
    pub sigma: f64,
    /// Std of the per-user product base utilities.
    pub tau: f64,
    pub weibull_shape: f64,
    pub weibull_scale: f64,
    pub price_mu: f64,
    pub price_sigma: f64,
    pub basket_min: usize,
    pub basket_max: usize,
    pub vine_beta_a: f64,
    pub vine_beta_b: f64,
    pub covariance: CovarianceBlockPlan,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 1024,
            n_groups: 2,
            sessions_per_user: 80,
            n_categories: 20,
            products_per_category: 100,
            alpha: -0.5,
            beta: 0.1,
            sigma: 1.0,
            tau: 2.0,
            weibull_shape: 0.8,
            weibull_scale: 1.47,
            price_mu: 0.5,
            price_sigma: 0.1,
            basket_min: 2,
            basket_max: 10,
            vine_beta_a: 0.2,
            vine_beta_b: 1.0,
            covariance: CovarianceBlockPlan::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_items(&self) -> usize {
        self.n_categories * self.products_per_category
    }

    pub fn category_of(&self, item: usize) -> usize {
        item / self.products_per_category
    }

    pub fn items_of(&self, category: usize) -> std::ops::Range<usize> {
        let p = self.products_per_category;
        category * p..(category + 1) * p
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_groups == 0 || self.n_users % self.n_groups != 0 {
            return bad(format!(
                "n_groups ({}) must be positive and divide n_users ({})",
                self.n_groups, self.n_users
            ));
        }
        if self.n_categories == 0 || self.products_per_category == 0 {
            return bad("n_categories and products_per_category must be positive".into());
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("tau", self.tau),
            ("weibull_shape", self.weibull_shape),
            ("weibull_scale", self.weibull_scale),
            ("price_sigma", self.price_sigma),
            ("vine_beta_a", self.vine_beta_a),
            ("vine_beta_b", self.vine_beta_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.basket_min == 0
            || self.basket_min > self.basket_max
            || self.basket_max > self.n_categories
        {
            return bad(format!(
                "basket bounds [{}, {}] must satisfy 1 <= min <= max <= n_categories ({})",
                self.basket_min, self.basket_max, self.n_categories
            ));
        }
        self.covariance.validate(self.n_categories)
    }
}

/// One block of correlated categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceBlock {
    pub categories: Vec<usize>,
    /// Full correlation matrix of the block (unit diagonal).
    pub correlations: Vec<Vec<f64>>,
    #[serde(default = "unit")]
    pub variance: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPlan {
    pub blocks: Vec<CovarianceBlock>,
}

/// Block-diagonal category covariance, one variant per user group.
///
/// Group `g` uses variant `g % groups.len()`; an empty plan yields the
/// identity for every group. Categories outside all blocks are independent
/// with unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceBlockPlan {
    pub groups: Vec<GroupPlan>,
}

fn block(categories: &[usize], upper: &[f64]) -> CovarianceBlock {
    let n = categories.len();
    let mut corr = vec![vec![0.0; n]; n];
    let mut it = upper.iter();
    for i in 0..n {
        corr[i][i] = 1.0;
        for j in i + 1..n {
            let v = *it.next().expect("upper triangle length");
            corr[i][j] = v;
            corr[j][i] = v;
        }
    }
    CovarianceBlock {
        categories: categories.to_vec(),
        correlations: corr,
        variance: 1.0,
    }
}

impl Default for CovarianceBlockPlan {
    /// Blocks {0,1}, {2,3,4} and {5,6,7,8} with entries from {+0.6, 0, -0.4};
    /// the two groups disagree on most off-diagonal signs.
    fn default() -> Self {
        let a = GroupPlan {
            blocks: vec![
                block(&[0, 1], &[0.6]),
                block(&[2, 3, 4], &[0.6, 0.0, -0.4]),
                block(&[5, 6, 7, 8], &[0.6, 0.0, -0.4, 0.0, 0.0, 0.6]),
            ],
        };
        let b = GroupPlan {
            blocks: vec![
                block(&[0, 1], &[-0.4]),
                block(&[2, 3, 4], &[0.0, 0.6, -0.4]),
                block(&[5, 6, 7, 8], &[-0.4, 0.6, 0.0, 0.0, 0.6, 0.0]),
            ],
        };
        CovarianceBlockPlan { groups: vec![a, b] }
    }
}

impl CovarianceBlockPlan {
    pub fn empty() -> Self {
        CovarianceBlockPlan { groups: Vec::new() }
    }

    pub fn variant(&self, group: usize) -> Option<&GroupPlan> {
        if self.groups.is_empty() {
            None
        } else {
            Some(&self.groups[group % self.groups.len()])
        }
    }

    /// Structural checks plus a Cholesky test of every assembled matrix.
    pub fn validate(&self, n_categories: usize) -> Result<()> {
        for (g, plan) in self.groups.iter().enumerate() {
            let mut seen = vec![false; n_categories];
            let mut covered = 0;
            for blk in &plan.blocks {
                let n = blk.categories.len();
                if n == 0 {
                    return Err(Error::Config(format!("group {g}: empty block")));
                }
                if !(blk.variance > 0.0 && blk.variance.is_finite()) {
                    return Err(Error::Config(format!(
                        "group {g}: block variance must be positive"
                    )));
                }
                for &c in &blk.categories {
                    if c >= n_categories || seen[c] {
                        return Err(Error::Config(format!(
                            "group {g}: category {c} out of range or in two blocks"
                        )));
                    }
                    seen[c] = true;
                    covered += 1;
                }
                if blk.correlations.len() != n || blk.correlations.iter().any(|r| r.len() != n) {
                    return Err(Error::Config(format!(
                        "group {g}: correlation matrix must be {n}x{n}"
                    )));
                }
                for i in 0..n {
                    for j in 0..n {
                        let v = blk.correlations[i][j];
                        let ok = if i == j {
                            v == 1.0
                        } else {
                            v > -1.0 && v < 1.0 && v == blk.correlations[j][i]
                        };
                        if !ok {
                            return Err(Error::Config(format!(
                                "group {g}: correlation[{i}][{j}] = {v} invalid"
                            )));
                        }
                    }
                }
            }
            if seen[..covered].iter().any(|s| !s) {
                return Err(Error::Config(format!(
                    "group {g}: blocks must cover a prefix of the categories"
                )));
            }
            cholesky(&build_group_sigma(self, g, n_categories)?)?;
        }
        Ok(())
    }

    /// Signed correlation of categories `a`, `b` in the group's plan.
    pub fn correlation(&self, group: usize, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let Some(plan) = self.variant(group) else {
            return 0.0;
        };
        for blk in &plan.blocks {
            let ia = blk.categories.iter().position(|&c| c == a);
            let ib = blk.categories.iter().position(|&c| c == b);
            if let (Some(i), Some(j)) = (ia, ib) {
                return blk.correlations[i][j];
            }
        }
        0.0
    }
}

/// Assembles the block-diagonal covariance of `group`.
pub fn build_group_sigma(
    plan: &CovarianceBlockPlan,
    group: usize,
    n_categories: usize,
) -> Result<Tensor<f64>> {
    let mut sigma = Tensor::zeros(vec![n_categories, n_categories]);
    let data = sigma.data_mut();
    for c in 0..n_categories {
        data[c * n_categories + c] = 1.0;
    }
    if let Some(variant) = plan.variant(group) {
        for blk in &variant.blocks {
            for (i, &ci) in blk.categories.iter().enumerate() {
                for (j, &cj) in blk.categories.iter().enumerate() {
                    if ci >= n_categories || cj >= n_categories {
                        return Err(Error::IndexOutOfRange {
                            what: "covariance block category",
                            index: ci.max(cj),
                            len: n_categories,
                        });
                    }
                    data[ci * n_categories + cj] = blk.correlations[i][j] * blk.variance;
                }
            }
        }
    }
    Ok(sigma)
}
