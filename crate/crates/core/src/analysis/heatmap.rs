use std::fmt::Write as _;
use std::path::Path;

use super::atlas::{AttentionAtlas, UserAttention};
use crate::error::{Error, Result};
use crate::model::ParsRecModel;
use crate::numerics::{Scalar, Tensor};
use crate::synth::CovarianceBlockPlan;

/// Display filter used for exported images.
pub const DISPLAY_THRESHOLD: f64 = 0.05;

/// Square category-by-category matrix, row-major. Rows index the target
/// category, columns the attended category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryHeatmap {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CategoryHeatmap {
    pub fn zeros(n: usize) -> Self {
        CategoryHeatmap {
            n,
            values: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        CategoryHeatmap {
            n: rows.len(),
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.n..(r + 1) * self.n]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).iter().sum()).collect()
    }

    /// Rows scaled to sum to one; all-zero rows stay zero.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.n {
            let s: f64 = self.row(r).iter().sum();
            if s > 0.0 {
                out.values[r * self.n..(r + 1) * self.n]
                    .iter_mut()
                    .for_each(|v| *v /= s);
            }
        }
        out
    }

    /// Entries with magnitude below `t` set to zero.
    pub fn thresholded(&self, t: f64) -> Self {
        CategoryHeatmap {
            n: self.n,
            values: self
                .values
                .iter()
                .map(|&v| if v.abs() < t { 0.0 } else { v })
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::shape(
                "heatmap difference",
                format!("{} vs {}", self.n, other.n),
            ));
        }
        Ok(CategoryHeatmap {
            n: self.n,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

fn category_sizes(item_category: &[usize], c: usize) -> Vec<usize> {
    let mut sizes = vec![0; c];
    for &k in item_category {
        sizes[k] += 1;
    }
    sizes
}

/// The three aggregation stages on a dense `A_u`: rows summed within
/// target categories (`C×|V|`), columns averaged within key categories
/// (`C×C`), then rows normalized.
pub fn aggregate_dense(
    a: &Tensor<f64>,
    item_category: &[usize],
    n_categories: usize,
) -> Result<(Tensor<f64>, CategoryHeatmap, CategoryHeatmap)> {
    let v = item_category.len();
    if a.shape() != [v, v] {
        return Err(Error::shape(
            "aggregate_dense",
            format!("{:?} for {v} items", a.shape()),
        ));
    }
    let mut rows = vec![0.0; n_categories * v];
    for t in 0..v {
        let ct = item_category[t];
        for (k, &x) in a.row(t).iter().enumerate() {
            rows[ct * v + k] += x;
        }
    }
    let sizes = category_sizes(item_category, n_categories);
    let mut cat = CategoryHeatmap::zeros(n_categories);
    for ct in 0..n_categories {
        for k in 0..v {
            let ck = item_category[k];
            cat.values[ct * n_categories + ck] += rows[ct * v + k] / sizes[ck] as f64;
        }
    }
    let norm = cat.normalized();
    Ok((Tensor::new(vec![n_categories, v], rows)?, cat, norm))
}

fn aggregate_user(ua: &UserAttention, item_category: &[usize], sizes: &[usize]) -> CategoryHeatmap {
    let n = sizes.len();
    let mut cat = CategoryHeatmap::zeros(n);
    for (&(t, k), &w) in &ua.mass {
        let ck = item_category[k];
        cat.values[item_category[t] * n + ck] += w / sizes[ck] as f64;
    }
    cat.normalized()
}

/// Normalized category heatmap of one user (all zero if the user has no
/// recorded attention).
pub fn aggregate_to_categories(atlas: &AttentionAtlas, user: usize) -> CategoryHeatmap {
    let sizes = category_sizes(&atlas.item_category, atlas.n_categories);
    match atlas.users.get(&user) {
        Some(ua) => aggregate_user(ua, &atlas.item_category, &sizes),
        None => CategoryHeatmap::zeros(atlas.n_categories),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupHeatmaps {
    /// Mean per-user heatmap of every group.
    pub groups: Vec<CategoryHeatmap>,
    pub users_per_group: Vec<usize>,
    /// `((a, b), groups[a] - groups[b])` for every `a < b`.
    pub differences: Vec<((usize, usize), CategoryHeatmap)>,
}

impl GroupHeatmaps {
    pub fn difference(&self, a: usize, b: usize) -> Option<&CategoryHeatmap> {
        self.differences
            .iter()
            .find(|(p, _)| *p == (a, b))
            .map(|d| &d.1)
    }
}

/// Averages the per-user heatmaps of every user in the atlas by group.
pub fn group_heatmaps(
    atlas: &AttentionAtlas,
    user_group: &[usize],
    n_groups: usize,
) -> Result<GroupHeatmaps> {
    let n = atlas.n_categories;
    let sizes = category_sizes(&atlas.item_category, n);
    let mut groups = vec![CategoryHeatmap::zeros(n); n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&u, ua) in &atlas.users {
        let g = *user_group.get(u).ok_or(Error::IndexOutOfRange {
            what: "user group map",
            index: u,
            len: user_group.len(),
        })?;
        let h = aggregate_user(ua, &atlas.item_category, &sizes);
        for (acc, v) in groups[g].values.iter_mut().zip(&h.values) {
            *acc += v;
        }
        counts[g] += 1;
    }
    for (h, &c) in groups.iter_mut().zip(&counts) {
        if c == 0 {
            return Err(Error::Empty("user group in attention atlas"));
        }
        h.values.iter_mut().for_each(|v| *v /= c as f64);
    }
    let mut differences = Vec::new();
    for a in 0..n_groups {
        for b in a + 1..n_groups {
            differences.push(((a, b), groups[a].sub(&groups[b])?));
        }
    }
    Ok(GroupHeatmaps {
        groups,
        users_per_group: counts,
        differences,
    })
}

/// `E^V E^Vᵀ` over the real items.
pub fn embedding_similarity<T: Scalar>(model: &ParsRecModel<T>) -> Tensor<f64> {
    let ev = model.item_embeddings();
    let n = model.config().n_items;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| ev.row(i).iter().map(|x| x.as_f64()).collect())
        .collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    Tensor::new(vec![n, n], out).expect("square")
}

/// Mean heatmap entry over off-diagonal category pairs, split by the sign
/// of their correlation under one group's plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureSummary {
    pub positive: f64,
    pub negative: f64,
    /// Pairs in different blocks, or touching an unblocked category.
    pub independent: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_independent: usize,
}

pub fn structure_summary(
    heatmap: &CategoryHeatmap,
    plan: &CovarianceBlockPlan,
    group: usize,
) -> StructureSummary {
    let block = |c| crate::synth::validate::block_of(plan, group, c);
    let (mut pos, mut neg, mut ind) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..heatmap.n {
        for b in 0..heatmap.n {
            if a == b {
                continue;
            }
            let v = heatmap.get(a, b);
            match (block(a), block(b)) {
                (Some(x), Some(y)) if x == y => {
                    let r = plan.correlation(group, a, b);
                    if r > 0.0 {
                        pos.push(v);
                    } else if r < 0.0 {
                        neg.push(v);
                    }
                }
                _ => ind.push(v),
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
    StructureSummary {
        positive: mean(&pos),
        negative: mean(&neg),
        independent: mean(&ind),
        n_positive: pos.len(),
        n_negative: neg.len(),
        n_independent: ind.len(),
    }
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Over off-diagonal entries where the two groups' correlation signs differ,
/// how often `sign(diff)` matches `sign(Σ_a - Σ_b)`. Returns
/// `(agreements, entries)`.
pub fn sign_agreement(
    diff: &CategoryHeatmap,
    plan: &CovarianceBlockPlan,
    a: usize,
    b: usize,
) -> (usize, usize) {
    let mut agree = 0;
    let mut total = 0;
    for r in 0..diff.n {
        for c in 0..diff.n {
            if r == c {
                continue;
            }
            let sa = plan.correlation(a, r, c);
            let sb = plan.correlation(b, r, c);
            if sign(sa) == sign(sb) {
                continue;
            }
            total += 1;
            let d = diff.get(r, c);
            if sign(d) == sign(sa - sb) {
                agree += 1;
            }
        }
    }
    (agree, total)
}

fn csv_text(values: &[f64], rows: usize, cols: usize, labels: &[String]) -> String {
    let mut s = String::from("label");
    for l in &labels[..cols] {
        let _ = write!(s, ",{l}");
    }
    s.push('\n');
    for r in 0..rows {
        s.push_str(&labels[r]);
        for c in 0..cols {
            let _ = write!(s, ",{:.6}", values[r * cols + c]);
        }
        s.push('\n');
    }
    s
}

/// Binary PPM: white at zero, red for positive, blue for negative, scaled by
/// the largest magnitude. Each cell is `scale`×`scale` pixels.
fn ppm(values: &[f64], rows: usize, cols: usize, threshold: f64, scale: usize) -> Vec<u8> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = format!("P6\n{} {}\n255\n", cols * scale, rows * scale).into_bytes();
    for r in 0..rows {
        for _ in 0..scale {
            for c in 0..cols {
                let v = values[r * cols + c];
                let v = if v.abs() < threshold { 0.0 } else { v };
                let t = if max > 0.0 {
                    (v.abs() / max).min(1.0)
                } else {
                    0.0
                };
                let fade = (255.0 * (1.0 - t)).round() as u8;
                let px = if v >= 0.0 {
                    [255, fade, fade]
                } else {
                    [fade, fade, 255]
                };
                for _ in 0..scale {
                    out.extend_from_slice(&px);
                }
            }
        }
    }
    out
}

/// Writes `<stem>.csv` (exact values with labels) and `<stem>.ppm` (entries
/// below `threshold` in magnitude blanked).
pub fn export_heatmap(
    values: &[f64],
    rows: usize,
    cols: usize,
    labels: &[String],
    threshold: f64,
    stem: &Path,
) -> Result<()> {
    if values.len() != rows * cols || labels.len() < rows.max(cols) {
        return Err(Error::shape(
            "export_heatmap",
            format!(
                "{} values, {rows}x{cols}, {} labels",
                values.len(),
                labels.len()
            ),
        ));
    }
    std::fs::write(
        stem.with_extension("csv"),
        csv_text(values, rows, cols, labels),
    )?;
    let scale = (256 / rows.max(cols)).clamp(1, 16);
    std::fs::write(
        stem.with_extension("ppm"),
        ppm(values, rows, cols, threshold, scale),
    )?;
    Ok(())
}

pub fn category_labels(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("c{c}")).collect()
}

pub fn export_category_heatmap(h: &CategoryHeatmap, threshold: f64, stem: &Path) -> Result<()> {
    export_heatmap(&h.values, h.n, h.n, &category_labels(h.n), threshold, stem)
}
