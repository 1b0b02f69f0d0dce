use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::{BatchInput, ParsRecModel, StepAttention};
use crate::numerics::{Graph, Scalar};
use crate::rng::{stream, Purpose};
use crate::synth::Dataset;
use crate::training::forcing::{take, teacher_force_next};
use crate::training::{predicted_item, SessionRef};

const BATCH: usize = 256;

/// Summed head-averaged attention of one user, keyed by (target, key) item.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UserAttention {
    pub mass: BTreeMap<(usize, usize), f64>,
    /// Steps that predicted each target item.
    pub visits: BTreeMap<usize, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAtlas {
    pub n_items: usize,
    pub item_category: Vec<usize>,
    pub n_categories: usize,
    pub users: BTreeMap<usize, UserAttention>,
}

impl AttentionAtlas {
    pub fn new(item_category: Vec<usize>, n_categories: usize) -> Self {
        AttentionAtlas {
            n_items: item_category.len(),
            item_category,
            n_categories,
            users: BTreeMap::new(),
        }
    }

    pub fn for_dataset(ds: &Dataset) -> Self {
        Self::new(ds.item_category.clone(), ds.n_categories)
    }

    /// Adds `w` to `A_u[target, key]`.
    pub fn add(&mut self, user: usize, target: usize, key: usize, w: f64) {
        *self
            .users
            .entry(user)
            .or_default()
            .mass
            .entry((target, key))
            .or_insert(0.0) += w;
    }

    /// Folds one unrolled batch in. `fed` is `[step][session]`; key 0 of
    /// every step is SOB and key `i` is the item fed after step `i - 1`.
    /// Targets and keys outside the real items (SOB, EOB) are skipped.
    pub fn accumulate<T: Scalar>(
        &mut self,
        users: &[usize],
        fed: &[Vec<usize>],
        attention: &[StepAttention<T>],
    ) {
        for (j, att) in attention.iter().enumerate() {
            for (s, &u) in users.iter().enumerate() {
                let target = fed[j][s];
                if target >= self.n_items {
                    continue;
                }
                let w = att.head_mean(s);
                let entry = self.users.entry(u).or_default();
                *entry.visits.entry(target).or_insert(0) += 1;
                for (i, &wi) in w.iter().enumerate().skip(1) {
                    let key = fed[i - 1][s];
                    if key < self.n_items {
                        *entry.mass.entry((target, key)).or_insert(0.0) += wi.as_f64();
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: AttentionAtlas) {
        for (u, ua) in other.users {
            let e = self.users.entry(u).or_default();
            for (k, v) in ua.mass {
                *e.mass.entry(k).or_insert(0.0) += v;
            }
            for (k, v) in ua.visits {
                *e.visits.entry(k).or_insert(0) += v;
            }
        }
    }
}

/// Replays `sessions` through the trained model in eval mode under teacher
/// forcing and records who attended to what.
pub fn collect_attention<T: Scalar>(
    model: &ParsRecModel<T>,
    ds: &Dataset,
    sessions: &[SessionRef],
    seed: u64,
) -> Result<AttentionAtlas> {
    let mut atlas = AttentionAtlas::for_dataset(ds);
    let mut by_size: BTreeMap<usize, Vec<SessionRef>> = BTreeMap::new();
    for &r in sessions {
        let n = ds.sessions[r.user][r.session].items.len();
        if n > 0 {
            by_size.entry(n).or_default().push(r);
        }
    }
    let n_items = model.config().n_items;
    let mut unused = stream(seed, Purpose::Dropout, u64::MAX);
    for (steps, group) in by_size {
        for chunk in group.chunks(BATCH) {
            let users: Vec<usize> = chunk.iter().map(|r| r.user).collect();
            let histories: Vec<Vec<usize>> = chunk
                .iter()
                .map(|r| crate::eval::history_before(ds, r.user, r.session))
                .collect();
            let mut remaining: Vec<Vec<usize>> = chunk
                .iter()
                .map(|r| ds.sessions[r.user][r.session].items.clone())
                .collect();
            let mut rngs: Vec<_> = chunk
                .iter()
                .map(|r| {
                    stream(
                        seed,
                        Purpose::Analysis,
                        ((r.user as u64) << 20) | r.session as u64,
                    )
                })
                .collect();
            let mut g = Graph::new(&model.params);
            let input = BatchInput {
                users: &users,
                histories: &histories,
                steps,
                training: false,
                record_attention: true,
            };
            let out = model.arch.unroll(&mut g, input, &mut unused, |_, logits| {
                remaining
                    .iter_mut()
                    .zip(rngs.iter_mut())
                    .enumerate()
                    .map(|(s, (rem, rng))| {
                        let fed =
                            teacher_force_next(predicted_item(logits.row(s), n_items), rem, rng)?;
                        take(rem, fed);
                        Ok(fed)
                    })
                    .collect()
            })?;
            atlas.accumulate(&users, &out.fed, &out.attention);
        }
    }
    Ok(atlas)
}
