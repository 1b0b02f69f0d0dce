use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::eval::SplitSpec;
use crate::synth::Dataset;

/// One training basket: `ds.sessions[user][session]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionRef {
    pub user: usize,
    pub session: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub sessions: Vec<SessionRef>,
    /// Unrolled steps, the largest basket of the batch.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
}

impl BatchPlan {
    pub fn n_sessions(&self) -> usize {
        self.batches.iter().map(|b| b.sessions.len()).sum()
    }
}

/// Every training-split basket in (user, session) order.
pub fn train_sessions(ds: &Dataset, splits: &SplitSpec) -> Vec<SessionRef> {
    splits
        .users
        .iter()
        .flat_map(|us| {
            (0..us.train_end).map(move |s| SessionRef {
                user: us.user,
                session: s,
            })
        })
        .filter(|r| !ds.sessions[r.user][r.session].items.is_empty())
        .collect()
}

/// Groups baskets by size, shuffles each group, cuts it into chunks of at
/// most `batch_size` and shuffles the chunk order. A batch never mixes
/// sizes, so no step is padding.
pub fn plan_batches<R: Rng + ?Sized>(
    ds: &Dataset,
    sessions: &[SessionRef],
    batch_size: usize,
    rng: &mut R,
) -> BatchPlan {
    let batch_size = batch_size.max(1);
    let mut groups: BTreeMap<usize, Vec<SessionRef>> = BTreeMap::new();
    for &r in sessions {
        groups
            .entry(ds.sessions[r.user][r.session].items.len())
            .or_default()
            .push(r);
    }
    let mut batches = Vec::new();
    for (steps, mut group) in groups {
        group.shuffle(rng);
        for chunk in group.chunks(batch_size) {
            batches.push(Batch {
                sessions: chunk.to_vec(),
                steps,
            });
        }
    }
    batches.shuffle(rng);
    BatchPlan { batches }
}
