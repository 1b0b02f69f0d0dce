use crate::synth::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Session indices of one user: `0..train_end` train, then validation,
/// then test (the last session).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserSplit {
    pub user: usize,
    pub train_end: usize,
    pub validation: usize,
    pub test: usize,
}

impl UserSplit {
    pub fn session(&self, split: Split) -> usize {
        match split {
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub users: Vec<UserSplit>,
    /// Users with fewer than three sessions.
    pub excluded: Vec<usize>,
}

impl SplitSpec {
    pub fn n_train_sessions(&self) -> usize {
        self.users.iter().map(|u| u.train_end).sum()
    }
}

/// Leave-last-out per user: last session for test, second to last for
/// validation, the rest for training.
pub fn make_splits(ds: &Dataset) -> SplitSpec {
    let mut users = Vec::new();
    let mut excluded = Vec::new();
    for (u, s) in ds.sessions.iter().enumerate() {
        let n = s.len();
        if n < 3 {
            excluded.push(u);
        } else {
            users.push(UserSplit {
                user: u,
                train_end: n - 2,
                validation: n - 2,
                test: n - 1,
            });
        }
    }
    SplitSpec { users, excluded }
}

/// One basket to score, with everything the user bought before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub history: Vec<usize>,
    pub basket: Vec<usize>,
}

/// History items of the sessions before `session`.
pub fn history_before(ds: &Dataset, user: usize, session: usize) -> Vec<usize> {
    ds.sessions[user][..session]
        .iter()
        .flat_map(|b| b.items.iter().copied())
        .collect()
}

/// Evaluation baskets of a split; baskets with fewer than two items are
/// skipped.
pub fn eval_cases(ds: &Dataset, splits: &SplitSpec, split: Split) -> Vec<EvalCase> {
    splits
        .users
        .iter()
        .filter_map(|us| {
            let i = us.session(split);
            let basket = &ds.sessions[us.user][i].items;
            (basket.len() > 1).then(|| EvalCase {
                user: us.user,
                history: history_before(ds, us.user, i),
                basket: basket.clone(),
            })
        })
        .collect()
}
