//! Leave-last-out evaluation.
//!
//! Each validation or test basket is unrolled step by step. At every step
//! the scorer ranks the remaining basket items against [`NEGATIVES`] sampled
//! items; the step counts the best rank of any remaining item. The fed item
//! is the top candidate when it is still in the basket, a random remaining
//! item otherwise.

mod metrics;
mod protocol;
mod split;

pub use metrics::{
    aggregate_metrics, hit, ndcg_gain, Metric, MetricsReport, SessionResult, DEFAULT_KS,
};
pub use protocol::{
    evaluate_cases, evaluate_model, poprec_fit, poprec_rank, rank_step, sample_candidates,
    PopModel, Scorer, NEGATIVES,
};
pub use split::{eval_cases, history_before, make_splits, EvalCase, Split, SplitSpec, UserSplit};
