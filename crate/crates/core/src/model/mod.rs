//! The recommender network.
//!
//! At step `j` of a basket the query `[E^U_u, h_j]` attends over the items
//! fed so far (start token first). The attention output and the query drive
//! a ReLU recurrent update of `h` and a linear prediction over all items plus
//! the two special tokens. `h_0` is the mean embedding of the user's earlier
//! baskets.

mod config;
mod network;

pub use config::ModelConfig;
pub use network::{
    arnn_step, attention_step, forward_session, history_state, init_model, Architecture,
    AttentionIds, BatchInput, FfnIds, ParamLayout, ParsRecModel, SessionForward, StepAttention,
    Unrolled,
};

#[cfg(test)]
mod tests;
