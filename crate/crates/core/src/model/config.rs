use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the recommender. `d_q = d_u + d_v`, `d_k = d_v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Real items; two special tokens are appended after them.
    pub n_items: usize,
    pub d_u: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f64,
    pub use_ln: bool,
    pub use_dropout: bool,
    /// Residual of the hidden state into the attention output before LN.
    pub add_q_at_ln: bool,
    pub ffn_pre_rnn: bool,
    pub ffn_post_rnn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_items: 2000,
            d_u: 32,
            d_v: 32,
            heads: 2,
            layers: 1,
            dropout: 0.1,
            use_ln: true,
            use_dropout: true,
            add_q_at_ln: true,
            ffn_pre_rnn: false,
            ffn_post_rnn: false,
        }
    }
}

impl ModelConfig {
    pub fn d_q(&self) -> usize {
        self.d_u + self.d_v
    }

    pub fn d_k(&self) -> usize {
        self.d_v
    }

    /// Output classes: items, then start and end of basket.
    pub fn vocab(&self) -> usize {
        self.n_items + 2
    }

    pub fn sob(&self) -> usize {
        self.n_items
    }

    pub fn eob(&self) -> usize {
        self.n_items + 1
    }

    pub fn effective_dropout(&self) -> f64 {
        if self.use_dropout {
            self.dropout
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_items == 0 {
            return bad("n_items must be positive".into());
        }
        if self.heads == 0 || self.layers == 0 {
            return bad(format!(
                "heads ({}) and layers ({}) must be at least 1",
                self.heads, self.layers
            ));
        }
        if self.d_u == 0 || self.d_v == 0 {
            return bad("embedding sizes must be positive".into());
        }
        if self.use_ln && self.d_v < 2 {
            return bad("layer norm needs d_v >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}
