//! Personalized attention-fused recurrent sequential recommendation.
//!
//! The crate bundles a small reverse-mode tensor engine ([`numerics`]), a
//! controlled market-basket simulator ([`synth`]), the recommender network
//! ([`model`]), its training loop ([`training`]), the ranking protocol and
//! popularity baseline ([`eval`]), interpretability studies ([`analysis`]),
//! and the experiment driver behind the `parsrec` binary ([`cli`]).

pub mod analysis;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
