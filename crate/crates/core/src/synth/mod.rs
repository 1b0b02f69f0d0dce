//! Controlled market-basket simulator.
//!
//! Each user belongs to a group with its own block-diagonal category
//! covariance `Σ`. A basket draws its size from a truncated discretized
//! Weibull, picks the categories with the highest `α + ε`, `ε ~ N(0, Σ)`, and
//! then one product per category by a probit choice over per-user base
//! utilities, prices and fresh noise.

mod config;
mod dataset;
pub mod linalg;
mod sample;
pub(crate) mod validate;

pub use config::{build_group_sigma, CovarianceBlock, CovarianceBlockPlan, GroupPlan, SynthConfig};
pub use dataset::{
    meta_path, read_dataset, synthesize, user_stream, write_dataset, Basket, Dataset,
    DATASET_FORMAT, DATASET_VERSION,
};
pub use linalg::{cholesky, sample_mvn, vine_correlation, vine_correlation_factor};
pub use sample::{
    argmax, categories_from_noise, choose_categories, choose_product, discretize_size, draw_prices,
    draw_user_profile, draw_user_profiles, product_utilities, sample_basket_size, top_n,
    PriceTable, UserProfile,
};
pub use validate::{
    cooccurrence, lift_summary, validate_dataset, Cooccurrence, LiftSummary, ValidationReport,
};
