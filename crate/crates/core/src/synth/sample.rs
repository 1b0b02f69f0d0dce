use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Uniform, Weibull};
use serde::{Deserialize, Serialize};

use super::linalg::sample_mvn;
use super::SynthConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Category base prices and per-product prices (indexed by global item id).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub base: Vec<f64>,
    pub item: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user: usize,
    pub group: usize,
    /// Product base utilities, one vector per category.
    pub omega: Vec<Vec<f64>>,
}

/// Ceiling of a Weibull draw, redrawn until it lands in the basket bounds.
pub fn sample_basket_size<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> usize {
    let w = Weibull::new(config.weibull_scale, config.weibull_shape).expect("validated Weibull");
    loop {
        let n = discretize_size(w.sample(rng));
        if (config.basket_min..=config.basket_max).contains(&n) {
            return n;
        }
    }
}

pub fn discretize_size(w: f64) -> usize {
    w.ceil().max(0.0) as usize
}

pub fn draw_prices<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> PriceTable {
    let ln = LogNormal::new(config.price_mu, config.price_sigma).expect("validated lognormal");
    let base: Vec<f64> = (0..config.n_categories).map(|_| ln.sample(rng)).collect();
    let mut item = Vec::with_capacity(config.n_items());
    for &nu in &base {
        let u = Uniform::new_inclusive(nu / 2.0, 2.0 * nu).expect("positive base price");
        item.extend((0..config.products_per_category).map(|_| u.sample(rng)));
    }
    PriceTable { base, item }
}

/// One user's profile: `ω^{u,c} = τ L_c z` for every category, where `L_c`
/// is the shared within-category correlation factor.
pub fn draw_user_profile<R: Rng + ?Sized>(
    user: usize,
    config: &SynthConfig,
    omega_factors: &[Tensor<f64>],
    rng: &mut R,
) -> UserProfile {
    let omega = omega_factors
        .iter()
        .map(|l| {
            sample_mvn(l, rng)
                .into_iter()
                .map(|v| v * config.tau)
                .collect()
        })
        .collect();
    UserProfile {
        user,
        group: user % config.n_groups,
        omega,
    }
}

/// Profiles for all users, each from its own stream `stream_for(user)`.
pub fn draw_user_profiles<R: Rng>(
    config: &SynthConfig,
    omega_factors: &[Tensor<f64>],
    mut stream_for: impl FnMut(usize) -> R,
) -> Vec<UserProfile> {
    (0..config.n_users)
        .map(|u| draw_user_profile(u, config, omega_factors, &mut stream_for(u)))
        .collect()
}

/// Indices of the `n` largest values, largest first, lower index on ties.
pub fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The `n` categories with the highest `α + ε`, `ε ~ N(0, Σ)`, in
/// descending order of that utility.
pub fn choose_categories<R: Rng + ?Sized>(
    alpha: &[f64],
    sigma_chol: &Tensor<f64>,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > alpha.len() {
        return Err(Error::InvalidArgument(format!(
            "basket of {n} categories from {} available",
            alpha.len()
        )));
    }
    let eps = sample_mvn(sigma_chol, rng);
    Ok(categories_from_noise(alpha, &eps, n))
}

pub fn categories_from_noise(alpha: &[f64], eps: &[f64], n: usize) -> Vec<usize> {
    let p: Vec<f64> = alpha.iter().zip(eps).map(|(a, e)| a + e).collect();
    top_n(&p, n)
}

/// `ω_j - β ν_j + γ_j` for every product of one category.
pub fn product_utilities(omega: &[f64], prices: &[f64], beta: f64, gamma: &[f64]) -> Vec<f64> {
    omega
        .iter()
        .zip(prices)
        .zip(gamma)
        .map(|((w, p), g)| w - beta * p + g)
        .collect()
}

/// Probit product choice inside `category`; returns the global item id.
pub fn choose_product<R: Rng + ?Sized>(
    profile: &UserProfile,
    category: usize,
    prices: &PriceTable,
    config: &SynthConfig,
    rng: &mut R,
) -> usize {
    let range = config.items_of(category);
    let omega = &profile.omega[category];
    let noise = Normal::new(0.0, config.sigma).expect("validated sigma");
    let gamma: Vec<f64> = (0..omega.len()).map(|_| noise.sample(rng)).collect();
    let eta = product_utilities(omega, &prices.item[range.clone()], config.beta, &gamma);
    range.start + argmax(&eta)
}
