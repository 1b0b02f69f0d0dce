//! Dense `f64` helpers for the simulator: Cholesky factors, C-vine random
//! correlation matrices and multivariate normal draws.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn square_dim(a: &Tensor<f64>, op: &'static str) -> Result<usize> {
    match a.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::shape(
            op,
            format!("expected a square matrix, got {s:?}"),
        )),
    }
}

/// Lower-triangular `L` with `L Lᵀ = a`.
pub fn cholesky(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = square_dim(a, "cholesky")?;
    let a = a.data();
    for i in 0..n {
        for j in 0..i {
            if (a[i * n + j] - a[j * n + i]).abs() > 1e-12 * (1.0 + a[i * n + j].abs()) {
                return Err(Error::InvalidArgument(format!(
                    "cholesky input not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { row: j, pivot: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Tensor::new(vec![n, n], l)
}

/// `L Lᵀ` for a square `L`.
pub fn outer_self(l: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = square_dim(l, "outer_self")?;
    let d = l.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|k| d[i * n + k] * d[j * n + k]).sum();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// Partial correlations of a C-vine: entry `(k, i)`, `k < i`, is the
/// correlation of variables `k` and `i` given variables `0..k`, drawn as
/// `2x - 1` with `x ~ Beta(a, b)`.
pub fn vine_partials<R: Rng + ?Sized>(
    d: usize,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    let beta =
        Beta::new(a, b).map_err(|e| Error::InvalidArgument(format!("beta({a}, {b}): {e}")))?;
    let mut p = Tensor::zeros(vec![d, d]);
    let data = p.data_mut();
    for k in 0..d {
        for i in k + 1..d {
            let x: f64 = beta.sample(rng);
            data[k * d + i] = 2.0 * x - 1.0;
        }
    }
    Ok(p)
}

/// Lower factor of the correlation matrix encoded by C-vine partials.
///
/// Column `i` of the upper factor is built from the partials `(0, i) ..
/// (i-1, i)`; each partial scales the variance left over after the earlier
/// ones. Working on the factor directly keeps sampling exact even when the
/// correlation matrix is numerically singular.
pub fn vine_factor_from_partials(partials: &Tensor<f64>) -> Result<Tensor<f64>> {
    let d = square_dim(partials, "vine_factor")?;
    let p = partials.data();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        let mut rest = 1.0f64;
        for k in 0..i {
            let r = p[k * d + i];
            l[i * d + k] = r * rest.sqrt();
            rest *= 1.0 - r * r;
        }
        l[i * d + i] = rest.sqrt();
    }
    Tensor::new(vec![d, d], l)
}

/// Random correlation factor `L` by the vine method (`L Lᵀ` is the matrix).
pub fn vine_correlation_factor<R: Rng + ?Sized>(
    d: usize,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    vine_factor_from_partials(&vine_partials(d, a, b, rng)?)
}

/// Random `d×d` correlation matrix by the vine method.
pub fn vine_correlation<R: Rng + ?Sized>(
    d: usize,
    a: f64,
    b: f64,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    let mut c = outer_self(&vine_correlation_factor(d, a, b, rng)?)?;
    let data = c.data_mut();
    for i in 0..d {
        data[i * d + i] = 1.0;
    }
    Ok(c)
}

/// `L z` with `z` standard normal.
pub fn sample_mvn<R: Rng + ?Sized>(chol: &Tensor<f64>, rng: &mut R) -> Vec<f64> {
    let n = chol.rows();
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    lower_mul(chol, &z)
}

/// `L z` for lower-triangular `L`.
pub fn lower_mul(chol: &Tensor<f64>, z: &[f64]) -> Vec<f64> {
    let n = chol.rows();
    let l = chol.data();
    (0..n)
        .map(|i| (0..=i).map(|k| l[i * n + k] * z[k]).sum())
        .collect()
}
