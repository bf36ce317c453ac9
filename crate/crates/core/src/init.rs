//! Data-driven starting point for the loading matrix.
//!
//! Under the model, the covariance of the monotone features at a fixed age
//! is `J(t) Σ J(t)ᵀ` from the rates plus an age-free part from the bias and
//! the noise, where `J(t)` grows with `t`. Subtracting the covariance of the
//! youngest third from that of the oldest third cancels the age-free part
//! and leaves a non-negative matrix whose block structure follows which
//! rate drives which feature. A symmetric non-negative factorization of that
//! difference gives one column per rate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::inverse_softplus;
use crate::error::{Error, Result};
use crate::linalg::covariance;
use crate::tensor::Tensor;

/// How training initializes the free parameters of the loading matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadingInit {
    /// Independent Gaussian draws.
    Random,
    /// Factorization of the old-minus-young feature covariance.
    #[default]
    AgeContrast,
}

/// Smallest loading the contrast initialization assigns, relative to the
/// column maximum.
const LOADING_FLOOR: f64 = 0.02;

/// Fewest rows in each age group for the contrast to be attempted.
const MIN_GROUP: usize = 10;

/// `H ≥ 0` (`[n, k]`) approximately minimizing `‖D − H Hᵀ‖²` by damped
/// multiplicative updates. Negative entries of `d` are treated as zero.
pub fn symmetric_nmf(d: &Tensor, k: usize, iterations: usize, seed: u64) -> Result<Tensor> {
    let (n, m) = d.dims2("symmetric_nmf")?;
    if n != m {
        return Err(Error::Domain(format!("symmetric_nmf of a {n}x{m} matrix")));
    }
    if k == 0 {
        return Err(Error::Domain("symmetric_nmf needs at least one factor".into()));
    }
    let target = d.map(|v| v.max(0.0));
    let scale = (target.max_abs() / k as f64).sqrt().max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Tensor::randn(&[n, k], 1.0, &mut rng).map(|v| scale * (v.abs() + 0.1));
    for _ in 0..iterations {
        let dh = target.matmul(&h)?;
        let hhh = h.matmul(&h.transpose()?.matmul(&h)?)?;
        for i in 0..n {
            for j in 0..k {
                let denom = hhh.get(i, j);
                let ratio = if denom > 0.0 { dh.get(i, j) / denom } else { 1.0 };
                h.set(i, j, h.get(i, j) * (0.5 + 0.5 * ratio));
            }
        }
    }
    Ok(h)
}

/// Loadings (`[d_mono, k_r]`, each column scaled to a maximum of one) from
/// the age contrast of the first `d_mono` columns of `x`.
pub fn age_contrast_loadings(
    x: &Tensor,
    ages: &[f64],
    d_mono: usize,
    k_r: usize,
    seed: u64,
) -> Result<Tensor> {
    let (n, d) = x.dims2("age_contrast_loadings")?;
    if ages.len() != n || d_mono > d || d_mono == 0 {
        return Err(Error::Domain(format!(
            "cannot take the age contrast of {d_mono} monotone columns from a {n}x{d} matrix with {} ages",
            ages.len()
        )));
    }
    let third = n / 3;
    if third < MIN_GROUP {
        return Err(Error::Data(format!("{n} rows are too few for the age contrast")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ages[a].total_cmp(&ages[b]).then(a.cmp(&b)));
    let mono = x.slice_cols(0, d_mono)?;
    let young = covariance(&mono.select_rows(&order[..third])?)?;
    let old = covariance(&mono.select_rows(&order[n - third..])?)?;
    let contrast = old.zip_with(&young, "age_contrast", |o, y| o - y)?;
    let mut h = symmetric_nmf(&contrast, k_r, 2000, seed)?;
    for j in 0..k_r {
        let top = (0..d_mono).map(|i| h.get(i, j)).fold(0.0, f64::max);
        for i in 0..d_mono {
            let v = if top > 0.0 { h.get(i, j) / top } else { 1.0 };
            h.set(i, j, v.max(LOADING_FLOOR));
        }
    }
    Ok(h)
}

/// Free parameters whose softplus is `loadings`.
pub fn loading_parameters(loadings: &Tensor) -> Tensor {
    loadings.map(inverse_softplus)
}
