//! Linear baselines: PCA, contrastive PCA and mixed-criterion PCA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{column_means, covariance, dot, mean, norm, pearson, sym_eig};
use crate::tensor::Tensor;

/// Contrast weight reported for contrastive PCA.
pub const CPCA_DEFAULT_ALPHA: f64 = 10.0;
/// Age weight reported for mixed-criterion PCA.
pub const MCPCA_DEFAULT_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Cpca,
    Mcpca,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pca => "pca",
            Method::Cpca => "cpca",
            Method::Mcpca => "mcpca",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(Method::Pca),
            "cpca" => Ok(Method::Cpca),
            "mcpca" => Ok(Method::Mcpca),
            other => Err(Error::Config(format!(
                "unknown baseline `{other}` (pca, cpca, mcpca)"
            ))),
        }
    }
}

/// `k` unit-norm directions in feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub method: Method,
    pub alpha: f64,
    /// `[k, d]`, one component per row.
    pub components: Tensor,
    /// Feature means subtracted before projecting.
    pub mean: Vec<f64>,
    /// Objective value of each component.
    pub objective: Vec<f64>,
}

impl LinearModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn component(&self, j: usize) -> &[f64] {
        self.components.row(j)
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        let centered = self.center(x)?;
        Ok(centered.matmul(&self.components.transpose()?)?)
    }

    /// Rank-k reconstruction in the original units.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = self.scores(x)?.matmul(&self.components)?;
        let d = self.mean.len();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.mean[k % d];
        }
        Ok(out)
    }

    fn center(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2("scores")?;
        if d != self.mean.len() {
            return Err(Error::Domain(format!(
                "data has {d} features, baseline was fitted on {}",
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v -= self.mean[k % d];
        }
        Ok(out)
    }

    /// Flips components so their scores correlate non-negatively with age;
    /// components uncorrelated with age get their first nonzero loading
    /// positive.
    pub fn orient_by_age(&mut self, x: &Tensor, ages: &[f64]) -> Result<()> {
        let scores = self.scores(x)?;
        for j in 0..self.k() {
            let corr = pearson(&scores.col(j), ages).unwrap_or(0.0);
            let flip = if corr.abs() > 1e-12 {
                corr < 0.0
            } else {
                first_nonzero_negative(self.component(j))
            };
            if flip {
                self.flip(j);
            }
        }
        Ok(())
    }

    fn flip(&mut self, j: usize) {
        for l in 0..self.components.cols() {
            let v = self.components.get(j, l);
            self.components.set(j, l, -v);
        }
    }

    /// Loadings as `(component, feature, loading)` rows.
    pub fn loading_table<'a>(
        &'a self,
        feature_names: &'a [String],
    ) -> impl Iterator<Item = (usize, &'a str, f64)> + 'a {
        (0..self.k()).flat_map(move |j| {
            feature_names
                .iter()
                .enumerate()
                .map(move |(l, name)| (j, name.as_str(), self.components.get(j, l)))
        })
    }
}

fn first_nonzero_negative(v: &[f64]) -> bool {
    v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0)
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::Domain(format!(
            "cannot extract {k} components from {d} features"
        )));
    }
    Ok(())
}

/// Top-`k` eigenvectors of `s` as rows, with the first-nonzero-positive
/// sign convention.
fn top_eigenvectors(s: &Tensor, k: usize) -> Result<(Tensor, Vec<f64>)> {
    let eig = sym_eig(s)?;
    let d = s.rows();
    let mut comps = Tensor::zeros(&[k, d]);
    for j in 0..k {
        let mut v = eig.vector(j);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        if first_nonzero_negative(&v) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for (l, x) in v.iter().enumerate() {
            comps.set(j, l, *x);
        }
    }
    Ok((comps, eig.values[..k].to_vec()))
}

pub fn pca(x: &Tensor, k: usize) -> Result<LinearModel> {
    let (n, d) = x.dims2("pca")?;
    check_k(k, d)?;
    if n < 2 {
        return Err(Error::Domain("pca needs at least two rows".into()));
    }
    let (components, objective) = top_eigenvectors(&covariance(x)?, k)?;
    Ok(LinearModel {
        method: Method::Pca,
        alpha: 0.0,
        components,
        mean: column_means(x),
        objective,
    })
}

/// Top eigenvectors of `C_fg − α C_bg`, each covariance taken about its own
/// set's mean.
pub fn cpca(foreground: &Tensor, background: &Tensor, alpha: f64, k: usize) -> Result<LinearModel> {
    let (_, d) = foreground.dims2("cpca")?;
    let (nb, db) = background.dims2("cpca")?;
    if d != db {
        return Err(Error::Domain(format!(
            "foreground has {d} features, background has {db}"
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Domain(format!(
            "contrast weight {alpha} must be finite and non-negative"
        )));
    }
    check_k(k, d)?;
    let cf = covariance(foreground)?;
    let s = if alpha == 0.0 {
        cf
    } else {
        if nb < 2 {
            return Err(Error::Domain("background set needs at least two rows".into()));
        }
        cf.zip_with(&covariance(background)?, "cpca", |f, b| f - alpha * b)?
    };
    let (components, objective) = top_eigenvectors(&s, k)?;
    Ok(LinearModel {
        method: Method::Cpca,
        alpha,
        components,
        mean: column_means(foreground),
        objective,
    })
}

/// `n` contrast weights log-spaced over `[0.1, 1000]`.
pub fn cpca_alpha_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.1];
    }
    (0..n)
        .map(|i| 10f64.powf(-1.0 + 4.0 * i as f64 / (n - 1) as f64))
        .collect()
}

/// Rows whose age is below `max_age`.
pub fn background_rows(ages: &[f64], max_age: f64) -> Vec<usize> {
    (0..ages.len()).filter(|&i| ages[i] < max_age).collect()
}

/// Maximizer of `q vᵀ S v + vᵀ g` over unit `v`, by the secular equation of
/// the stationarity condition `(λI − qS) v = g / 2`.
fn secular_max(s: &Tensor, g: &[f64], q: f64) -> Result<Vec<f64>> {
    let m = g.len();
    let eig = sym_eig(&s.map(|v| v * q))?;
    let mu = &eig.values;
    let gamma: Vec<f64> = (0..m).map(|i| dot(&eig.vector(i), g) / 2.0).collect();
    let gnorm = norm(&gamma);
    let scale = mu
        .iter()
        .fold(gnorm, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let top = mu[0];
    let degenerate = |i: usize| (mu[i] - top).abs() <= 1e-12 * scale;
    let top_weight: f64 = (0..m)
        .filter(|&i| degenerate(i))
        .map(|i| gamma[i] * gamma[i])
        .sum::<f64>()
        .sqrt();

    let coords = |lambda: f64| -> Vec<f64> { (0..m).map(|i| gamma[i] / (lambda - mu[i])).collect() };
    let mut y = if top_weight <= 1e-14 * scale {
        // Hard case: g has no weight on the top eigenspace.
        let lambda = top;
        let mut y: Vec<f64> = (0..m)
            .map(|i| {
                if degenerate(i) {
                    0.0
                } else {
                    gamma[i] / (lambda - mu[i])
                }
            })
            .collect();
        let r2 = dot(&y, &y);
        if r2 <= 1.0 {
            let first = (0..m).find(|&i| degenerate(i)).expect("top eigenvalue");
            y[first] = (1.0 - r2).sqrt();
            y
        } else {
            root_coords(top, gnorm, &coords)
        }
    } else {
        root_coords(top, gnorm, &coords)
    };
    let ny = norm(&y);
    y.iter_mut().for_each(|v| *v /= ny);
    let mut v = vec![0.0; m];
    for (i, yi) in y.iter().enumerate() {
        for (vl, el) in v.iter_mut().zip(eig.vector(i)) {
            *vl += yi * el;
        }
    }
    Ok(v)
}

/// Bisects `‖coords(λ)‖ = 1` on `(top, top + ‖γ‖]`.
fn root_coords(top: f64, gnorm: f64, coords: &dyn Fn(f64) -> Vec<f64>) -> Vec<f64> {
    let (mut lo, mut hi) = (top, top + gnorm);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let c = coords(mid);
        if dot(&c, &c) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    coords(hi)
}

/// Orthonormal basis (as columns) of the complement of the rows of `taken`.
fn complement_basis(taken: &[Vec<f64>], d: usize) -> Result<Tensor> {
    let mut p = Tensor::identity(d);
    for v in taken {
        for i in 0..d {
            for j in 0..d {
                let x = p.get(i, j);
                p.set(i, j, x - v[i] * v[j]);
            }
        }
    }
    let eig = sym_eig(&p)?;
    let m = d - taken.len();
    let mut q = Tensor::zeros(&[d, m]);
    for j in 0..m {
        for (i, x) in eig.vector(j).iter().enumerate() {
            q.set(i, j, *x);
        }
    }
    Ok(q)
}

/// Sample covariance of each feature with `ages`.
pub fn age_covariance(x: &Tensor, ages: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = x.dims2("age_covariance")?;
    if ages.len() != n {
        return Err(Error::Domain(format!("{n} rows but {} ages", ages.len())));
    }
    if n < 2 {
        return Err(Error::Domain("need at least two rows".into()));
    }
    let mx = column_means(x);
    let mt = mean(ages);
    let mut c = vec![0.0; d];
    for (i, t) in ages.iter().enumerate() {
        for (cj, (xj, mj)) in c.iter_mut().zip(x.row(i).iter().zip(&mx)) {
            *cj += (xj - mj) * (t - mt);
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(c)
}

/// Value of `(1−α) vᵀCv + α vᵀc`.
pub fn mcpca_objective(cov: &Tensor, age_cov: &[f64], alpha: f64, v: &[f64]) -> f64 {
    let d = v.len();
    let quad: f64 = (0..d).map(|i| v[i] * dot(cov.row(i), v)).sum();
    (1.0 - alpha) * quad + alpha * dot(v, age_cov)
}

/// Components maximizing `(1−α)·var(Xv) + α·cov(Xv, age)` on the unit
/// sphere, each restricted to the orthogonal complement of the previous
/// ones.
pub fn mcpca(x: &Tensor, ages: &[f64], alpha: f64, k: usize) -> Result<LinearModel> {
    let (_, d) = x.dims2("mcpca")?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("age weight {alpha} outside [0, 1]")));
    }
    check_k(k, d)?;
    let cov = covariance(x)?;
    let c = age_covariance(x, ages)?;
    let mut taken: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut objective = Vec::with_capacity(k);
    for _ in 0..k {
        let q = complement_basis(&taken, d)?;
        let qt = q.transpose()?;
        let sq = qt.matmul(&cov)?.matmul(&q)?;
        let sq = sq.zip_with(&sq.transpose()?, "symmetrize", |a, b| 0.5 * (a + b))?;
        let gq: Vec<f64> = (0..q.cols()).map(|j| alpha * dot(&q.col(j), &c)).collect();
        let y = secular_max(&sq, &gq, 1.0 - alpha)?;
        let mut v = Tensor::matrix(q.cols(), 1, y)?;
        v = q.matmul(&v)?;
        let mut v = v.into_data();
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let tilt = dot(&v, &c);
        if tilt < -1e-12 * norm(&c) || (tilt.abs() <= 1e-12 * norm(&c) && first_nonzero_negative(&v)) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        objective.push(mcpca_objective(&cov, &c, alpha, &v));
        taken.push(v);
    }
    Ok(LinearModel {
        method: Method::Mcpca,
        alpha,
        components: Tensor::from_rows(&taken)?,
        mean: column_means(x),
        objective,
    })
}

/// Fits `method` on `x`; cPCA uses rows younger than `background_max_age`
/// as the background. Components are oriented to increase with age.
pub fn fit_baseline(
    method: Method,
    x: &Tensor,
    ages: &[f64],
    alpha: f64,
    k: usize,
    background_max_age: f64,
) -> Result<LinearModel> {
    let mut model = match method {
        Method::Pca => pca(x, k)?,
        Method::Cpca => {
            let rows = background_rows(ages, background_max_age);
            if rows.len() < 2 {
                return Err(Error::Data(format!(
                    "fewer than two individuals younger than {background_max_age} for the background set"
                )));
            }
            cpca(x, &x.select_rows(&rows)?, alpha, k)?
        }
        Method::Mcpca => mcpca(x, ages, alpha, k)?,
    };
    model.orient_by_age(x, ages)?;
    Ok(model)
}
