//! Small dense linear algebra and summary statistics on [`Tensor`]
//! matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson inputs differ in length");
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    // sqrt of the product keeps corr(a, a) exactly 1.
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Column means of an `[n, d]` matrix.
pub fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (mj, v) in m.iter_mut().zip(x.row(i)) {
            *mj += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// Subtracts column means.
pub fn center_columns(x: &Tensor) -> Tensor {
    let m = column_means(x);
    let mut out = x.clone();
    let d = x.cols();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v -= m[k % d];
    }
    out
}

/// Sample covariance (`n - 1` denominator) of the columns of `x`,
/// centering on the column means.
pub fn covariance(x: &Tensor) -> Result<Tensor> {
    let (n, _) = x.dims2("covariance")?;
    if n < 2 {
        return Err(Error::Domain("covariance needs at least two rows".into()));
    }
    let c = center_columns(x);
    let mut cov = c.transpose()?.matmul(&c)?;
    cov.data_mut().iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok(cov)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2("inverse")?;
    if n != m {
        return Err(Error::Domain(format!("cannot invert a {n}x{m} matrix")));
    }
    let mut work: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| work[i][col].abs().total_cmp(&work[j][col].abs()))
            .expect("non-empty pivot range");
        if work[pivot][col].abs() <= 1e-14 * scale {
            return Err(Error::Domain("matrix is singular".into()));
        }
        work.swap(col, pivot);
        let p = work[col][col];
        work[col].iter_mut().for_each(|v| *v /= p);
        let pivot_row = work[col].clone();
        for (i, row) in work.iter_mut().enumerate() {
            if i != col {
                let f = row[col];
                if f != 0.0 {
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
    }
    let data = work.into_iter().flat_map(|row| row[n..].to_vec()).collect();
    Ok(Tensor::matrix(n, n, data)?)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2("cholesky")?;
    if n != m {
        return Err(Error::Domain(format!("cholesky of a {n}x{m} matrix")));
    }
    let mut l = Tensor::zeros(&[n, n]);
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k) * l.get(j, k);
        }
        if diag <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Domain(format!(
                "matrix is not positive definite (pivot {j} is {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` with a factor from [`cholesky`].
pub fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Descending.
    pub values: Vec<f64>,
    /// `[n, n]`; column `j` is the eigenvector for `values[j]`.
    pub vectors: Tensor,
}

impl SymEig {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        self.vectors.col(j)
    }
}

/// Cyclic Jacobi eigendecomposition. Rejects inputs that are not symmetric
/// to within `1e-10` relative to their largest entry.
pub fn sym_eig(s: &Tensor) -> Result<SymEig> {
    let (n, m) = s.dims2("sym_eig")?;
    if n != m {
        return Err(Error::Domain(format!("sym_eig of a {n}x{m} matrix")));
    }
    if !s.all_finite() {
        return Err(Error::NonFinite("sym_eig input".into()));
    }
    let scale = s.max_abs();
    for i in 0..n {
        for j in i + 1..n {
            if (s.get(i, j) - s.get(j, i)).abs() > 1e-10 * scale.max(1.0) {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    s.get(i, j),
                    s.get(j, i)
                )));
            }
        }
    }
    let mut a: Vec<f64> = s.data().to_vec();
    // symmetrize exactly
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let mut v = Tensor::identity(n).into_data();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let total: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new, v[k * n + old]);
        }
    }
    Ok(SymEig { values, vectors })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
