//! Identifiability checks for the loading matrix `A` and the confounding
//! construction that breaks identifiability without monotonicity.
//!
//! `x ↦ s(A x)` with strictly increasing elementwise `s` is an order
//! isomorphism exactly when every column of `A` owns a distinct row whose
//! only nonzero entry sits in that column. [`check_exact`] decides this
//! structure up to a relative zero tolerance, [`check_approx`] grades how
//! close a learned matrix comes through dominance ratios, and the
//! randomized oracles test the order-preservation definition directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::matching::distinct_rows;
use crate::tensor::Tensor;

/// Entries at most this fraction of their column's maximum count as zero.
pub const TAU_ZERO: f64 = 1e-8;
pub const DEFAULT_THRESHOLD: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsoReport {
    pub d: usize,
    pub k: usize,
    /// An assignment of distinct private rows exists.
    pub exact_pass: bool,
    /// The private rows, one per column, when `exact_pass`.
    pub exact_witnesses: Option<Vec<usize>>,
    /// `ratios[i][j] = min_{k≠j} A_ij / A_ik`; `+∞` when every other entry
    /// of row `i` is zero, `0` when `A_ij` itself is zero.
    pub ratios: Vec<Vec<f64>>,
    /// Best ratio per column over all rows.
    pub dominance_ratios: Vec<f64>,
    /// Row attaining each column's best ratio.
    pub best_rows: Vec<usize>,
    /// Threshold of the approximate check, if one was requested.
    pub threshold: Option<f64>,
    pub approx_pass: Option<bool>,
    /// Distinct witness rows at `threshold`, when the approximate check
    /// passed.
    pub witness_rows: Option<Vec<usize>>,
}

impl IsoReport {
    /// Distinct rows, one per column, whose ratio reaches `threshold`.
    pub fn witnesses_at(&self, threshold: f64) -> Option<Vec<usize>> {
        let candidates: Vec<Vec<usize>> = (0..self.k)
            .map(|j| (0..self.d).filter(|&i| self.ratios[i][j] >= threshold).collect())
            .collect();
        distinct_rows(&candidates, self.d)
    }

    pub fn approx_pass_at(&self, threshold: f64) -> bool {
        self.witnesses_at(threshold).is_some()
    }

    /// Plain-text summary: one line per column plus verdicts at `thresholds`.
    pub fn render(&self, thresholds: &[f64]) -> String {
        let mut out = format!(
            "loading matrix {}x{}: exact structure {}\n",
            self.d,
            self.k,
            if self.exact_pass { "PASS" } else { "FAIL" }
        );
        for j in 0..self.k {
            let w = self
                .witness_rows
                .as_ref()
                .or(self.exact_witnesses.as_ref())
                .map_or(self.best_rows[j], |w| w[j]);
            out.push_str(&format!(
                "column {j}: witness row {w}, ratio {}\n",
                fmt_ratio(self.ratios[w][j])
            ));
        }
        for &t in thresholds {
            out.push_str(&format!(
                "threshold {t}: {}\n",
                if self.approx_pass_at(t) { "PASS" } else { "FAIL" }
            ));
        }
        out
    }
}

fn fmt_ratio(r: f64) -> String {
    if r.is_infinite() {
        "inf".into()
    } else {
        format!("{r:.3}")
    }
}

fn validate(a: &Tensor) -> Result<(usize, usize)> {
    let (d, k) = a.dims2("iso_check")?;
    if k == 0 {
        return Err(Error::Domain("loading matrix has no columns".into()));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("loading matrix".into()));
    }
    for i in 0..d {
        for j in 0..k {
            if a.get(i, j) < 0.0 {
                return Err(Error::Domain(format!(
                    "loading matrix entry ({i}, {j}) = {} is negative",
                    a.get(i, j)
                )));
            }
        }
    }
    Ok((d, k))
}

fn analyze(a: &Tensor) -> Result<IsoReport> {
    let (d, k) = validate(a)?;
    let col_max: Vec<f64> = (0..k).map(|j| a.col(j).into_iter().fold(0.0, f64::max)).collect();
    let is_zero = |i: usize, j: usize| a.get(i, j) <= TAU_ZERO * col_max[j];
    let ratios: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if is_zero(i, j) {
                        return 0.0;
                    }
                    (0..k)
                        .filter(|&l| l != j)
                        .map(|l| {
                            if is_zero(i, l) {
                                f64::INFINITY
                            } else {
                                a.get(i, j) / a.get(i, l)
                            }
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        })
        .collect();
    let mut best_rows = vec![0; k];
    let mut dominance_ratios = vec![0.0; k];
    for j in 0..k {
        for i in 0..d {
            if ratios[i][j] > dominance_ratios[j] {
                dominance_ratios[j] = ratios[i][j];
                best_rows[j] = i;
            }
        }
    }
    let mut report = IsoReport {
        d,
        k,
        exact_pass: false,
        exact_witnesses: None,
        ratios,
        dominance_ratios,
        best_rows,
        threshold: None,
        approx_pass: None,
        witness_rows: None,
    };
    report.exact_witnesses = report.witnesses_at(f64::INFINITY);
    report.exact_pass = report.exact_witnesses.is_some();
    Ok(report)
}

/// Exact private-row structure test.
pub fn check_exact(a: &Tensor) -> Result<IsoReport> {
    analyze(a)
}

/// Dominance-ratio test: every column needs a distinct witness row `i`
/// with `A_ij >= threshold · A_ik` for all `k ≠ j`.
pub fn check_approx(a: &Tensor, threshold: f64) -> Result<IsoReport> {
    if !(threshold > 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} must exceed 1")));
    }
    let mut report = analyze(a)?;
    report.threshold = Some(threshold);
    report.witness_rows = report.witnesses_at(threshold);
    report.approx_pass = Some(report.witness_rows.is_some());
    Ok(report)
}

/// Whether `b` is square with exactly one nonzero (`> tol`) per row and
/// column and no negative entries.
pub fn is_nonnegative_monomial(b: &Tensor, tol: f64) -> bool {
    let Ok((n, m)) = b.dims2("monomial") else {
        return false;
    };
    if n != m || b.data().iter().any(|&v| v < -tol) {
        return false;
    }
    let nz = |i: usize, j: usize| b.get(i, j).abs() > tol;
    (0..n).all(|i| (0..n).filter(|&j| nz(i, j)).count() == 1)
        && (0..n).all(|j| (0..n).filter(|&i| nz(i, j)).count() == 1)
}

/// Axis-aligned box in the positive orthant.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Domain(
                "box bounds must be non-empty and equal in length".into(),
            ));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] < hi[i] && lo[i].is_finite() && hi[i].is_finite())) {
            return Err(Error::Domain(format!(
                "box side {i} is empty: [{}, {}]",
                lo[i], hi[i]
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    /// `u ⪯ v` but `f(u) ⋠ f(v)`.
    Forward,
    /// `f(u) ⪯ f(v)` but `u ⋠ v`.
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub direction: Direction,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub fu: Vec<f64>,
    pub fv: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OracleVerdict {
    Pass { pairs: usize, seed: u64 },
    Violation(Violation),
}

impl OracleVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, OracleVerdict::Pass { .. })
    }
}

/// Tolerance on image comparisons, scaled by `1 + |value|`.
pub const IMAGE_TOL: f64 = 1e-9;
/// Tolerance on domain comparisons, relative to the box width.
pub const DOMAIN_TOL: f64 = 1e-7;

fn image_leq(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| x - y <= IMAGE_TOL * (1.0 + x.abs().max(y.abs())))
}

fn domain_leq(a: &[f64], b: &[f64], bx: &DomainBox) -> bool {
    (0..a.len()).all(|i| a[i] - b[i] <= DOMAIN_TOL * bx.width(i))
}

/// Forward monotonicity: samples ordered pairs `u ⪯ v` in `bx` (the
/// corner pairs `lo ⪯ lo + width·e_i` first) and reports the first pair
/// with `f(u) ⋠ f(v)`.
pub fn monotone_oracle<F>(f: F, bx: &DomainBox, n_pairs: usize, seed: u64) -> OracleVerdict
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k = bx.dim();
    let check = |u: Vec<f64>, v: Vec<f64>| -> Option<Violation> {
        let (fu, fv) = (f(&u), f(&v));
        (!image_leq(&fu, &fv)).then_some(Violation {
            direction: Direction::Forward,
            u,
            v,
            fu,
            fv,
        })
    };
    let mut pairs = 0;
    for i in 0..k {
        let u = bx.lo.clone();
        let mut v = u.clone();
        v[i] = bx.hi[i];
        pairs += 1;
        if let Some(viol) = check(u, v) {
            return OracleVerdict::Violation(viol);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while pairs < n_pairs {
        let u: Vec<f64> = (0..k).map(|i| rng.random_range(bx.lo[i]..bx.hi[i])).collect();
        let v: Vec<f64> = (0..k)
            .map(|i| {
                if rng.random_bool(0.25) {
                    u[i]
                } else {
                    u[i] + rng.random_range(0.0..=1.0) * (bx.hi[i] - u[i])
                }
            })
            .collect();
        pairs += 1;
        if let Some(viol) = check(u, v) {
            return OracleVerdict::Violation(viol);
        }
    }
    OracleVerdict::Pass { pairs, seed }
}

/// Inverse monotonicity on sampled images: looks for pairs with
/// `f(u) ⪯ f(v)` but `u ⋠ v`. Candidate pairs lower one coordinate and
/// raise the others by log-uniform amounts, so they probe every cone
/// `{δ : δ_j < 0}` from many angles. Corner-style pairs around the box
/// centre are tried first.
pub fn inverse_monotone_oracle<F>(f: F, bx: &DomainBox, n_pairs: usize, seed: u64) -> OracleVerdict
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let k = bx.dim();
    let quarter: Vec<f64> = (0..k).map(|i| 0.25 * bx.width(i)).collect();
    let check = |u: Vec<f64>, v: Vec<f64>| -> Option<Violation> {
        let (fu, fv) = (f(&u), f(&v));
        (image_leq(&fu, &fv) && !domain_leq(&u, &v, bx)).then_some(Violation {
            direction: Direction::Inverse,
            u,
            v,
            fu,
            fv,
        })
    };
    let centre: Vec<f64> = (0..k).map(|i| 0.5 * (bx.lo[i] + bx.hi[i])).collect();
    let mut pairs = 0;
    'corners: for j in 0..k {
        for &down in &[1e-3, 1e-2, 1e-1, 1.0] {
            if pairs >= n_pairs {
                break 'corners;
            }
            let mut v: Vec<f64> = (0..k).map(|i| centre[i] + quarter[i]).collect();
            v[j] = centre[j] - down * quarter[j];
            pairs += 1;
            if let Some(viol) = check(centre.clone(), v) {
                return OracleVerdict::Violation(viol);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_uniform = |rng: &mut ChaCha8Rng| 10f64.powf(rng.random_range(-4.0..0.0));
    while pairs < n_pairs {
        let u: Vec<f64> = (0..k)
            .map(|i| rng.random_range(bx.lo[i] + quarter[i]..bx.hi[i] - quarter[i]))
            .collect();
        let down = rng.random_range(0..k);
        let v: Vec<f64> = (0..k)
            .map(|i| {
                let step = log_uniform(&mut rng) * quarter[i];
                if i == down {
                    u[i] - step
                } else if rng.random_bool(0.1) {
                    u[i]
                } else {
                    u[i] + step
                }
            })
            .collect();
        pairs += 1;
        if let Some(viol) = check(u, v) {
            return OracleVerdict::Violation(viol);
        }
    }
    OracleVerdict::Pass { pairs, seed }
}

/// Both directions; the first violation found wins.
pub fn order_isomorphism_oracle<F>(f: F, bx: &DomainBox, n_pairs: usize, seed: u64) -> OracleVerdict
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    match monotone_oracle(&f, bx, n_pairs, seed) {
        OracleVerdict::Pass { .. } => inverse_monotone_oracle(&f, bx, n_pairs, seed.wrapping_add(1)),
        v => v,
    }
}

/// An orthogonal `k x k` matrix fixing the all-ones vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundingMap {
    pub m: Tensor,
}

impl ConfoundingMap {
    pub fn k(&self) -> usize {
        self.m.rows()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        (0..self.k()).map(|i| linalg::dot(self.m.row(i), z)).collect()
    }

    /// `max |M·1 − 1|`
    pub fn ones_residual(&self) -> f64 {
        let k = self.k();
        let ones = vec![1.0; k];
        self.apply(&ones)
            .iter()
            .map(|v| (v - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |M Mᵀ − I|`
    pub fn orthogonality_residual(&self) -> f64 {
        let k = self.k();
        let mmt = self
            .m
            .matmul(&self.m.transpose().expect("square matrix"))
            .expect("square matrix");
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((mmt.get(i, j) - want).abs());
            }
        }
        worst
    }
}

/// Gram-Schmidt on the columns of `cols`, in order; returns orthonormal
/// columns, skipping near-dependent ones.
fn gram_schmidt(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for b in &basis {
                let p = linalg::dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nv = linalg::norm(&v);
        if nv > 1e-10 {
            basis.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    basis
}

/// Haar-random rotation in `SO(n)`: QR of a Gaussian matrix with the
/// diagonal of `R` made positive, then one column flipped if the
/// determinant is negative.
fn random_rotation<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    loop {
        let g: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        // Gram-Schmidt already yields R with positive diagonal.
        let mut q = gram_schmidt(&g);
        if q.len() < n {
            continue;
        }
        let qm = Tensor::from_rows(&q)
            .expect("square")
            .transpose()
            .expect("matrix");
        if determinant(&qm) < 0.0 {
            q[0].iter_mut().for_each(|v| *v = -*v);
        }
        return q;
    }
}

fn determinant(a: &Tensor) -> f64 {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .expect("non-empty");
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det *= m[c][c];
        for i in c + 1..n {
            let f = m[i][c] / m[c][c];
            for j in c..n {
                m[i][j] -= f * m[c][j];
            }
        }
    }
    det
}

/// `M = u uᵀ + Q O Qᵀ` with `u = 1/√k`, `Q` an orthonormal basis of the
/// complement of `1`, and `O` a random rotation of that subspace.
pub fn make_confounding_map(k: usize, seed: u64) -> Result<ConfoundingMap> {
    if k < 2 {
        return Err(Error::Domain(format!("confounding map needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = vec![1.0 / (k as f64).sqrt(); k];
    let mut cols = vec![u.clone()];
    cols.extend((0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()));
    let basis = gram_schmidt(&cols);
    let q = &basis[1..k];
    let o = random_rotation(k - 1, &mut rng);
    let mut m = Tensor::zeros(&[k, k]);
    for i in 0..k {
        for j in 0..k {
            let mut v = u[i] * u[j];
            for a in 0..k - 1 {
                for b in 0..k - 1 {
                    // o[b] is the b-th column of O
                    v += q[a][i] * o[b][a] * q[b][j];
                }
            }
            m.set(i, j, v);
        }
    }
    Ok(ConfoundingMap { m })
}

/// Two-sample energy distance `2E|X−Y| − E|X−X'| − E|Y−Y'|` (V-statistic).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let dist = pairwise(&pooled);
    let idx: Vec<usize> = (0..pooled.len()).collect();
    energy_from_matrix(&dist, &idx, a.len())
}

fn pairwise(points: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            d[i][j] = s.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

fn energy_from_matrix(dist: &[Vec<f64>], idx: &[usize], n_a: usize) -> f64 {
    let (ia, ib) = idx.split_at(n_a);
    let mean_block = |x: &[usize], y: &[usize]| {
        let mut s = 0.0;
        for &i in x {
            for &j in y {
                s += dist[i][j];
            }
        }
        s / (x.len() * y.len()) as f64
    };
    2.0 * mean_block(ia, ib) - mean_block(ia, ia) - mean_block(ib, ib)
}

/// Permutation p-value of the energy distance between two samples.
pub fn energy_permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let dist = pairwise(&pooled);
    let mut idx: Vec<usize> = (0..pooled.len()).collect();
    let observed = energy_from_matrix(&dist, &idx, a.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0;
    for _ in 0..permutations {
        idx.shuffle(&mut rng);
        if energy_from_matrix(&dist, &idx, a.len()) >= observed {
            at_least += 1;
        }
    }
    (at_least + 1) as f64 / (permutations + 1) as f64
}
