//! Quantitative evaluations of fitted models.

use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::elbo::PairedData;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, mean, pearson};
use crate::matching::max_weight_assignment;
use crate::model::Model;
use crate::synth::{generate, GenerateOptions};
use crate::tensor::Tensor;

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("writing report: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    /// `None` for features that are constant in the data or the
    /// reconstruction.
    pub per_feature: Vec<Option<f64>>,
    /// Mean over defined correlations.
    pub mean: f64,
}

/// Per-feature correlation between `x` and its reconstruction from the
/// posterior point estimates.
pub fn reconstruction_corr(
    model: &Model,
    x: &Tensor,
    ages: &[f64],
    lognormal_mean: bool,
) -> Result<ReconstructionReport> {
    let (r, b) = model.point_latents(x, ages, lognormal_mean)?;
    let xhat = model.decode_full(&r, &b, ages)?;
    let per_feature: Vec<Option<f64>> = (0..x.cols()).map(|j| pearson(&x.col(j), &xhat.col(j))).collect();
    let defined: Vec<f64> = per_feature.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Data(
            "no feature has a defined reconstruction correlation".into(),
        ));
    }
    Ok(ReconstructionReport {
        mean: mean(&defined),
        per_feature,
    })
}

fn check_followup(ages0: &[f64], ages1: &[f64]) -> Result<()> {
    if ages0.len() != ages1.len() {
        return Err(Error::Domain(format!(
            "{} baseline ages, {} target ages",
            ages0.len(),
            ages1.len()
        )));
    }
    if let Some(i) = (0..ages0.len()).find(|&i| !(ages1[i] >= ages0[i])) {
        return Err(Error::Domain(format!(
            "row {i}: target age {} is before baseline age {}",
            ages1[i], ages0[i]
        )));
    }
    Ok(())
}

/// Predicts each row at `ages1` from its posterior point estimate at
/// `ages0`. Equal ages give the reconstruction.
pub fn fast_forward(
    model: &Model,
    x0: &Tensor,
    ages0: &[f64],
    ages1: &[f64],
    lognormal_mean: bool,
) -> Result<Tensor> {
    check_followup(ages0, ages1)?;
    let (r, b) = model.point_latents(x0, ages0, lognormal_mean)?;
    model.decode_full(&r, &b, ages1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FastForwardPoint {
    /// Left edge of the source bin.
    pub bin_start: f64,
    pub feature: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub predicted: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FastForwardReport {
    pub horizon: f64,
    pub bin_width: f64,
    pub points: Vec<FastForwardPoint>,
    /// Source bins skipped because their target bin was empty.
    pub skipped_bins: Vec<f64>,
    /// Pearson correlation of predicted and observed changes over all
    /// points; `None` if either side is constant.
    pub correlation: Option<f64>,
}

impl FastForwardReport {
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "bin_start",
            "feature",
            "source_count",
            "target_count",
            "predicted_change",
            "observed_change",
        ])
        .map_err(csv_error)?;
        for p in &self.points {
            w.write_record([
                p.bin_start.to_string(),
                feature_names
                    .get(p.feature)
                    .cloned()
                    .unwrap_or_else(|| p.feature.to_string()),
                p.source_count.to_string(),
                p.target_count.to_string(),
                p.predicted.to_string(),
                p.observed.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::Data(format!("writing report: {e}")))
    }
}

/// Compares the model's mean predicted change of each age bin over
/// `horizon` years against the observed difference between that bin and
/// the bin `horizon` years older. Bins are left-closed and aligned to
/// multiples of `bin_width`.
pub fn crosssectional_ffwd_eval(
    model: &Model,
    x: &Tensor,
    ages: &[f64],
    bin_width: f64,
    horizon: f64,
    lognormal_mean: bool,
) -> Result<FastForwardReport> {
    if !(bin_width > 0.0 && bin_width.is_finite()) || !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Domain(format!(
            "bin width {bin_width} and horizon {horizon} must be positive"
        )));
    }
    let n = ages.len();
    if n == 0 {
        return Err(Error::Data("no rows to evaluate".into()));
    }
    let lo = ages.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ages.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < horizon + bin_width {
        return Err(Error::Domain(format!(
            "ages span {:.2} years, fewer than horizon + bin width = {}",
            hi - lo,
            horizon + bin_width
        )));
    }
    let (r, b) = model.point_latents(x, ages, lognormal_mean)?;
    let recon = model.decode_full(&r, &b, ages)?;
    let later: Vec<f64> = ages.iter().map(|a| a + horizon).collect();
    let pred = model.decode_full(&r, &b, &later)?;

    let first = (lo / bin_width).floor() * bin_width;
    let members = |start: f64| -> Vec<usize> {
        (0..n)
            .filter(|&i| ages[i] >= start - 1e-9 && ages[i] < start + bin_width - 1e-9)
            .collect()
    };
    let d = x.cols();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let mut start = first;
    while start <= hi {
        let source = members(start);
        if !source.is_empty() {
            let target = members(start + horizon);
            if target.is_empty() {
                log::info!(
                    "fast-forward: no individuals in [{}, {}), bin skipped",
                    start + horizon,
                    start + horizon + bin_width
                );
                skipped.push(start);
            } else {
                for j in 0..d {
                    let predicted = source
                        .iter()
                        .map(|&i| pred.get(i, j) - recon.get(i, j))
                        .sum::<f64>()
                        / source.len() as f64;
                    let observed = target.iter().map(|&i| x.get(i, j)).sum::<f64>() / target.len() as f64
                        - source.iter().map(|&i| x.get(i, j)).sum::<f64>() / source.len() as f64;
                    points.push(FastForwardPoint {
                        bin_start: start,
                        feature: j,
                        source_count: source.len(),
                        target_count: target.len(),
                        predicted,
                        observed,
                    });
                }
            }
        }
        start += bin_width;
    }
    let predicted: Vec<f64> = points.iter().map(|p| p.predicted).collect();
    let observed: Vec<f64> = points.iter().map(|p| p.observed).collect();
    let correlation = if points.len() > 1 {
        pearson(&predicted, &observed)
    } else {
        None
    };
    Ok(FastForwardReport {
        horizon,
        bin_width,
        points,
        skipped_bins: skipped,
        correlation,
    })
}

/// Per-feature least-squares slope on age (change per year).
pub fn age_trend(x: &Tensor, ages: &[f64]) -> Result<Vec<f64>> {
    let (n, d) = x.dims2("age_trend")?;
    if ages.len() != n || n < 2 {
        return Err(Error::Domain(
            "age trend needs at least two rows with ages".into(),
        ));
    }
    let ma = mean(ages);
    let saa: f64 = ages.iter().map(|a| (a - ma) * (a - ma)).sum();
    if saa <= 0.0 {
        return Err(Error::Domain("all ages are equal".into()));
    }
    Ok((0..d)
        .map(|j| {
            let col = x.col(j);
            let mx = mean(&col);
            col.iter()
                .zip(ages)
                .map(|(v, a)| (v - mx) * (a - ma))
                .sum::<f64>()
                / saa
        })
        .collect())
}

/// Squared-error comparison of the model's follow-up predictions with
/// three simple predictors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongitudinalReport {
    pub n: usize,
    pub min_gap: f64,
    /// Fraction of individuals whose model error is strictly below the
    /// benchmark's.
    pub win_vs_no_change: f64,
    pub win_vs_reconstruction: f64,
    pub win_vs_mean_change: f64,
    /// Mean over individuals of the total squared error across features.
    pub model_error: f64,
    pub no_change_error: f64,
    pub reconstruction_error: f64,
    pub mean_change_error: f64,
}

/// Evaluates pairs whose gap is at least `min_gap` years. `trend` is the
/// per-year cross-sectional change used by the mean-change benchmark.
pub fn longitudinal_benchmark(
    model: &Model,
    pairs: &PairedData,
    trend: &[f64],
    min_gap: f64,
    lognormal_mean: bool,
) -> Result<LongitudinalReport> {
    let d = model.config.d;
    pairs.validate(d)?;
    if trend.len() != d {
        return Err(Error::Domain(format!(
            "trend has {} entries, model has {d} features",
            trend.len()
        )));
    }
    let keep: Vec<usize> = (0..pairs.len())
        .filter(|&i| pairs.ages1[i] - pairs.ages0[i] >= min_gap)
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(format!(
            "no follow-ups at least {min_gap} years after baseline"
        )));
    }
    let sub = PairedData {
        x0: pairs.x0.select_rows(&keep)?,
        ages0: keep.iter().map(|&i| pairs.ages0[i]).collect(),
        x1: pairs.x1.select_rows(&keep)?,
        ages1: keep.iter().map(|&i| pairs.ages1[i]).collect(),
    };
    let (r, b) = model.point_latents(&sub.x0, &sub.ages0, lognormal_mean)?;
    let pred = model.decode_full(&r, &b, &sub.ages1)?;
    let recon = model.decode_full(&r, &b, &sub.ages0)?;
    Ok(score_followups(&sub, &pred, &recon, trend, min_gap))
}

/// Win fractions and errors for given follow-up predictions and
/// reconstructions of the baseline visits.
pub fn score_followups(
    pairs: &PairedData,
    pred: &Tensor,
    recon: &Tensor,
    trend: &[f64],
    min_gap: f64,
) -> LongitudinalReport {
    let (x0, x1) = (&pairs.x0, &pairs.x1);
    let d = x0.cols();
    let sse = |i: usize, guess: &dyn Fn(usize) -> f64| -> f64 {
        (0..d).map(|j| (x1.get(i, j) - guess(j)).powi(2)).sum()
    };
    let m = pairs.len();
    let (mut wins, mut totals) = ([0usize; 3], [0.0f64; 4]);
    for i in 0..m {
        let gap = pairs.ages1[i] - pairs.ages0[i];
        let e_model = sse(i, &|j| pred.get(i, j));
        let e = [
            sse(i, &|j| x0.get(i, j)),
            sse(i, &|j| recon.get(i, j)),
            sse(i, &|j| x0.get(i, j) + trend[j] * gap),
        ];
        for k in 0..3 {
            wins[k] += usize::from(e_model < e[k]);
            totals[k + 1] += e[k];
        }
        totals[0] += e_model;
    }
    let frac = |w: usize| w as f64 / m as f64;
    LongitudinalReport {
        n: m,
        min_gap,
        win_vs_no_change: frac(wins[0]),
        win_vs_reconstruction: frac(wins[1]),
        win_vs_mean_change: frac(wins[2]),
        model_error: totals[0] / m as f64,
        no_change_error: totals[1] / m as f64,
        reconstruction_error: totals[2] / m as f64,
        mean_change_error: totals[3] / m as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityScore {
    pub rho: f64,
    /// Column of the second matrix matched to each column of the first.
    pub permutation: Vec<usize>,
    pub per_component: Vec<f64>,
}

fn constant_column(r: &Tensor, which: &str) -> Result<()> {
    for j in 0..r.cols() {
        let c = r.col(j);
        if c.iter().all(|v| *v == c[0]) {
            return Err(Error::Domain(format!("column {j} of {which} is constant")));
        }
    }
    Ok(())
}

/// Mean per-component correlation between two sets of rates, maximized
/// over matchings of their components.
pub fn rho_r(r1: &Tensor, r2: &Tensor) -> Result<StabilityScore> {
    let (n, k) = r1.dims2("rho_r")?;
    if r2.shape() != r1.shape() {
        return Err(Error::Domain(format!(
            "rate matrices have shapes {:?} and {:?}",
            r1.shape(),
            r2.shape()
        )));
    }
    if n < 2 || k == 0 {
        return Err(Error::Domain("need at least two rows and one component".into()));
    }
    constant_column(r1, "the first rate matrix")?;
    constant_column(r2, "the second rate matrix")?;
    let cols1: Vec<Vec<f64>> = (0..k).map(|j| r1.col(j)).collect();
    let cols2: Vec<Vec<f64>> = (0..k).map(|j| r2.col(j)).collect();
    let corr: Vec<Vec<f64>> = cols1
        .iter()
        .map(|a| {
            cols2
                .iter()
                .map(|b| pearson(a, b).expect("non-constant columns"))
                .collect()
        })
        .collect();
    let permutation = max_weight_assignment(&corr);
    let per_component: Vec<f64> = (0..k).map(|j| corr[j][permutation[j]]).collect();
    Ok(StabilityScore {
        rho: mean(&per_component),
        permutation,
        per_component,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryScore {
    pub mean_correlation: f64,
    pub permutation: Vec<usize>,
    pub correlations: Vec<f64>,
    /// Slope of each matched fitted component regressed on its true one.
    pub slopes: Vec<f64>,
}

impl RecoveryScore {
    pub fn mean_abs_slope_error(&self) -> f64 {
        mean(&self.slopes.iter().map(|s| (s - 1.0).abs()).collect::<Vec<_>>())
    }
}

pub fn recovery_score(r_true: &Tensor, r_fitted: &Tensor) -> Result<RecoveryScore> {
    let stab = rho_r(r_true, r_fitted)?;
    let slopes = stab
        .permutation
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let t = r_true.col(j);
            let f = r_fitted.col(l);
            let (mt, mf) = (mean(&t), mean(&f));
            let stt: f64 = t.iter().map(|v| (v - mt) * (v - mt)).sum();
            let stf: f64 = t.iter().zip(&f).map(|(a, b)| (a - mt) * (b - mf)).sum();
            stf / stt
        })
        .collect();
    Ok(RecoveryScore {
        mean_correlation: stab.rho,
        permutation: stab.permutation,
        correlations: stab.per_component,
        slopes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFeatureTable {
    /// `[k_r, d_mono]`.
    pub corr: Tensor,
    /// Fraction of entries with magnitude below 0.1.
    pub sparsity: f64,
}

impl RateFeatureTable {
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rate", "feature", "correlation"])
            .map_err(csv_error)?;
        for j in 0..self.corr.rows() {
            for l in 0..self.corr.cols() {
                let name = feature_names.get(l).cloned().unwrap_or_else(|| l.to_string());
                w.write_record([format!("r_{}", j + 1), name, self.corr.get(j, l).to_string()])
                    .map_err(csv_error)?;
            }
        }
        w.flush().map_err(|e| Error::Data(format!("writing report: {e}")))
    }
}

/// Correlates each rate with each monotone feature in a cohort sampled from
/// `model`.
pub fn rate_feature_corr(model: &Model, opts: &GenerateOptions) -> Result<RateFeatureTable> {
    let (ds, truth) = generate(model, opts)?;
    let (k, dm) = (model.config.k_r, model.config.d_mono);
    let mut corr = Tensor::zeros(&[k, dm]);
    let n = truth.r.rows();
    for j in 0..k {
        let r = truth.r.col(j);
        for l in 0..dm {
            let x: Vec<f64> = (0..n).map(|i| ds.x.get(i, l)).collect();
            corr.set(j, l, pearson(&r, &x).unwrap_or(0.0));
        }
    }
    let small = corr.data().iter().filter(|c| c.abs() < 0.1).count();
    let sparsity = if corr.is_empty() {
        0.0
    } else {
        small as f64 / corr.len() as f64
    };
    Ok(RateFeatureTable { corr, sparsity })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Association {
    pub rate: usize,
    pub coefficient: f64,
    pub std_error: f64,
    pub t_stat: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Whether `p_value` is below the Bonferroni-adjusted threshold.
    pub significant: bool,
}

/// Regresses each rate on `[1, covariate, controls]` by ordinary least
/// squares and reports the covariate's coefficient. `family_alpha` is
/// split evenly across the rates.
pub fn covariate_assoc(
    rates: &Tensor,
    covariate: &[f64],
    controls: &Tensor,
    family_alpha: f64,
) -> Result<Vec<Association>> {
    let (n, k) = rates.dims2("covariate_assoc")?;
    let (nc, c) = controls.dims2("covariate_assoc")?;
    if covariate.len() != n || nc != n {
        return Err(Error::Domain(format!(
            "{n} rate rows, {} covariate values, {nc} control rows",
            covariate.len()
        )));
    }
    let p = 2 + c;
    if n <= p {
        return Err(Error::Domain(format!("{n} rows cannot support {p} regressors")));
    }
    let design = |i: usize, l: usize| match l {
        0 => 1.0,
        1 => covariate[i],
        _ => controls.get(i, l - 2),
    };
    let mut xtx = Tensor::zeros(&[p, p]);
    for i in 0..n {
        for a in 0..p {
            for b in 0..p {
                let v = xtx.get(a, b) + design(i, a) * design(i, b);
                xtx.set(a, b, v);
            }
        }
    }
    let l = cholesky(&xtx).map_err(|_| Error::Domain("design matrix is rank deficient".into()))?;
    let mut e1 = vec![0.0; p];
    e1[1] = 1.0;
    let inv_11 = cholesky_solve(&l, &e1)[1];
    let df = (n - p) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Domain(e.to_string()))?;
    let threshold = family_alpha / k as f64;
    (0..k)
        .map(|j| {
            let y = rates.col(j);
            let xty: Vec<f64> = (0..p)
                .map(|a| (0..n).map(|i| design(i, a) * y[i]).sum())
                .collect();
            let beta = cholesky_solve(&l, &xty);
            let rss: f64 = (0..n)
                .map(|i| {
                    let fit: f64 = (0..p).map(|a| design(i, a) * beta[a]).sum();
                    (y[i] - fit).powi(2)
                })
                .sum();
            let sigma2 = rss / df;
            let std_error = (sigma2 * inv_11).sqrt();
            let t_stat = if std_error > 0.0 {
                beta[1] / std_error
            } else {
                f64::INFINITY.copysign(beta[1])
            };
            let p_value = if t_stat.is_finite() {
                2.0 * (1.0 - dist.cdf(t_stat.abs()))
            } else {
                0.0
            };
            Ok(Association {
                rate: j,
                coefficient: beta[1],
                std_error,
                t_stat,
                p_value,
                significant: p_value < threshold,
            })
        })
        .collect()
}
