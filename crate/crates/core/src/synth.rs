//! Synthetic cohorts drawn from a known model.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::inverse_softplus;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{column_means, pearson};
use crate::model::{Mlp, Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Value of a free parameter whose softplus is exactly zero.
const SOFTPLUS_ZERO: f64 = -1000.0;

/// How the rates load on the monotone features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sparsity {
    /// Contiguous disjoint feature blocks, one per rate, with exact zeros
    /// elsewhere.
    Block,
    /// Blocks as above, plus off-block loadings of `fraction` times the
    /// smallest in-block loading on every row except the first of each
    /// block.
    LeakyBlock { fraction: f64 },
}

/// Knobs of [`make_reference_params`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDesign {
    pub sparsity: Sparsity,
    pub sigma_eps: f64,
    /// Target slope of each monotone transform over the cohort's range of
    /// `u = A r t`.
    pub monotone_slope: f64,
    /// Target standard deviation of each non-monotone feature.
    pub nonmono_scale: f64,
    /// Target standard deviation of each bias contribution.
    pub bias_scale: f64,
    /// Ages used to centre and scale the networks.
    pub calibration_ages: (f64, f64),
}

impl Default for ReferenceDesign {
    fn default() -> Self {
        Self {
            sparsity: Sparsity::Block,
            sigma_eps: 0.3,
            monotone_slope: 8.0,
            nonmono_scale: 0.8,
            bias_scale: 0.3,
            calibration_ages: (40.0, 70.0),
        }
    }
}

/// Block owning monotone feature `i` when `d_mono` features are split
/// among `k` rates.
pub fn block_of(i: usize, d_mono: usize, k: usize) -> usize {
    i * k / d_mono
}

/// Ground-truth parameters with a block-sparse loading matrix, exponent
/// weights on `{1, 2}` and small random networks.
pub fn make_reference_params(config: &ModelConfig, seed: u64, design: &ReferenceDesign) -> Result<Model> {
    config.validate()?;
    if config.d_mono < config.k_r {
        return Err(Error::Config(format!(
            "d_mono = {} is smaller than k_r = {}: some rate would have no private feature",
            config.d_mono, config.k_r
        )));
    }
    if !(design.sigma_eps >= 0.0) {
        return Err(Error::Config("sigma_eps must be non-negative".into()));
    }
    let lin = config.exponents.iter().position(|&p| p == 1.0);
    let quad = config.exponents.iter().position(|&p| p == 2.0);
    let (Some(lin), Some(quad)) = (lin, quad) else {
        return Err(Error::Config("the exponent set must contain 1 and 2".into()));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    let (dm, k) = (config.d_mono, config.k_r);

    let mut a = Tensor::zeros(&[dm, k]);
    for i in 0..dm {
        a.set(i, block_of(i, dm, k), rng.random_range(0.8..1.2));
    }
    if let Sparsity::LeakyBlock { fraction } = design.sparsity {
        let first_rows: Vec<usize> = (0..k)
            .map(|j| (0..dm).find(|&i| block_of(i, dm, k) == j).unwrap())
            .collect();
        for i in (0..dm).filter(|i| !first_rows.contains(i)) {
            for j in (0..k).filter(|&j| j != block_of(i, dm, k)) {
                a.set(i, j, fraction * 0.8);
            }
        }
    }
    params.theta_a = a.map(|v| {
        if v > 0.0 {
            inverse_softplus(v)
        } else {
            SOFTPLUS_ZERO
        }
    });

    // s_i(u) = w1 u + w2 u² with slope `monotone_slope` at the typical u.
    let (lo, hi) = design.calibration_ages;
    let t_mid = 0.5 * (lo + hi) / config.t_scale;
    let mut theta_w = Tensor::full(&[dm, config.exponents.len()], SOFTPLUS_ZERO);
    for i in 0..dm {
        let u_mid = a.row(i).iter().sum::<f64>() * t_mid;
        let mix: f64 = rng.random_range(0.0..0.7);
        let w1 = design.monotone_slope * (1.0 - mix);
        let w2 = design.monotone_slope * mix / (2.0 * u_mid);
        theta_w.set(i, lin, inverse_softplus(w1));
        theta_w.set(i, quad, inverse_softplus(w2));
    }
    params.theta_w = theta_w;
    params.log_sigma_eps = Tensor::scalar(design.sigma_eps.ln());

    // Calibrate the networks on a draw from the priors.
    let model = Model::new(config.clone(), params)?;
    let m = 4000;
    let mut cal = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca1b);
    let ages: Vec<f64> = (0..m).map(|_| cal.random_range(lo..hi)).collect();
    let r = Tensor::randn(&[m, k], config.sigma_r, &mut cal).map(f64::exp);
    let b = Tensor::randn(&[m, config.k_b], 1.0, &mut cal);
    let mut params = model.params;

    let z = {
        let mut z = r.clone();
        for i in 0..m {
            for j in 0..k {
                z.set(i, j, r.get(i, j) * ages[i] / config.t_scale);
            }
        }
        z
    };
    if let Some(net) = params.nonmono.as_mut() {
        rescale_output(net, &z, design.nonmono_scale)?;
    }
    let mono_mean = {
        let probe = Model::new(config.clone(), params.clone())?;
        column_means(&probe.decode_monotone(&r, &ages)?)
    };
    if let Some(net) = params.bias_net.as_mut() {
        rescale_output(net, &b, design.bias_scale)?;
        let last = net.layers.last_mut().expect("output layer");
        for (j, m) in mono_mean.iter().enumerate() {
            let v = last.bias.get(0, j);
            last.bias.set(0, j, v - m);
        }
    }
    Model::new(config.clone(), params)
}

/// Scales the output layer so every output has standard deviation
/// `target` and mean zero on `inputs`.
fn rescale_output(net: &mut Mlp, inputs: &Tensor, target: f64) -> Result<()> {
    let out = forward_values(net, inputs)?;
    let means = column_means(&out);
    let n = out.rows() as f64;
    let last = net.layers.last_mut().expect("output layer");
    for j in 0..out.cols() {
        let col = out.col(j);
        let sd = (col.iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n).sqrt();
        let f = if sd > 0.0 { target / sd } else { 0.0 };
        for i in 0..last.weight.rows() {
            let v = last.weight.get(i, j);
            last.weight.set(i, j, v * f);
        }
        let bias = last.bias.get(0, j);
        last.bias.set(0, j, (bias - means[j]) * f);
    }
    Ok(())
}

fn forward_values(net: &Mlp, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (li, l) in net.layers.iter().enumerate() {
        h = h.matmul(&l.weight)?;
        let cols = h.cols();
        for (k, v) in h.data_mut().iter_mut().enumerate() {
            *v += l.bias.data()[k % cols];
            if li + 1 < net.layers.len() && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub n: usize,
    /// Baseline ages are uniform on `[lo, hi)`.
    pub age_range: (f64, f64),
    pub seed: u64,
    /// Share of individuals with a second visit.
    pub longitudinal_fraction: f64,
    /// Follow-up gaps in years, uniform on `[lo, hi]`.
    pub gap_range: (f64, f64),
    pub keep_noise: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n: 20_000,
            age_range: (40.0, 70.0),
            seed: 0,
            longitudinal_fraction: 0.0,
            gap_range: (2.0, 6.0),
            keep_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub r: Tensor,
    pub b: Tensor,
    pub ages: Vec<f64>,
    /// Follow-up age per individual, if any.
    pub followup_ages: Vec<Option<f64>>,
    pub model: Model,
    /// Measurement noise of every dataset row, in dataset order.
    pub noise: Option<Tensor>,
}

pub fn feature_names(config: &ModelConfig) -> Vec<String> {
    (0..config.d)
        .map(|j| {
            if j < config.d_mono {
                format!("mono_{j:02}")
            } else {
                format!("free_{:02}", j - config.d_mono)
            }
        })
        .collect()
}

/// Draws a cohort from `model`: ages uniform, `log r ~ N(0, σ_r²)`,
/// `b ~ N(0, I)`, `x = decode_full + ε`. Individuals selected for
/// follow-up get a second visit with the same latents and fresh noise.
pub fn generate(model: &Model, opts: &GenerateOptions) -> Result<(Dataset, GroundTruth)> {
    let (lo, hi) = opts.age_range;
    if opts.n == 0 {
        return Err(Error::Domain("cohort size must be at least 1".into()));
    }
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Domain(format!("invalid age range [{lo}, {hi})")));
    }
    let (g0, g1) = opts.gap_range;
    if !(g0 > 0.0 && g1 >= g0 && g1.is_finite()) {
        return Err(Error::Domain(format!("invalid follow-up gap range [{g0}, {g1}]")));
    }
    if !(0.0..=1.0).contains(&opts.longitudinal_fraction) {
        return Err(Error::Domain(format!(
            "longitudinal fraction {} outside [0, 1]",
            opts.longitudinal_fraction
        )));
    }
    let config = &model.config;
    let n = opts.n;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let ages: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let r = Tensor::randn(&[n, config.k_r], config.sigma_r, &mut rng).map(f64::exp);
    let b = Tensor::randn(&[n, config.k_b], 1.0, &mut rng);
    let sigma = model.params.sigma_eps();
    let noise0 = Tensor::randn(&[n, config.d], 1.0, &mut rng).map(|e| e * sigma);
    let x0 = add(&model.decode_full(&r, &b, &ages)?, &noise0)?;

    let m = (opts.longitudinal_fraction * n as f64).round() as usize;
    let follow_rows: Vec<usize> = (0..m).collect();
    let gaps: Vec<f64> = (0..m)
        .map(|_| if g1 > g0 { rng.random_range(g0..=g1) } else { g0 })
        .collect();
    let ages1: Vec<f64> = follow_rows.iter().zip(&gaps).map(|(&i, g)| ages[i] + g).collect();
    let noise1 = Tensor::randn(&[m, config.d], 1.0, &mut rng).map(|e| e * sigma);
    let x1 = if m > 0 {
        let r1 = r.select_rows(&follow_rows)?;
        let b1 = b.select_rows(&follow_rows)?;
        add(&model.decode_full(&r1, &b1, &ages1)?, &noise1)?
    } else {
        Tensor::zeros(&[0, config.d])
    };

    let width = (n.max(2) - 1).to_string().len();
    let mut ids: Vec<String> = (0..n).map(|i| format!("s{i:0width$}")).collect();
    let mut visits = vec![0u32; n];
    let mut all_ages = ages.clone();
    let mut data = x0.into_data();
    ids.extend(follow_rows.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>());
    visits.extend(std::iter::repeat_n(1, m));
    all_ages.extend(&ages1);
    data.extend_from_slice(x1.data());
    let x = Tensor::matrix(n + m, config.d, data)?;
    let monotone = (0..config.d).map(|j| j < config.d_mono).collect();
    let ds = Dataset::new(ids, visits, all_ages, x, feature_names(config), monotone)?;

    let mut followup_ages = vec![None; n];
    for (&i, &a) in follow_rows.iter().zip(&ages1) {
        followup_ages[i] = Some(a);
    }
    let noise = if opts.keep_noise {
        let mut all = noise0.into_data();
        all.extend_from_slice(noise1.data());
        Some(Tensor::matrix(n + m, config.d, all)?)
    } else {
        None
    };
    Ok((
        ds,
        GroundTruth {
            r,
            b,
            ages,
            followup_ages,
            model: model.clone(),
            noise,
        },
    ))
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.zip_with(b, "add_noise", |x, y| x + y)?)
}

/// Writes `id,r_1..r_k,b_1..b_k` for the baseline rows of `ds`.
pub fn write_ground_truth_csv<W: Write>(ds: &Dataset, truth: &GroundTruth, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Data(format!("writing ground truth: {e}"));
    let mut header = vec!["id".to_string()];
    header.extend((1..=truth.r.cols()).map(|j| format!("r_{j}")));
    header.extend((1..=truth.b.cols()).map(|j| format!("b_{j}")));
    w.write_record(&header).map_err(to_err)?;
    for i in 0..truth.r.rows() {
        let mut rec = vec![ds.ids[i].clone()];
        rec.extend(truth.r.row(i).iter().map(|v| v.to_string()));
        rec.extend(truth.b.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing ground truth: {e}")))
}

/// Correlation of each monotone feature with age, useful as a sanity
/// check on a generated cohort.
pub fn age_correlations(ds: &Dataset) -> Vec<Option<f64>> {
    (0..ds.d()).map(|j| pearson(&ds.x.col(j), &ds.ages)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iso::{check_approx, check_exact};

    fn reference(seed: u64) -> Model {
        make_reference_params(&ModelConfig::new(20, 15, 2, 3), seed, &ReferenceDesign::default()).unwrap()
    }

    #[test]
    fn block_pattern_has_private_rows() {
        let config = ModelConfig::new(6, 6, 2, 0);
        let model = make_reference_params(&config, 1, &ReferenceDesign::default()).unwrap();
        let a = model.params.loading_matrix();
        assert!(check_exact(&a).unwrap().exact_pass);
        assert_eq!(check_approx(&a, 50.0).unwrap().approx_pass, Some(true));
    }

    #[test]
    fn leaky_blocks_still_pass_the_dominance_check() {
        let design = ReferenceDesign {
            sparsity: Sparsity::LeakyBlock { fraction: 0.01 },
            ..ReferenceDesign::default()
        };
        let model = make_reference_params(&ModelConfig::new(20, 15, 2, 3), 2, &design).unwrap();
        let a = model.params.loading_matrix();
        assert_eq!(check_approx(&a, 50.0).unwrap().approx_pass, Some(true));
        assert!(a.data().iter().filter(|v| **v > 0.0).count() > 15);
    }

    #[test]
    fn too_few_monotone_features_is_error() {
        let config = ModelConfig::new(5, 2, 3, 0);
        assert!(make_reference_params(&config, 0, &ReferenceDesign::default()).is_err());
    }

    #[test]
    fn noiseless_single_individual() {
        let config = ModelConfig::new(20, 15, 2, 3);
        let design = ReferenceDesign {
            sigma_eps: 0.0,
            ..ReferenceDesign::default()
        };
        let model = make_reference_params(&config, 3, &design).unwrap();
        let (ds, truth) = generate(
            &model,
            &GenerateOptions {
                n: 1,
                ..GenerateOptions::default()
            },
        )
        .unwrap();
        assert_eq!(ds.x, model.decode_full(&truth.r, &truth.b, &truth.ages).unwrap());
    }

    #[test]
    fn same_seed_same_cohort() {
        let model = reference(4);
        let opts = GenerateOptions {
            n: 200,
            longitudinal_fraction: 0.3,
            seed: 9,
            ..GenerateOptions::default()
        };
        let (a, ta) = generate(&model, &opts).unwrap();
        let (b, tb) = generate(&model, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(a.len(), 260);
    }

    #[test]
    fn follow_up_shares_latents() {
        let config = ModelConfig::new(20, 15, 2, 3);
        let design = ReferenceDesign {
            sigma_eps: 0.0,
            ..ReferenceDesign::default()
        };
        let model = make_reference_params(&config, 5, &design).unwrap();
        let opts = GenerateOptions {
            n: 50,
            longitudinal_fraction: 0.5,
            ..GenerateOptions::default()
        };
        let (ds, truth) = generate(&model, &opts).unwrap();
        let (pairs, ids) = ds.pairs().unwrap();
        assert_eq!(ids.len(), 25);
        let rows: Vec<usize> = (0..25).collect();
        let expect = model
            .decode_full(
                &truth.r.select_rows(&rows).unwrap(),
                &truth.b.select_rows(&rows).unwrap(),
                &pairs.ages1,
            )
            .unwrap();
        assert_eq!(pairs.x1, expect);
        for (a0, a1) in pairs.ages0.iter().zip(&pairs.ages1) {
            let gap = a1 - a0;
            assert!((2.0..=6.0).contains(&gap));
        }
    }

    #[test]
    fn invalid_options_rejected() {
        let model = reference(6);
        let bad = [
            GenerateOptions {
                n: 0,
                ..GenerateOptions::default()
            },
            GenerateOptions {
                age_range: (50.0, 40.0),
                ..GenerateOptions::default()
            },
            GenerateOptions {
                age_range: (-1.0, 40.0),
                ..GenerateOptions::default()
            },
            GenerateOptions {
                gap_range: (0.0, 2.0),
                ..GenerateOptions::default()
            },
            GenerateOptions {
                longitudinal_fraction: 1.5,
                ..GenerateOptions::default()
            },
        ];
        for opts in bad {
            assert!(generate(&model, &opts).is_err(), "{opts:?}");
        }
    }

    #[test]
    fn monotone_features_rise_with_age_and_scales_are_comparable() {
        let model = reference(7);
        let (ds, _) = generate(
            &model,
            &GenerateOptions {
                n: 10_000,
                ..GenerateOptions::default()
            },
        )
        .unwrap();
        let bins: Vec<Vec<usize>> = (0..6)
            .map(|b| {
                (0..ds.len())
                    .filter(|&i| ((ds.ages[i] - 40.0) / 5.0).floor() as usize == b)
                    .collect()
            })
            .collect();
        for j in 0..15 {
            let means: Vec<f64> = bins
                .iter()
                .map(|rows| rows.iter().map(|&i| ds.x.get(i, j)).sum::<f64>() / rows.len() as f64)
                .collect();
            assert!(means.windows(2).all(|w| w[1] > w[0]), "feature {j}: {means:?}");
        }
        let var = |j: usize| {
            let c = ds.x.col(j);
            let m = c.iter().sum::<f64>() / c.len() as f64;
            c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64
        };
        let vars: Vec<f64> = (0..15).map(var).collect();
        let (lo, hi) = vars
            .iter()
            .fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo < 3.0, "{vars:?}");
    }

    #[test]
    fn log_rate_moments_match_prior() {
        let model = reference(8);
        let n = 100_000;
        let (_, truth) = generate(
            &model,
            &GenerateOptions {
                n,
                ..GenerateOptions::default()
            },
        )
        .unwrap();
        for j in 0..2 {
            let lr: Vec<f64> = truth.r.col(j).iter().map(|v| v.ln()).collect();
            let m = lr.iter().sum::<f64>() / n as f64;
            let sd = (lr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
            let se_mean = 0.1 / (n as f64).sqrt();
            let se_sd = 0.1 / (2.0 * (n - 1) as f64).sqrt();
            assert!(m.abs() < 3.0 * se_mean, "mean {m}");
            assert!((sd - 0.1).abs() < 3.0 * se_sd, "sd {sd}");
        }
    }
}
