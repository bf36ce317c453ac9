//! Variational objective and the training loop.
//!
//! The per-batch loss is the negative evidence lower bound divided by the
//! batch size. With paired observations `(x_0 at t_0, x_1 at t_1)` the
//! pair loss adds the expected log-likelihood of the follow-up under the
//! posterior inferred from the first visit alone, and the joint loss is
//! `cross + λ_lon · pair`.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{age_contrast_loadings, loading_parameters, LoadingInit};
use crate::model::{
    decode_full_graph, encode_graph, reparam_graph, BoundParams, LatentPosterior, Model, ModelConfig,
    ModelParams, PosteriorVars,
};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mc_samples: usize,
    pub lambda_lon: f64,
    pub seed: u64,
    pub loading_init: LoadingInit,
    /// Independent fits started by [`train`]; the one with the lowest
    /// final-epoch loss is kept.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0005,
            batch_size: 512,
            epochs: 50,
            mc_samples: 1,
            lambda_lon: 0.0,
            seed: 0,
            loading_init: LoadingInit::AgeContrast,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if !(self.lambda_lon >= 0.0 && self.lambda_lon.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_lon = {} must be non-negative",
                self.lambda_lon
            )));
        }
        Ok(())
    }
}

/// Per-datapoint loss components. `total` is the sum of the other four.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Negative expected log-likelihood of the cross-sectional batch.
    pub recon: f64,
    pub kl_r: f64,
    pub kl_b: f64,
    /// `λ_lon` times the pair loss; zero without paired data.
    pub lon: f64,
    /// Negative expected log-likelihood of the follow-up visits, per pair
    /// and unweighted (a part of the pair loss, reported for diagnostics).
    pub followup_nll: f64,
}

impl LossReport {
    pub fn component_sum(&self) -> f64 {
        self.recon + self.kl_r + self.kl_b + self.lon
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
}

/// Sum over entries of the log density of `N(x̂, σ² I)` at `x`.
pub fn gaussian_loglik(x: &Tensor, x_hat: &Tensor, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise scale {sigma} must be positive")));
    }
    if x.shape() != x_hat.shape() {
        return Err(Error::Domain(format!(
            "observation shape {:?} differs from prediction shape {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let norm = -0.5 * (2.0 * PI * sigma * sigma).ln();
    let inv = 1.0 / (2.0 * sigma * sigma);
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| norm - (a - b) * (a - b) * inv)
        .sum())
}

/// Closed-form `(KL(q(log r) || N(0, σ_r²)), KL(q(b) || N(0, I)))`, summed
/// over rows and dimensions.
pub fn kl_terms(post: &LatentPosterior, sigma_r: f64) -> (f64, f64) {
    let s2 = sigma_r * sigma_r;
    let two_log_s = 2.0 * sigma_r.ln();
    let kl_r = 0.5
        * post
            .mu_logr
            .data()
            .iter()
            .zip(post.logvar_logr.data())
            .map(|(m, lv)| lv.exp() / s2 + m * m / s2 - 1.0 - lv + two_log_s)
            .sum::<f64>();
    let kl_b = 0.5
        * post
            .mu_b
            .data()
            .iter()
            .zip(post.logvar_b.data())
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>();
    (kl_r, kl_b)
}

/// A cross-sectional minibatch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor,
    pub ages: &'a [f64],
}

/// Paired visits of the same individuals.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedData {
    pub x0: Tensor,
    pub ages0: Vec<f64>,
    pub x1: Tensor,
    pub ages1: Vec<f64>,
}

impl PairedData {
    pub fn len(&self) -> usize {
        self.ages0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages0.is_empty()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let n = self.len();
        if self.ages1.len() != n || self.x0.shape() != [n, d] || self.x1.shape() != [n, d] {
            return Err(Error::Domain(format!(
                "paired data is inconsistent: {n} baseline ages, {} follow-up ages, shapes {:?} and {:?}",
                self.ages1.len(),
                self.x0.shape(),
                self.x1.shape()
            )));
        }
        if let Some(i) = (0..n).find(|&i| !(self.ages1[i] > self.ages0[i])) {
            return Err(Error::Domain(format!(
                "pair {i}: follow-up age {} is not after baseline age {}",
                self.ages1[i], self.ages0[i]
            )));
        }
        Ok(())
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x0: self.x0.select_rows(rows)?,
            ages0: rows.iter().map(|&i| self.ages0[i]).collect(),
            x1: self.x1.select_rows(rows)?,
            ages1: rows.iter().map(|&i| self.ages1[i]).collect(),
        })
    }
}

/// Standard normal draws for the reparameterization, one pair of blocks per
/// Monte-Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub r: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(n: usize, config: &ModelConfig, samples: usize, rng: &mut R) -> Self {
        let mut r = Vec::with_capacity(samples);
        let mut b = Vec::with_capacity(samples);
        for _ in 0..samples {
            r.push(Tensor::randn(&[n, config.k_r], 1.0, rng));
            b.push(Tensor::randn(&[n, config.k_b], 1.0, rng));
        }
        Self { r, b }
    }

    pub fn zeros(n: usize, config: &ModelConfig) -> Self {
        Self {
            r: vec![Tensor::zeros(&[n, config.k_r])],
            b: vec![Tensor::zeros(&[n, config.k_b])],
        }
    }

    fn samples(&self) -> usize {
        self.r.len()
    }
}

fn time_column(ages: &[f64], config: &ModelConfig) -> Tensor {
    Tensor::column(&ages.iter().map(|a| a / config.t_scale).collect::<Vec<_>>())
}

fn loglik_graph<'t>(x: Var<'t>, x_hat: Var<'t>, log_sigma: Var<'t>) -> Result<Var<'t>> {
    let count = x.with_value(Tensor::len) as f64;
    let sq = x.sub(&x_hat)?.square()?.sum()?;
    let inv_var = log_sigma.scale(-2.0)?.exp()?;
    Ok(sq
        .mul_scalar(&inv_var)?
        .scale(-0.5)?
        .sub(&log_sigma.scale(count)?)?
        .offset(-0.5 * count * (2.0 * PI).ln())?)
}

fn kl_graph<'t>(post: &PosteriorVars<'t>, sigma_r: f64) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let s2 = sigma_r * sigma_r;
    let count = post.mu_logr.with_value(Tensor::len) as f64;
    let kl_r = post
        .logvar_logr
        .exp()?
        .add(&post.mu_logr.square()?)?
        .scale(1.0 / s2)?
        .sub(&post.logvar_logr)?
        .sum()?
        .offset(count * (2.0 * sigma_r.ln() - 1.0))?
        .scale(0.5)?;
    let kl_b = match (post.mu_b, post.logvar_b) {
        (Some(mu), Some(lv)) => {
            let count = mu.with_value(Tensor::len) as f64;
            Some(
                lv.exp()?
                    .add(&mu.square()?)?
                    .sub(&lv)?
                    .sum()?
                    .offset(-count)?
                    .scale(0.5)?,
            )
        }
        _ => None,
    };
    Ok((kl_r, kl_b))
}

fn first_non_finite(named: &[(&str, Var<'_>)]) -> Option<String> {
    named
        .iter()
        .find(|(_, v)| !v.with_value(Tensor::all_finite))
        .map(|(n, _)| n.to_string())
}

fn check_noise(noise: &Noise, n: usize, config: &ModelConfig) -> Result<()> {
    let ok = noise.samples() > 0
        && noise.b.len() == noise.samples()
        && noise.r.iter().all(|t| t.shape() == [n, config.k_r])
        && noise.b.iter().all(|t| t.shape() == [n, config.k_b]);
    if ok {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "noise blocks do not match a batch of {n} rows"
        )))
    }
}

fn check_batch(x: &Tensor, ages: &[f64], config: &ModelConfig) -> Result<usize> {
    let (n, d) = x.dims2("elbo")?;
    if d != config.d || ages.len() != n || n == 0 {
        return Err(Error::Domain(format!(
            "batch has shape {:?} with {} ages; model expects {} features",
            x.shape(),
            ages.len(),
            config.d
        )));
    }
    if let Some(a) = ages.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Domain(format!("age {a} is not positive")));
    }
    Ok(n)
}

/// Parts of a negative ELBO recorded on a tape, each summed over rows.
struct NegElbo<'t> {
    /// `-Σ E_q log p(x | r, b)` (averaged over samples)
    nll: Var<'t>,
    /// Same for the follow-up visits when present.
    followup_nll: Option<Var<'t>>,
    kl_r: Var<'t>,
    kl_b: Option<Var<'t>>,
}

fn neg_elbo_graph<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &ModelConfig,
    x: &Tensor,
    ages: &[f64],
    followup: Option<(&Tensor, &[f64])>,
    noise: &Noise,
) -> Result<NegElbo<'t>> {
    let xv = tape.constant(x.clone());
    let tv = tape.constant(time_column(ages, config));
    let post = encode_graph(params, config, xv, tv)?;
    let follow = followup.map(|(x1, a1)| (tape.constant(x1.clone()), tape.constant(time_column(a1, config))));
    let inv_samples = 1.0 / noise.samples() as f64;

    let mut nll: Option<Var<'t>> = None;
    let mut fnll: Option<Var<'t>> = None;
    let accumulate = |acc: Option<Var<'t>>, term: Var<'t>| -> Result<Option<Var<'t>>> {
        Ok(Some(match acc {
            Some(a) => a.add(&term)?,
            None => term,
        }))
    };
    for s in 0..noise.samples() {
        let nr = tape.constant(noise.r[s].clone());
        let nb = (config.k_b > 0).then(|| tape.constant(noise.b[s].clone()));
        let (r, b) = reparam_graph(&post, nr, nb)?;
        let x_hat = decode_full_graph(params, config, r, b, tv)?;
        let ll = loglik_graph(xv, x_hat, params.log_sigma_eps)?;
        if !ll.with_value(|v| v.item().is_finite()) {
            let mut named = vec![
                ("posterior mean of log r", post.mu_logr),
                ("posterior log-variance of log r", post.logvar_logr),
            ];
            if let (Some(m), Some(l)) = (post.mu_b, post.logvar_b) {
                named.push(("posterior mean of b", m));
                named.push(("posterior log-variance of b", l));
            }
            named.push(("sampled rates", r));
            named.push(("reconstruction", x_hat));
            named.push(("log sigma_eps", params.log_sigma_eps));
            let which = first_non_finite(&named).unwrap_or_else(|| "log-likelihood".into());
            return Err(Error::NonFinite(which));
        }
        nll = accumulate(nll, ll.scale(-inv_samples)?)?;
        if let Some((x1, t1)) = follow {
            let x1_hat = decode_full_graph(params, config, r, b, t1)?;
            let ll1 = loglik_graph(x1, x1_hat, params.log_sigma_eps)?;
            if !ll1.with_value(|v| v.item().is_finite()) {
                return Err(Error::NonFinite("follow-up reconstruction".into()));
            }
            fnll = accumulate(fnll, ll1.scale(-inv_samples)?)?;
        }
    }
    let (kl_r, kl_b) = kl_graph(&post, config.sigma_r)?;
    Ok(NegElbo {
        nll: nll.expect("at least one sample"),
        followup_nll: fnll,
        kl_r,
        kl_b,
    })
}

/// A scalar loss on a tape plus its numeric breakdown.
pub struct LossGraph<'t> {
    pub loss: Var<'t>,
    pub report: LossReport,
}

/// Records the joint loss on `tape`. Without `pairs` (or with
/// `lambda_lon == 0`) this is the cross-sectional loss and no paired terms
/// are recorded at all.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_graph<'t>(
    tape: &'t Tape,
    params: &BoundParams<'t>,
    config: &ModelConfig,
    cross: Batch<'_>,
    cross_noise: &Noise,
    pairs: Option<(&PairedData, &Noise)>,
    lambda_lon: f64,
) -> Result<LossGraph<'t>> {
    let n = check_batch(cross.x, cross.ages, config)?;
    check_noise(cross_noise, n, config)?;
    let inv_n = 1.0 / n as f64;
    let parts = neg_elbo_graph(tape, params, config, cross.x, cross.ages, None, cross_noise)?;
    let recon = parts.nll.scale(inv_n)?;
    let kl_r = parts.kl_r.scale(inv_n)?;
    let mut total = recon.add(&kl_r)?;
    let kl_b = match parts.kl_b {
        Some(k) => {
            let k = k.scale(inv_n)?;
            total = total.add(&k)?;
            Some(k)
        }
        None => None,
    };
    let mut report = LossReport {
        total: 0.0,
        recon: recon.value().item(),
        kl_r: kl_r.value().item(),
        kl_b: kl_b.map_or(0.0, |k| k.value().item()),
        lon: 0.0,
        followup_nll: 0.0,
    };

    if lambda_lon < 0.0 || !lambda_lon.is_finite() {
        return Err(Error::Config(format!(
            "lambda_lon = {lambda_lon} must be non-negative"
        )));
    }
    if let (Some((pd, pn)), true) = (pairs, lambda_lon > 0.0) {
        pd.validate(config.d)?;
        let m = pd.len();
        if m == 0 {
            return Err(Error::Domain("empty paired batch".into()));
        }
        check_noise(pn, m, config)?;
        let inv_m = 1.0 / m as f64;
        let lp = neg_elbo_graph(
            tape,
            params,
            config,
            &pd.x0,
            &pd.ages0,
            Some((&pd.x1, &pd.ages1)),
            pn,
        )?;
        let follow = lp.followup_nll.expect("follow-up requested").scale(inv_m)?;
        let mut pair = lp.nll.add(&lp.kl_r)?;
        if let Some(k) = lp.kl_b {
            pair = pair.add(&k)?;
        }
        let pair = pair.scale(inv_m)?.add(&follow)?;
        let weighted = pair.scale(lambda_lon)?;
        total = total.add(&weighted)?;
        report.lon = weighted.value().item();
        report.followup_nll = follow.value().item();
    }
    report.total = total.value().item();
    if !report.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossGraph { loss: total, report })
}

/// Cross-sectional loss `-ELBO / n` with the given noise.
pub fn elbo(model: &Model, batch: Batch<'_>, noise: &Noise) -> Result<LossReport> {
    joint_loss(model, batch, noise, None, 0.0)
}

/// Joint loss `cross + λ_lon · pair` with the given noise.
pub fn joint_loss(
    model: &Model,
    cross: Batch<'_>,
    cross_noise: &Noise,
    pairs: Option<(&PairedData, &Noise)>,
    lambda_lon: f64,
) -> Result<LossReport> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    Ok(joint_loss_graph(
        &tape,
        &bound,
        &model.config,
        cross,
        cross_noise,
        pairs,
        lambda_lon,
    )?
    .report)
}

/// Loss and gradients for every parameter, in the order of
/// [`ModelParams::named_tensors`].
pub fn loss_and_gradients(
    model: &Model,
    cross: Batch<'_>,
    cross_noise: &Noise,
    pairs: Option<(&PairedData, &Noise)>,
    lambda_lon: f64,
) -> Result<(LossReport, Vec<Tensor>)> {
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let graph = joint_loss_graph(
        &tape,
        &bound,
        &model.config,
        cross,
        cross_noise,
        pairs,
        lambda_lon,
    )?;
    let grads = graph.loss.backward()?;
    Ok((graph.report, bound.gradients(&grads)))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Index of the kept restart.
    pub selected: usize,
    /// Final-epoch loss of every restart.
    pub restart_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<LossReport> {
        self.history.last().map(|r| r.loss)
    }
}

fn mean_report(acc: &LossReport, count: usize) -> LossReport {
    let c = count.max(1) as f64;
    LossReport {
        total: acc.total / c,
        recon: acc.recon / c,
        kl_r: acc.kl_r / c,
        kl_b: acc.kl_b / c,
        lon: acc.lon / c,
        followup_nll: acc.followup_nll / c,
    }
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.total += r.total;
    acc.recon += r.recon;
    acc.kl_r += r.kl_r;
    acc.kl_b += r.kl_b;
    acc.lon += r.lon;
    acc.followup_nll += r.followup_nll;
}

/// Fits a fresh model, `restarts` times from different seeds.
pub fn train(
    x: &Tensor,
    ages: &[f64],
    pairs: Option<&PairedData>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    let mut best: Option<TrainOutcome> = None;
    let mut finals = Vec::with_capacity(train_config.restarts);
    for attempt in 0..train_config.restarts as u64 {
        let model = initial_model(x, ages, model_config, train_config, attempt)?;
        let tc = TrainConfig {
            seed: train_config.seed.wrapping_add(attempt),
            ..train_config.clone()
        };
        let outcome = train_from(model, x, ages, pairs, &tc)?;
        let last = outcome.final_loss().map_or(f64::INFINITY, |l| l.total);
        finals.push(last);
        if train_config.restarts > 1 {
            log::info!("restart {}: final loss {last:.5}", attempt + 1);
        }
        // Ties keep the earlier attempt.
        if best
            .as_ref()
            .is_none_or(|b| last < b.final_loss().map_or(f64::INFINITY, |l| l.total))
        {
            best = Some(TrainOutcome {
                selected: attempt as usize,
                ..outcome
            });
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_losses = finals;
    Ok(best)
}

/// Starting parameters of restart `attempt`: drawn from
/// `model_config.seed + attempt`, with the loading matrix optionally
/// replaced by the age-contrast estimate.
pub fn initial_model(
    x: &Tensor,
    ages: &[f64],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    attempt: u64,
) -> Result<Model> {
    let seed = model_config.seed.wrapping_add(attempt);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(model_config, &mut init_rng)?;
    if train_config.loading_init == LoadingInit::AgeContrast && model_config.d_mono > 0 {
        match age_contrast_loadings(x, ages, model_config.d_mono, model_config.k_r, seed) {
            Ok(a) => params.theta_a = loading_parameters(&a),
            Err(e) => log::warn!("keeping random loadings: {e}"),
        }
    }
    Model::new(model_config.clone(), params)
}

pub fn train_from(
    mut model: Model,
    x: &Tensor,
    ages: &[f64],
    pairs: Option<&PairedData>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let n = check_batch(x, ages, &model.config)?;
    if !x.all_finite() {
        return Err(Error::NonFinite("training features".into()));
    }
    let pairs = match pairs {
        Some(p) if tc.lambda_lon > 0.0 && !p.is_empty() => {
            p.validate(model.config.d)?;
            Some(p)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = {
        let shapes: Vec<Tensor> = model
            .params
            .named_tensors()
            .iter()
            .map(|(_, t)| (*t).clone())
            .collect();
        AdamState::new(
            AdamConfig::with_learning_rate(tc.learning_rate),
            &shapes.iter().collect::<Vec<_>>(),
        )
    };
    let names: Vec<String> = model.params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let batch_size = tc.batch_size.min(n);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut acc = LossReport::default();
        let mut batches = 0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let bx = x.select_rows(chunk)?;
            let bages: Vec<f64> = chunk.iter().map(|&i| ages[i]).collect();
            let noise = Noise::sample(chunk.len(), &model.config, tc.mc_samples, &mut rng);
            let paired = match pairs {
                Some(p) => {
                    let m = batch_size.min(p.len());
                    let rows: Vec<usize> = (0..m).map(|_| rng.random_range(0..p.len())).collect();
                    let sub = p.select(&rows)?;
                    let pn = Noise::sample(m, &model.config, tc.mc_samples, &mut rng);
                    Some((sub, pn))
                }
                None => None,
            };
            let diverged = |tensor: String, model: &Model| Error::Diverged {
                epoch,
                batch: bi,
                tensor,
                last_good: Box::new(model.params.clone()),
            };
            let step = loss_and_gradients(
                &model,
                Batch { x: &bx, ages: &bages },
                &noise,
                paired.as_ref().map(|(p, n)| (p, n)),
                tc.lambda_lon,
            );
            let (report, grads) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return Err(diverged(what, &model)),
                Err(e) => return Err(e),
            };
            if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
                return Err(diverged(format!("gradient of {}", names[i]), &model));
            }
            let before = model.params.clone();
            {
                let grad_refs: Vec<&Tensor> = grads.iter().collect();
                let mut params = model.params.tensors_mut();
                adam.step(&mut params, &grad_refs)?;
            }
            if let Some((name, _)) = model
                .params
                .named_tensors()
                .into_iter()
                .find(|(_, t)| !t.all_finite())
            {
                model.params = before;
                return Err(diverged(name, &model));
            }
            add_report(&mut acc, &report);
            batches += 1;
        }
        let loss = mean_report(&acc, batches);
        log::info!(
            "epoch {:>3}: loss {:.5} (recon {:.5}, kl_r {:.5}, kl_b {:.5}, lon {:.5})",
            epoch + 1,
            loss.total,
            loss.recon,
            loss.kl_r,
            loss.kl_b,
            loss.lon
        );
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss,
        });
    }
    let restart_losses = history.last().map(|r| r.loss.total).into_iter().collect();
    Ok(TrainOutcome {
        model,
        history,
        selected: 0,
        restart_losses,
    })
}

/// Writes `epoch,total,recon,kl_r,kl_b,lon` rows.
pub fn write_history_csv<W: Write>(history: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_err = |e: csv::Error| Error::Data(format!("writing loss history: {e}"));
    w.write_record(["epoch", "total", "recon", "kl_r", "kl_b", "lon"])
        .map_err(to_err)?;
    for rec in history {
        let l = rec.loss;
        w.write_record([
            rec.epoch.to_string(),
            l.total.to_string(),
            l.recon.to_string(),
            l.kl_r.to_string(),
            l.kl_b.to_string(),
            l.lon.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| Error::Data(format!("writing loss history: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;

    fn tiny_model(seed: u64) -> Model {
        let config = ModelConfig {
            encoder_layers: vec![6],
            decoder_layers: vec![5],
            ..ModelConfig::new(4, 3, 2, 2)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init(config, &mut rng).unwrap()
    }

    fn tiny_batch(n: usize, seed: u64) -> (Tensor, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[n, 4], 1.0, &mut rng);
        let ages = (0..n).map(|_| rng.random_range(40.0..70.0)).collect();
        (x, ages)
    }

    #[test]
    fn loglik_examples() {
        let a = Tensor::scalar(0.0);
        let ll = gaussian_loglik(&a, &a, 1.0).unwrap();
        assert!((ll + 0.918_938_533_204_672_7).abs() < 1e-15);
        let ll = gaussian_loglik(&Tensor::scalar(1.0), &a, 1.0).unwrap();
        assert!((ll + 1.418_938_533_204_672_7).abs() < 1e-15);
        assert!(gaussian_loglik(&a, &a, 0.0).is_err());
        assert!(gaussian_loglik(&a, &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn kl_at_prior_is_zero_and_plug_in_value() {
        let sr = 0.1f64;
        let post = LatentPosterior {
            mu_logr: Tensor::zeros(&[1, 1]),
            logvar_logr: Tensor::full(&[1, 1], 2.0 * sr.ln()),
            mu_b: Tensor::full(&[1, 1], 1.0),
            logvar_b: Tensor::zeros(&[1, 1]),
        };
        let (kl_r, kl_b) = kl_terms(&post, sr);
        assert!(kl_r.abs() < 1e-15, "{kl_r}");
        assert_eq!(kl_b, 0.5);
    }

    #[test]
    fn graph_loss_matches_value_level_formulas() {
        let model = tiny_model(1);
        let (x, ages) = tiny_batch(5, 2);
        let noise = Noise::zeros(5, &model.config);
        let report = elbo(&model, Batch { x: &x, ages: &ages }, &noise).unwrap();
        let post = model.encode(&x, &ages).unwrap();
        let (kl_r, kl_b) = kl_terms(&post, model.config.sigma_r);
        let x_hat = model
            .decode_full(&post.mu_logr.map(f64::exp), &post.mu_b, &ages)
            .unwrap();
        let ll = gaussian_loglik(&x, &x_hat, model.params.sigma_eps()).unwrap();
        assert!((report.recon + ll / 5.0).abs() < 1e-12);
        assert!((report.kl_r - kl_r / 5.0).abs() < 1e-12);
        assert!((report.kl_b - kl_b / 5.0).abs() < 1e-12);
        assert!((report.total - report.component_sum()).abs() < 1e-9);
    }

    #[test]
    fn fixed_noise_is_deterministic() {
        let model = tiny_model(3);
        let (x, ages) = tiny_batch(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Noise::sample(8, &model.config, 1, &mut rng);
        let a = elbo(&model, Batch { x: &x, ages: &ages }, &noise).unwrap();
        let b = elbo(&model, Batch { x: &x, ages: &ages }, &noise).unwrap();
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }

    #[test]
    fn zero_lambda_is_bit_identical() {
        let model = tiny_model(6);
        let (x, ages) = tiny_batch(6, 7);
        let (x1, _) = tiny_batch(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise = Noise::sample(6, &model.config, 1, &mut rng);
        let pn = Noise::sample(3, &model.config, 1, &mut rng);
        let pairs = PairedData {
            x0: x.select_rows(&[0, 1, 2]).unwrap(),
            ages0: ages[..3].to_vec(),
            x1,
            ages1: ages[..3].iter().map(|a| a + 4.0).collect(),
        };
        let cross = elbo(&model, Batch { x: &x, ages: &ages }, &noise).unwrap();
        let joint = joint_loss(
            &model,
            Batch { x: &x, ages: &ages },
            &noise,
            Some((&pairs, &pn)),
            0.0,
        )
        .unwrap();
        assert_eq!(cross.total.to_bits(), joint.total.to_bits());
        let weighted = joint_loss(
            &model,
            Batch { x: &x, ages: &ages },
            &noise,
            Some((&pairs, &pn)),
            1.0,
        )
        .unwrap();
        assert!(weighted.lon != 0.0);
        assert!((weighted.total - weighted.component_sum()).abs() < 1e-9);
    }

    #[test]
    fn follow_up_before_baseline_is_rejected() {
        let model = tiny_model(10);
        let (x, ages) = tiny_batch(2, 11);
        let noise = Noise::zeros(2, &model.config);
        let pairs = PairedData {
            x0: x.clone(),
            ages0: ages.clone(),
            x1: x.clone(),
            ages1: ages.clone(),
        };
        let res = joint_loss(
            &model,
            Batch { x: &x, ages: &ages },
            &noise,
            Some((&pairs, &noise)),
            1.0,
        );
        assert!(matches!(res, Err(Error::Domain(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = tiny_model(12);
        let (x, ages) = tiny_batch(4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let noise = Noise::sample(4, &model.config, 1, &mut rng);
        let batch = Batch { x: &x, ages: &ages };
        let (_, grads) = loss_and_gradients(&model, batch, &noise, None, 0.0).unwrap();
        let h = 1e-6;
        for (k, g) in grads.iter().enumerate() {
            for j in 0..g.len().min(3) {
                let mut plus = model.clone();
                plus.params.tensors_mut()[k].data_mut()[j] += h;
                let mut minus = model.clone();
                minus.params.tensors_mut()[k].data_mut()[j] -= h;
                let fp = elbo(&plus, batch, &noise).unwrap().total;
                let fm = elbo(&minus, batch, &noise).unwrap().total;
                let fd = (fp - fm) / (2.0 * h);
                let an = g.data()[j];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-4, "param {k}[{j}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let config = ModelConfig {
            encoder_layers: vec![8],
            decoder_layers: vec![8],
            ..ModelConfig::new(4, 3, 1, 1)
        };
        let (x, ages) = tiny_batch(64, 15);
        let tc = TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 5,
            ..TrainConfig::default()
        };
        let a = train(&x, &ages, None, &config, &tc).unwrap();
        let b = train(&x, &ages, None, &config, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.history[4].loss.total < a.history[0].loss.total);
    }

    #[test]
    fn divergence_returns_last_good_parameters() {
        let config = ModelConfig::new(3, 3, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        params.log_sigma_eps = Tensor::scalar(-800.0);
        let model = Model::new(config, params.clone()).unwrap();
        let (x, ages) = tiny_batch(4, 17);
        let x = x.slice_cols(0, 3).unwrap();
        let err = train_from(model, &x, &ages, None, &TrainConfig::default()).unwrap_err();
        match err {
            Error::Diverged {
                last_good,
                epoch,
                batch,
                ..
            } => {
                assert_eq!((epoch, batch), (0, 0));
                assert_eq!(*last_good, params);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let hist = vec![EpochRecord {
            epoch: 1,
            loss: LossReport {
                total: 1.5,
                recon: 1.0,
                kl_r: 0.25,
                kl_b: 0.25,
                ..LossReport::default()
            },
        }];
        let mut buf = Vec::new();
        write_history_csv(&hist, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "epoch,total,recon,kl_r,kl_b,lon\n1,1.5,1,0.25,0.25,0\n");
    }
}
