//! The latent progression model.
//!
//! Each individual has a positive rate vector `r` (length `k_r`) and a bias
//! vector `b` (length `k_b`). At scaled age `t` the mean observation is
//!
//! ```text
//! x̂ = [f(r t); f̃(r t)] + g(b)
//! ```
//!
//! where the first `d_mono` features go through the monotone decoder
//! `f = s ∘ a`: `u = (r t) Aᵀ` with `A >= 0`, then per feature
//! `s_i(u_i) = Σ_j w_ij u_i^{p_j}` with `w >= 0` and positive exponents.
//! `f̃` and `g` are unconstrained ReLU networks, and an amortized encoder maps
//! `(x, t)` to a diagonal Gaussian over `(log r, b)`.
//!
//! Feature columns are expected in monotone-first order; see
//! [`crate::data::Dataset::monotone_first`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{inverse_softplus, softplus_scalar, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The exponent set used by the elementwise transform.
pub const DEFAULT_EXPONENTS: [f64; 9] = [
    1.0 / 5.0,
    1.0 / 4.0,
    1.0 / 3.0,
    1.0 / 2.0,
    1.0,
    2.0,
    3.0,
    4.0,
    5.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Total number of features.
    pub d: usize,
    /// Leading features decoded through the monotone path.
    pub d_mono: usize,
    pub k_r: usize,
    pub k_b: usize,
    pub exponents: Vec<f64>,
    /// Prior standard deviation of `log r`.
    pub sigma_r: f64,
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    /// Ages are divided by this before entering the model.
    pub t_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 52,
            d_mono: 45,
            k_r: 5,
            k_b: 10,
            exponents: DEFAULT_EXPONENTS.to_vec(),
            sigma_r: 0.1,
            encoder_layers: vec![50, 20],
            decoder_layers: vec![20, 50],
            t_scale: 100.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(d: usize, d_mono: usize, k_r: usize, k_b: usize) -> Self {
        Self {
            d,
            d_mono,
            k_r,
            k_b,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d_mono > self.d {
            return fail(format!("d_mono = {} exceeds d = {}", self.d_mono, self.d));
        }
        if self.k_r == 0 {
            return fail("k_r must be at least 1".into());
        }
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.d_mono > 0 && self.exponents.is_empty() {
            return fail("exponent set is empty".into());
        }
        if let Some(p) = self.exponents.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return fail(format!("exponent {p} is not positive"));
        }
        if !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return fail(format!("sigma_r = {} must be positive", self.sigma_r));
        }
        if !(self.t_scale > 0.0 && self.t_scale.is_finite()) {
            return fail(format!("t_scale = {} must be positive", self.t_scale));
        }
        if self.encoder_layers.contains(&0) || self.decoder_layers.contains(&0) {
            return fail("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    /// Same configuration with the monotone constraint removed: every
    /// feature is decoded from `r t` by the unconstrained network.
    pub fn without_monotone(&self) -> Self {
        Self {
            d_mono: 0,
            ..self.clone()
        }
    }

    pub fn d_free(&self) -> usize {
        self.d - self.d_mono
    }

    fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.d + 1];
        s.extend(&self.encoder_layers);
        s.push(2 * (self.k_r + self.k_b));
        s
    }

    fn decoder_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.decoder_layers);
        s.push(output);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self { layers }
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::randn(&[w[0], w[1]], (2.0 / w[0].max(1) as f64).sqrt(), rng),
                bias: Tensor::zeros(&[1, w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[d_mono, k_r]`; `A = softplus(theta_a)`.
    pub theta_a: Tensor,
    /// `[d_mono, |S|]`; `w = softplus(theta_w)`.
    pub theta_w: Tensor,
    pub encoder: Mlp,
    /// `f̃`: `r t` to the non-monotone features. Absent when `d_mono == d`.
    pub nonmono: Option<Mlp>,
    /// `g`: `b` to all features. Absent when `k_b == 0`.
    pub bias_net: Option<Mlp>,
    /// Scalar `log σ_ε`.
    pub log_sigma_eps: Tensor,
}

impl ModelParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let ns = config.exponents.len();
        Self {
            theta_a: Tensor::zeros(&[config.d_mono, config.k_r]),
            theta_w: Tensor::zeros(&[config.d_mono, ns]),
            encoder: Mlp::zeros(&config.encoder_sizes()),
            nonmono: (config.d_free() > 0)
                .then(|| Mlp::zeros(&config.decoder_sizes(config.k_r, config.d_free()))),
            bias_net: (config.k_b > 0).then(|| Mlp::zeros(&config.decoder_sizes(config.k_b, config.d))),
            log_sigma_eps: Tensor::scalar(0.0),
        }
    }

    /// Random initialization. The encoder's log-variance outputs for
    /// `log r` start at the prior variance.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ns = config.exponents.len();
        let mut encoder = Mlp::init(&config.encoder_sizes(), rng);
        let last = encoder.layers.last_mut().expect("encoder has an output layer");
        for w in last.weight.data_mut() {
            *w *= 0.1;
        }
        let lv_r = 2.0 * config.sigma_r.ln();
        for j in config.k_r..2 * config.k_r {
            last.bias.set(0, j, lv_r);
        }
        // Unit weight on every exponent makes the initial transforms
        // steep enough for standardized features.
        let w0 = inverse_softplus(1.0);
        let mut theta_w = Tensor::randn(&[config.d_mono, ns], 0.1, rng);
        theta_w.data_mut().iter_mut().for_each(|v| *v += w0);
        Ok(Self {
            theta_a: Tensor::randn(&[config.d_mono, config.k_r], 0.5, rng),
            theta_w,
            encoder,
            nonmono: (config.d_free() > 0)
                .then(|| Mlp::init(&config.decoder_sizes(config.k_r, config.d_free()), rng)),
            bias_net: (config.k_b > 0).then(|| Mlp::init(&config.decoder_sizes(config.k_b, config.d), rng)),
            log_sigma_eps: Tensor::scalar(0.0),
        })
    }

    /// Non-negative loading matrix `A` (`[d_mono, k_r]`).
    pub fn loading_matrix(&self) -> Tensor {
        self.theta_a.map(softplus_scalar)
    }

    /// Non-negative exponent weights `w` (`[d_mono, |S|]`).
    pub fn exponent_weights(&self) -> Tensor {
        self.theta_w.map(softplus_scalar)
    }

    pub fn sigma_eps(&self) -> f64 {
        self.log_sigma_eps.item().exp()
    }

    /// Named tensors in a fixed canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("theta_a".to_string(), &self.theta_a),
            ("theta_w".to_string(), &self.theta_w),
        ];
        let mlps = std::iter::once(("encoder", &self.encoder))
            .chain(self.nonmono.as_ref().map(|m| ("nonmono", m)))
            .chain(self.bias_net.as_ref().map(|m| ("bias_net", m)));
        for (prefix, mlp) in mlps {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("log_sigma_eps".to_string(), &self.log_sigma_eps));
        out
    }

    /// Mutable tensors in the order of [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.theta_a, &mut self.theta_w];
        let mlps = std::iter::once(&mut self.encoder)
            .chain(self.nonmono.as_mut())
            .chain(self.bias_net.as_mut());
        for mlp in mlps {
            for l in &mut mlp.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.log_sigma_eps);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(config);
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (want_name, want_shape)), (name, tensor)) in
            params.tensors_mut().into_iter().zip(&expected).zip(tensors)
        {
            if &name != want_name {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} found where {want_name} was expected"
                )));
            }
            if tensor.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    want_shape
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let bind_mlp = |m: &Mlp| -> Vec<(Var<'t>, Var<'t>)> {
            m.layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect()
        };
        BoundParams {
            theta_a: tape.leaf(self.theta_a.clone()),
            theta_w: tape.leaf(self.theta_w.clone()),
            encoder: bind_mlp(&self.encoder),
            nonmono: self.nonmono.as_ref().map(bind_mlp),
            bias_net: self.bias_net.as_ref().map(bind_mlp),
            log_sigma_eps: tape.leaf(self.log_sigma_eps.clone()),
        }
    }
}

/// [`ModelParams`] recorded on a tape.
pub struct BoundParams<'t> {
    pub theta_a: Var<'t>,
    pub theta_w: Var<'t>,
    pub encoder: Vec<(Var<'t>, Var<'t>)>,
    pub nonmono: Option<Vec<(Var<'t>, Var<'t>)>>,
    pub bias_net: Option<Vec<(Var<'t>, Var<'t>)>>,
    pub log_sigma_eps: Var<'t>,
}

impl<'t> BoundParams<'t> {
    /// Vars in the order of [`ModelParams::named_tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.theta_a, self.theta_w];
        let mlps = std::iter::once(&self.encoder)
            .chain(self.nonmono.as_ref())
            .chain(self.bias_net.as_ref());
        for layers in mlps {
            for (w, b) in layers {
                out.push(*w);
                out.push(*b);
            }
        }
        out.push(self.log_sigma_eps);
        out
    }

    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars().iter().map(|v| grads.wrt(v)).collect()
    }
}

/// Applies a ReLU network; the final layer is linear.
pub fn mlp_forward<'t>(layers: &[(Var<'t>, Var<'t>)], input: Var<'t>) -> Result<Var<'t>> {
    let mut h = input;
    for (i, (w, b)) in layers.iter().enumerate() {
        h = h.matmul(w)?.add_row(b)?;
        if i + 1 < layers.len() {
            h = h.relu()?;
        }
    }
    Ok(h)
}

/// Diagonal Gaussian over `(log r, b)` for every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu_logr: Tensor,
    pub logvar_logr: Tensor,
    pub mu_b: Tensor,
    pub logvar_b: Tensor,
}

impl LatentPosterior {
    pub fn len(&self) -> usize {
        self.mu_logr.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point estimate of `r`: `exp(μ)` or, with `lognormal_mean`,
    /// `exp(μ + σ²/2)`.
    pub fn rate_estimate(&self, lognormal_mean: bool) -> Tensor {
        if lognormal_mean {
            self.mu_logr
                .zip_with(&self.logvar_logr, "rate_estimate", |m, lv| {
                    (m + 0.5 * lv.exp()).exp()
                })
                .expect("posterior blocks share a shape")
        } else {
            self.mu_logr.map(f64::exp)
        }
    }
}

/// Posterior parameters as vars on a tape.
pub struct PosteriorVars<'t> {
    pub mu_logr: Var<'t>,
    pub logvar_logr: Var<'t>,
    pub mu_b: Option<Var<'t>>,
    pub logvar_b: Option<Var<'t>>,
}

impl PosteriorVars<'_> {
    pub fn values(&self, n: usize, k_b: usize) -> LatentPosterior {
        let empty = || Tensor::zeros(&[n, k_b]);
        LatentPosterior {
            mu_logr: self.mu_logr.value(),
            logvar_logr: self.logvar_logr.value(),
            mu_b: self.mu_b.map_or_else(empty, |v| v.value()),
            logvar_b: self.logvar_b.map_or_else(empty, |v| v.value()),
        }
    }
}

/// Encoder graph: `[x, t]` through the ReLU network, split into means and
/// log-variances.
pub fn encode_graph<'t>(
    params: &BoundParams<'t>,
    config: &ModelConfig,
    x: Var<'t>,
    t: Var<'t>,
) -> Result<PosteriorVars<'t>> {
    let input = Var::concat_cols(&[x, t])?;
    let out = mlp_forward(&params.encoder, input)?;
    let (kr, kb) = (config.k_r, config.k_b);
    let mu_logr = out.slice_cols(0, kr)?;
    let logvar_logr = out.slice_cols(kr, 2 * kr)?;
    let (mu_b, logvar_b) = if kb > 0 {
        (
            Some(out.slice_cols(2 * kr, 2 * kr + kb)?),
            Some(out.slice_cols(2 * kr + kb, 2 * (kr + kb))?),
        )
    } else {
        (None, None)
    };
    Ok(PosteriorVars {
        mu_logr,
        logvar_logr,
        mu_b,
        logvar_b,
    })
}

/// Monotone decoder graph on latent positions `z = r t`.
/// Returns `None` when there are no monotone features.
pub fn decode_monotone_graph<'t>(
    params: &BoundParams<'t>,
    config: &ModelConfig,
    z: Var<'t>,
) -> Result<Option<Var<'t>>> {
    if config.d_mono == 0 {
        return Ok(None);
    }
    let a = params.theta_a.softplus()?;
    let u = z.matmul(&a.transpose()?)?;
    let w = params.theta_w.softplus()?;
    let mut out: Option<Var<'t>> = None;
    for (j, &p) in config.exponents.iter().enumerate() {
        let wj = w.slice_cols(j, j + 1)?.transpose()?;
        let term = u.pow(p)?.mul_row(&wj)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(out)
}

/// Mean observation `[f(rt); f̃(rt)] + g(b)`.
pub fn decode_full_graph<'t>(
    params: &BoundParams<'t>,
    config: &ModelConfig,
    r: Var<'t>,
    b: Option<Var<'t>>,
    t: Var<'t>,
) -> Result<Var<'t>> {
    let z = r.mul_col(&t)?;
    let mono = decode_monotone_graph(params, config, z)?;
    let free = match &params.nonmono {
        Some(layers) => Some(mlp_forward(layers, z)?),
        None => None,
    };
    let time_part = match (mono, free) {
        (Some(m), Some(f)) => Var::concat_cols(&[m, f])?,
        (Some(m), None) => m,
        (None, Some(f)) => f,
        (None, None) => unreachable!("validated config has d >= 1"),
    };
    match (&params.bias_net, b) {
        (Some(layers), Some(b)) => Ok(time_part.add(&mlp_forward(layers, b)?)?),
        _ => Ok(time_part),
    }
}

/// Reparameterized draw: `log r = μ + e^{lv/2} ε_r`, `r = exp(log r)`,
/// `b = μ_b + e^{lv_b/2} ε_b`.
pub fn reparam_graph<'t>(
    post: &PosteriorVars<'t>,
    noise_r: Var<'t>,
    noise_b: Option<Var<'t>>,
) -> Result<(Var<'t>, Option<Var<'t>>)> {
    let logr = post
        .mu_logr
        .add(&post.logvar_logr.scale(0.5)?.exp()?.mul(&noise_r)?)?;
    let r = logr.exp()?;
    let b = match (post.mu_b, post.logvar_b, noise_b) {
        (Some(mu), Some(lv), Some(eps)) => Some(mu.add(&lv.scale(0.5)?.exp()?.mul(&eps)?)?),
        _ => None,
    };
    Ok((r, b))
}

/// A configuration paired with its parameters, with value-level entry
/// points. Methods take ages in years and divide by `t_scale` internally.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let expected = ModelParams::zeros(&config);
        let shapes_match = expected
            .named_tensors()
            .iter()
            .zip(params.named_tensors())
            .all(|((n1, t1), (n2, t2))| *n1 == n2 && t1.shape() == t2.shape())
            && expected.named_tensors().len() == params.named_tensors().len();
        if !shapes_match {
            return Err(Error::Config(
                "parameter shapes do not match the model configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn scaled_times(&self, ages: &[f64]) -> Tensor {
        Tensor::column(&ages.iter().map(|a| a / self.config.t_scale).collect::<Vec<_>>())
    }

    fn check_batch(&self, x: &Tensor, ages: &[f64]) -> Result<()> {
        let (n, d) = x.dims2("encode")?;
        if d != self.config.d {
            return Err(Error::Domain(format!(
                "feature matrix has {d} columns, model expects {}",
                self.config.d
            )));
        }
        if ages.len() != n {
            return Err(Error::Domain(format!("{} ages for {n} rows", ages.len())));
        }
        check_finite("features", x)?;
        if let Some(a) = ages.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Domain(format!("age {a} is not positive and finite")));
        }
        Ok(())
    }

    /// Posterior over `(log r, b)` for each row of `x`.
    pub fn encode(&self, x: &Tensor, ages: &[f64]) -> Result<LatentPosterior> {
        self.check_batch(x, ages)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let xv = tape.constant(x.clone());
        let tv = tape.constant(self.scaled_times(ages));
        let post = encode_graph(&p, &self.config, xv, tv)?;
        Ok(post.values(x.rows(), self.config.k_b))
    }

    fn check_rates(&self, r: &Tensor, ages: &[f64]) -> Result<()> {
        let (n, k) = r.dims2("decode")?;
        if k != self.config.k_r || ages.len() != n {
            return Err(Error::Domain(format!(
                "rates have shape {:?} with {} ages; model has k_r = {}",
                r.shape(),
                ages.len(),
                self.config.k_r
            )));
        }
        if let Some(v) = r.data().iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("rate {v} is not positive")));
        }
        if let Some(a) = ages.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Domain(format!("age {a} is not positive")));
        }
        Ok(())
    }

    /// Monotone features `f(r t)` (`[n, d_mono]`).
    pub fn decode_monotone(&self, r: &Tensor, ages: &[f64]) -> Result<Tensor> {
        self.check_rates(r, ages)?;
        let n = r.rows();
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let z = tape
            .constant(r.clone())
            .mul_col(&tape.constant(self.scaled_times(ages)))?;
        Ok(decode_monotone_graph(&p, &self.config, z)?.map_or_else(|| Tensor::zeros(&[n, 0]), |v| v.value()))
    }

    /// Mean observation for given latents (no noise).
    pub fn decode_full(&self, r: &Tensor, b: &Tensor, ages: &[f64]) -> Result<Tensor> {
        self.check_rates(r, ages)?;
        let (bn, bk) = b.dims2("decode_full")?;
        if bn != r.rows() || bk != self.config.k_b {
            return Err(Error::Domain(format!(
                "bias block has shape {:?}, expected [{}, {}]",
                b.shape(),
                r.rows(),
                self.config.k_b
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let rv = tape.constant(r.clone());
        let bv = (self.config.k_b > 0).then(|| tape.constant(b.clone()));
        let tv = tape.constant(self.scaled_times(ages));
        Ok(decode_full_graph(&p, &self.config, rv, bv, tv)?.value())
    }

    /// Reparameterized latent draw from `post` with the given standard
    /// normal noise.
    pub fn reparam_sample(
        &self,
        post: &LatentPosterior,
        noise_r: &Tensor,
        noise_b: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        if noise_r.shape() != post.mu_logr.shape() || noise_b.shape() != post.mu_b.shape() {
            return Err(Error::Domain("noise shapes do not match the posterior".into()));
        }
        let mut rates = post.mu_logr.clone();
        for ((v, lv), e) in rates
            .data_mut()
            .iter_mut()
            .zip(post.logvar_logr.data())
            .zip(noise_r.data())
        {
            *v = (*v + (0.5 * lv).exp() * e).exp();
        }
        let mut b = post.mu_b.clone();
        for ((v, lv), e) in b
            .data_mut()
            .iter_mut()
            .zip(post.logvar_b.data())
            .zip(noise_b.data())
        {
            *v += (0.5 * lv).exp() * e;
        }
        Ok((rates, b))
    }

    /// Posterior point estimates `(r̂, b̂)` used for reconstruction and
    /// extrapolation.
    pub fn point_latents(&self, x: &Tensor, ages: &[f64], lognormal_mean: bool) -> Result<(Tensor, Tensor)> {
        let post = self.encode(x, ages)?;
        Ok((post.rate_estimate(lognormal_mean), post.mu_b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model(k: usize) -> Model {
        // A = I and unit weight on the exponent 1: f(rt) = rt.
        let config = ModelConfig {
            exponents: vec![0.5, 1.0, 2.0],
            ..ModelConfig::new(k, k, k, 0)
        };
        let mut params = ModelParams::zeros(&config);
        let off = -1000.0;
        for i in 0..k {
            for j in 0..k {
                params
                    .theta_a
                    .set(i, j, if i == j { inverse_softplus(1.0) } else { off });
            }
            params.theta_w.set(i, 0, off);
            params.theta_w.set(i, 1, inverse_softplus(1.0));
            params.theta_w.set(i, 2, off);
        }
        Model::new(config, params).unwrap()
    }

    #[test]
    fn identity_configuration_decodes_rt() {
        let model = identity_model(3);
        let r = Tensor::from_rows(&[vec![1.0, 0.9, 1.2], vec![0.5, 2.0, 1.1]]).unwrap();
        let ages = [50.0, 65.0];
        let out = model.decode_monotone(&r, &ages).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let want = r.get(i, j) * ages[i] / 100.0;
                assert!(
                    (out.get(i, j) - want).abs() < 1e-15,
                    "{} vs {want}",
                    out.get(i, j)
                );
            }
        }
    }

    #[test]
    fn single_power_by_hand() {
        // A = [[2]], w on exponent 2, r = 0.5, t = 1 -> u = 1, output 1.
        let config = ModelConfig {
            exponents: vec![2.0],
            t_scale: 1.0,
            ..ModelConfig::new(1, 1, 1, 0)
        };
        let mut params = ModelParams::zeros(&config);
        params.theta_a.set(0, 0, inverse_softplus(2.0));
        params.theta_w.set(0, 0, inverse_softplus(1.0));
        let model = Model::new(config, params).unwrap();
        let out = model
            .decode_monotone(&Tensor::matrix(1, 1, vec![0.5]).unwrap(), &[1.0])
            .unwrap();
        assert!((out.item() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let config = ModelConfig::new(4, 3, 2, 2);
        let model = Model::new(config.clone(), ModelParams::zeros(&config)).unwrap();
        let x = Tensor::full(&[3, 4], 0.7);
        let post = model.encode(&x, &[40.0, 50.0, 60.0]).unwrap();
        for t in [&post.mu_logr, &post.logvar_logr, &post.mu_b, &post.logvar_b] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoder_output_shapes() {
        let config = ModelConfig::new(8, 6, 5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::init(config, &mut rng).unwrap();
        let x = Tensor::randn(&[7, 8], 1.0, &mut rng);
        let post = model.encode(&x, &[45.0; 7]).unwrap();
        assert_eq!(post.mu_logr.shape(), &[7, 5]);
        assert_eq!(post.logvar_logr.shape(), &[7, 5]);
        assert_eq!(post.mu_b.shape(), &[7, 10]);
        assert_eq!(post.logvar_b.shape(), &[7, 10]);
    }

    #[test]
    fn decode_full_shape_and_degenerate_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let config = ModelConfig::new(52, 45, 5, 10);
        let model = Model::init(config, &mut rng).unwrap();
        let b = Tensor::randn(&[3, 10], 1.0, &mut rng);
        let r = Tensor::full(&[3, 5], 1.0);
        let out = model.decode_full(&r, &b, &[40.0, 50.0, 60.0]).unwrap();
        assert_eq!(out.shape(), &[3, 52]);

        let config = ModelConfig::new(6, 6, 2, 0);
        let model = Model::init(config, &mut rng).unwrap();
        let r = Tensor::from_rows(&[vec![0.9, 1.1], vec![1.3, 0.7]]).unwrap();
        let ages = [42.0, 68.0];
        let full = model.decode_full(&r, &Tensor::zeros(&[2, 0]), &ages).unwrap();
        assert_eq!(full, model.decode_monotone(&r, &ages).unwrap());
    }

    #[test]
    fn nonpositive_rates_and_ages_rejected() {
        let model = identity_model(2);
        let r = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(model.decode_monotone(&r, &[50.0]).is_err());
        let r = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(model.decode_monotone(&r, &[0.0]).is_err());
        assert!(model.decode_monotone(&r, &[-3.0]).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let config = ModelConfig::new(3, 3, 1, 1);
        let model = Model::new(config.clone(), ModelParams::zeros(&config)).unwrap();
        let x = Tensor::from_rows(&[vec![0.0, f64::NAN, 1.0]]).unwrap();
        assert!(matches!(model.encode(&x, &[50.0]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_noise_reparam_is_posterior_mean_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = LatentPosterior {
            mu_logr: Tensor::randn(&[4, 2], 0.1, &mut rng),
            logvar_logr: Tensor::randn(&[4, 2], 1.0, &mut rng),
            mu_b: Tensor::randn(&[4, 3], 1.0, &mut rng),
            logvar_b: Tensor::randn(&[4, 3], 1.0, &mut rng),
        };
        let config = ModelConfig::new(2, 2, 2, 3);
        let model = Model::new(config.clone(), ModelParams::zeros(&config)).unwrap();
        let (r, b) = model
            .reparam_sample(&post, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 3]))
            .unwrap();
        assert_eq!(r, post.mu_logr.map(f64::exp));
        assert_eq!(b, post.mu_b);
    }

    #[test]
    fn from_named_round_trip_and_shape_check() {
        let config = ModelConfig::new(5, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&config, &mut rng).unwrap();
        let named: Vec<(String, Tensor)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(ModelParams::from_named(&config, named.clone()).unwrap(), params);
        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[2, 2]);
        assert!(ModelParams::from_named(&config, bad).is_err());
    }

    #[test]
    fn without_monotone_routes_everything_through_the_free_decoder() {
        let config = ModelConfig::new(6, 4, 2, 1).without_monotone();
        let params = ModelParams::zeros(&config);
        assert_eq!(params.theta_a.shape(), &[0, 2]);
        assert_eq!(params.nonmono.as_ref().unwrap().output_dim(), 6);
    }
}
