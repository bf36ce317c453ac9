//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=2,5` runs a subset.
//!
//! The training-based criteria (2, 4, 5, 6, 7) take about half an hour on
//! one core.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use multirate::autodiff::Tape;
use multirate::baselines::{age_covariance, cpca, mcpca, pca, CPCA_DEFAULT_ALPHA};
use multirate::data::{
    load_checkpoint, read_checkpoint, save_checkpoint, standardize_and_orient, write_checkpoint, write_csv,
    Checkpoint, Dataset,
};
use multirate::elbo::{
    joint_loss, kl_terms, loss_and_gradients, train, Batch, Noise, PairedData, TrainConfig,
};
use multirate::eval::{age_trend, crosssectional_ffwd_eval, longitudinal_benchmark, recovery_score, rho_r};
use multirate::iso::{
    check_approx, check_exact, energy_permutation_test, is_nonnegative_monomial, make_confounding_map,
    order_isomorphism_oracle, DomainBox,
};
use multirate::linalg::{dot, inverse, norm, sym_eig};
use multirate::model::{LatentPosterior, Model, ModelConfig};
use multirate::pipeline::{recover, RecoverConfig, RecoverOutcome};
use multirate::synth::{generate, make_reference_params, GenerateOptions};
use multirate::tensor::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    only: Option<BTreeSet<usize>>,
    results: Vec<(usize, bool)>,
}

impl Suite {
    fn wants(&self, id: usize) -> bool {
        self.only.as_ref().is_none_or(|s| s.contains(&id))
    }

    fn run(&mut self, id: usize, name: &str, f: impl FnOnce() -> Outcome) {
        if !self.wants(id) {
            return;
        }
        let start = Instant::now();
        let o = f();
        println!(
            "{} [{id:>2}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        self.results.push((id, o.pass));
    }
}

// ---------------------------------------------------------------- 1

/// Finite differences with the relative error used throughout:
/// `|fd − analytic| / max(|fd|, |analytic|, 1e-3)`.
const FD_STEP: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(FD_FLOOR)
}

/// Maximum relative error of the gradient of `Σ W ∘ op(inputs)` over every
/// input entry.
fn check_op(
    inputs: &[Tensor],
    op: &dyn for<'t> Fn(&[multirate::autodiff::Var<'t>]) -> multirate::autodiff::Var<'t>,
    seed: u64,
) -> f64 {
    let weights = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&vars).value();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Tensor::randn(out.shape(), 1.0, &mut rng)
    };
    let value = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = op(&vars).value();
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&vars);
    let loss = out.mul(&tape.constant(weights.clone())).unwrap().sum().unwrap();
    let grads = loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(v);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fd = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, g.data()[j]));
        }
    }
    worst
}

/// Entries bounded away from zero: uniform magnitude on `[lo, hi]`, random sign
/// unless `positive`.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, positive: bool, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if positive || rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type OpFn = Box<dyn for<'t> Fn(&[multirate::autodiff::Var<'t>]) -> multirate::autodiff::Var<'t>>;

fn primitive_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..5);
    let m = rng.random_range(1..5);
    let p = rng.random_range(1..5);
    let mut g = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = g(&[n, m]);
    let b = g(&[n, m]);
    let c = g(&[m, p]);
    let row = g(&[1, m]);
    let col = g(&[n, 1]);
    let s = g(&[1, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let pos = away_from_zero(&[n, m], 0.5, 2.0, true, &mut rng);
    let denom = away_from_zero(&[n, m], 0.5, 2.0, false, &mut rng);
    let kinked = away_from_zero(&[n, m], 0.05, 2.0, false, &mut rng);
    let split = rng.random_range(0..=m);
    let c1 = rng.random_range(-2.0..2.0);
    let exps = [0.2, 0.25, 1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
    let ex = exps[rng.random_range(0..exps.len())];
    vec![
        (
            "matmul",
            vec![a.clone(), c],
            Box::new(|v| v[0].matmul(&v[1]).unwrap()),
        ),
        (
            "add",
            vec![a.clone(), b.clone()],
            Box::new(|v| v[0].add(&v[1]).unwrap()),
        ),
        (
            "sub",
            vec![a.clone(), b.clone()],
            Box::new(|v| v[0].sub(&v[1]).unwrap()),
        ),
        (
            "mul",
            vec![a.clone(), b.clone()],
            Box::new(|v| v[0].mul(&v[1]).unwrap()),
        ),
        (
            "div",
            vec![a.clone(), denom],
            Box::new(|v| v[0].div(&v[1]).unwrap()),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|v| v[0].add_row(&v[1]).unwrap()),
        ),
        (
            "mul_row",
            vec![a.clone(), row],
            Box::new(|v| v[0].mul_row(&v[1]).unwrap()),
        ),
        (
            "mul_col",
            vec![a.clone(), col],
            Box::new(|v| v[0].mul_col(&v[1]).unwrap()),
        ),
        (
            "mul_scalar",
            vec![a.clone(), s],
            Box::new(|v| v[0].mul_scalar(&v[1]).unwrap()),
        ),
        ("pow", vec![pos.clone()], Box::new(move |v| v[0].pow(ex).unwrap())),
        ("exp", vec![a.clone()], Box::new(|v| v[0].exp().unwrap())),
        ("log", vec![pos.clone()], Box::new(|v| v[0].log().unwrap())),
        (
            "softplus",
            vec![a.clone()],
            Box::new(|v| v[0].softplus().unwrap()),
        ),
        ("relu", vec![kinked], Box::new(|v| v[0].relu().unwrap())),
        (
            "scale",
            vec![a.clone()],
            Box::new(move |v| v[0].scale(c1).unwrap()),
        ),
        (
            "offset",
            vec![a.clone()],
            Box::new(move |v| v[0].offset(c1).unwrap()),
        ),
        ("square", vec![a.clone()], Box::new(|v| v[0].square().unwrap())),
        ("sum", vec![a.clone()], Box::new(|v| v[0].sum().unwrap())),
        ("mean", vec![a.clone()], Box::new(|v| v[0].mean().unwrap())),
        (
            "transpose",
            vec![a.clone()],
            Box::new(|v| v[0].transpose().unwrap()),
        ),
        (
            "slice_cols",
            vec![a.clone()],
            Box::new(move |v| v[0].slice_cols(0, split).unwrap()),
        ),
        (
            "concat_cols",
            vec![a.clone(), b],
            Box::new(|v| multirate::autodiff::Var::concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "fan_out",
            vec![a],
            Box::new(|v| v[0].mul(&v[0]).unwrap().add(&v[0].exp().unwrap()).unwrap()),
        ),
    ]
}

fn random_tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_mono = rng.random_range(1..4);
    let d = d_mono + rng.random_range(0..3);
    let config = ModelConfig {
        encoder_layers: vec![rng.random_range(2..6)],
        decoder_layers: vec![rng.random_range(2..6)],
        seed,
        ..ModelConfig::new(d, d_mono, rng.random_range(1..3), rng.random_range(0..3))
    };
    Model::init(config, &mut rng).unwrap()
}

fn elbo_gradient_error(seed: u64) -> f64 {
    let model = random_tiny_model(seed);
    let d = model.config.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let n = 3;
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let ages: Vec<f64> = (0..n).map(|_| rng.random_range(40.0..70.0)).collect();
    let pairs = PairedData {
        x0: Tensor::randn(&[2, d], 1.0, &mut rng),
        ages0: vec![45.0, 58.0],
        x1: Tensor::randn(&[2, d], 1.0, &mut rng),
        ages1: vec![49.0, 63.0],
    };
    let noise = Noise::sample(n, &model.config, 2, &mut rng);
    let pair_noise = Noise::sample(2, &model.config, 2, &mut rng);
    let lambda = 0.7;
    let batch = Batch { x: &x, ages: &ages };
    let (_, grads) = loss_and_gradients(&model, batch, &noise, Some((&pairs, &pair_noise)), lambda).unwrap();
    let loss = |m: &Model| {
        joint_loss(m, batch, &noise, Some((&pairs, &pair_noise)), lambda)
            .unwrap()
            .total
    };
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let mut plus = model.clone();
            plus.params.tensors_mut()[k].data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params.tensors_mut()[k].data_mut()[j] -= FD_STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(fd, g.data()[j]));
        }
    }
    worst
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let seeds = 100u64;
    let mut worst_op = ("", 0.0f64);
    let mut ops = 0;
    for seed in 0..seeds {
        for (name, inputs, op) in primitive_cases(seed) {
            let e = check_op(&inputs, op.as_ref(), seed);
            ops += 1;
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
    }
    let worst_elbo = (0..seeds).map(elbo_gradient_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op.1 < GRAD_TOL && worst_elbo < GRAD_TOL && secs < 60.0;
    outcome(
        pass,
        format!(
            "{ops} primitive checks over {seeds} seeds, worst {:.2e} ({}); full loss worst {worst_elbo:.2e}; tol {GRAD_TOL:.0e}; {secs:.1}s of 60s",
            worst_op.1, worst_op.0
        ),
    )
}

// ---------------------------------------------------------------- 3

fn linear_map(a: &Tensor) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |u: &[f64]| {
        (0..a.rows())
            .map(|i| (0..a.cols()).map(|j| a.get(i, j) * u[j]).sum())
            .collect()
    }
}

fn hand_cases() -> Vec<Tensor> {
    let m =
        |rows: &[&[f64]]| Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
    vec![
        m(&[&[1.0]]),
        m(&[&[0.0]]),
        m(&[&[1.0, 0.0], &[0.0, 1.0]]),
        m(&[&[0.0, 2.0], &[3.0, 0.0]]),
        m(&[&[1.0, 1.0], &[1.0, 2.0]]),
        m(&[&[1.0, 0.0], &[0.0, 1.0], &[5.0, 7.0]]),
        m(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]]),
        m(&[&[1.0, 0.0], &[0.0, 0.0]]),
        m(&[&[1.0, 1e-12], &[1e-12, 1.0]]),
        m(&[&[1.0, 1e-3], &[1e-3, 1.0]]),
        m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]),
        m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 1.0, 1.0]]),
        m(&[
            &[2.0, 3.0, 0.0],
            &[0.0, 0.0, 4.0],
            &[0.0, 5.0, 0.0],
            &[1.0, 1.0, 1.0],
        ]),
        m(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]),
        m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]),
        m(&[&[1.0], &[0.0], &[2.0]]),
        m(&[&[0.0, 1.0], &[0.0, 2.0], &[0.0, 3.0]]),
        m(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]),
        m(&[
            &[0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[0.0, 0.0, 0.0],
            &[2.0, 2.0, 2.0],
            &[0.0, 9.0, 1.0],
        ]),
        m(&[
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
            &[1.0, 0.0, 1.0],
            &[0.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0],
            &[0.5, 0.5, 2.0],
        ]),
    ]
}

fn random_battery(count: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    (0..count)
        .map(|i| {
            let k = rng.random_range(1..=3);
            let d = rng.random_range(1..=6);
            let density = rng.random_range(0.2..1.0);
            let mut a = Tensor::zeros(&[d, k]);
            for r in 0..d {
                for c in 0..k {
                    if rng.random_bool(density) {
                        a.set(r, c, rng.random_range(0.01..5.0));
                    }
                }
            }
            // Every other matrix gets a planted private row per column.
            if i % 2 == 0 && d >= k {
                let mut rows: Vec<usize> = (0..d).collect();
                for j in 0..k {
                    let pick = rng.random_range(j..d);
                    rows.swap(j, pick);
                    for c in 0..k {
                        a.set(rows[j], c, if c == j { rng.random_range(0.1..5.0) } else { 0.0 });
                    }
                }
            }
            a
        })
        .collect()
}

fn criterion_iso() -> Outcome {
    let mut cases = random_battery(200);
    cases.extend(hand_cases());
    let (mut disagree, mut exact) = (0, 0);
    for (i, a) in cases.iter().enumerate() {
        let report = check_exact(a).unwrap();
        let bx = DomainBox::cube(a.cols(), 0.0, 1.0).unwrap();
        let oracle = order_isomorphism_oracle(linear_map(a), &bx, 10_000, i as u64).passed();
        exact += usize::from(report.exact_pass);
        if oracle != report.exact_pass {
            disagree += 1;
            eprintln!(
                "  disagreement on case {i}: checker {} oracle {oracle}",
                report.exact_pass
            );
        }
    }
    // Lemma: a non-negative matrix with a non-negative inverse is monomial,
    // and monomial matrices have monomial inverses.
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_inv = 0.0f64;
    let mut monomial_ok = true;
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut b = Tensor::zeros(&[k, k]);
        for i in 0..k {
            b.set(i, perm[i], rng.random_range(0.1..10.0));
        }
        let inv = inverse(&b).unwrap();
        monomial_ok &= is_nonnegative_monomial(&inv, 1e-10);
        let prod = b.matmul(&inv).unwrap();
        for i in 0..k {
            for j in 0..k {
                worst_inv = worst_inv.max((prod.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs());
            }
            // B⁻¹ entries are the reciprocals at the transposed positions.
            worst_inv = worst_inv.max((inv.get(perm[i], i) - 1.0 / b.get(i, perm[i])).abs());
        }
    }
    let mut converse_ok = true;
    for _ in 0..100 {
        let k = rng.random_range(2..=6);
        let mut b = Tensor::zeros(&[k, k]);
        for i in 0..k {
            b.set(i, i, rng.random_range(0.5..2.0));
        }
        let (i, j) = (rng.random_range(0..k), rng.random_range(0..k - 1));
        let j = if j >= i { j + 1 } else { j };
        b.set(i, j, rng.random_range(0.1..1.0));
        let inv = inverse(&b).unwrap();
        converse_ok &= inv.data().iter().any(|v| *v < -1e-12);
    }
    let pass = disagree == 0 && worst_inv < 1e-10 && monomial_ok && converse_ok;
    outcome(
        pass,
        format!(
            "{} matrices ({exact} exact), {disagree} disagreements with the 10^4-pair oracle; monomial inverses {} (max residual {worst_inv:.1e}); non-monomial inverses negative {}",
            cases.len(),
            if monomial_ok { "monomial" } else { "NOT monomial" },
            converse_ok
        ),
    )
}

// ---------------------------------------------------------------- 8

fn mixed_gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = Tensor::randn(&[d, d], 1.0, &mut rng);
    Tensor::randn(&[n, d], 1.0, &mut rng).matmul(&mix).unwrap()
}

fn sign_aligned_diff(a: &[f64], b: &[f64]) -> f64 {
    let s = if dot(a, b) < 0.0 { -1.0 } else { 1.0 };
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - s * y).abs())
        .fold(0.0, f64::max)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

fn criterion_baselines() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut pca_gap, mut age_gap) = (0.0f64, 0.0f64);
    for trial in 0..20u64 {
        let d = rng.random_range(2..9);
        let k = rng.random_range(1..=d);
        let x = mixed_gaussian(300, d, 100 + trial);
        let bg = mixed_gaussian(150, d, 200 + trial);
        let ages: Vec<f64> = (0..300)
            .map(|i| 55.0 + 3.0 * x.get(i, 0) + rng.random_range(-5.0..5.0))
            .collect();
        let p = pca(&x, k).unwrap();
        let c = cpca(&x, &bg, 0.0, k).unwrap();
        let m = mcpca(&x, &ages, 0.0, k).unwrap();
        for j in 0..k {
            pca_gap = pca_gap.max(sign_aligned_diff(p.component(j), c.component(j)));
            pca_gap = pca_gap.max(sign_aligned_diff(p.component(j), m.component(j)));
        }
        let m1 = mcpca(&x, &ages, 1.0, 1).unwrap();
        let target = unit(age_covariance(&x, &ages).unwrap());
        age_gap = age_gap.max(sign_aligned_diff(m1.component(0), &target));
    }

    // Planted contrast direction: strong shared variance along `a` in both
    // sets, weaker foreground-only variance along `b`.
    let d = 8;
    let dir_a = unit((0..d).map(|_| rng.sample(StandardNormal)).collect());
    let dir_b = {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&v, &dir_a);
        v.iter_mut().zip(&dir_a).for_each(|(x, a)| *x -= p * a);
        unit(v)
    };
    let draw = |n: usize, sb: f64, rng: &mut ChaCha8Rng| {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let za = rng.sample::<f64, _>(StandardNormal) * 3.0;
                let zb = rng.sample::<f64, _>(StandardNormal) * sb;
                (0..d)
                    .map(|l| za * dir_a[l] + zb * dir_b[l] + 0.1 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let fg = draw(4000, 1.5, &mut rng);
    let bg = draw(4000, 0.0, &mut rng);
    let planted_cos = dot(
        cpca(&fg, &bg, CPCA_DEFAULT_ALPHA, 1).unwrap().component(0),
        &dir_b,
    )
    .abs();

    let mut worst_res = 0.0f64;
    for i in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = rng.random_range(1..=60);
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let mut s = Tensor::zeros(&[n, n]);
        for r in 0..n {
            for c in 0..n {
                s.set(r, c, 0.5 * (a.get(r, c) + a.get(c, r)));
            }
        }
        let eig = sym_eig(&s).unwrap();
        let sv = s.matmul(&eig.vectors).unwrap();
        for c in 0..n {
            for r in 0..n {
                worst_res = worst_res.max((sv.get(r, c) - eig.values[c] * eig.vectors.get(r, c)).abs());
            }
        }
    }
    let pass = pca_gap < 1e-8 && age_gap < 1e-8 && planted_cos > 0.99 && worst_res < 1e-8;
    outcome(
        pass,
        format!(
            "alpha=0 vs PCA max diff {pca_gap:.1e}; mcPCA(1) vs cov(X,t) {age_gap:.1e}; planted |cos| {planted_cos:.4}; sym_eig max residual {worst_res:.1e} over 500 matrices"
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_kl() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let samples = 1_000_000;
    let sigma_r = 0.1;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let kr = rng.random_range(1..4);
        let kb = rng.random_range(1..4);
        let row = |k: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
            Tensor::matrix(1, k, (0..k).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
        };
        let post = LatentPosterior {
            mu_logr: row(kr, -0.3, 0.3, &mut rng),
            logvar_logr: row(kr, -8.0, -3.0, &mut rng),
            mu_b: row(kb, -1.5, 1.5, &mut rng),
            logvar_b: row(kb, -3.0, 1.0, &mut rng),
        };
        let (kl_r, kl_b) = kl_terms(&post, sigma_r);
        let mc = |mu: &Tensor, logvar: &Tensor, prior_sd: f64, rng: &mut ChaCha8Rng| -> f64 {
            let mut total = 0.0;
            for _ in 0..samples {
                let mut lr = 0.0;
                for j in 0..mu.cols() {
                    let sd = (0.5 * logvar.get(0, j)).exp();
                    let e: f64 = rng.sample(StandardNormal);
                    let z = mu.get(0, j) + sd * e;
                    // log q(z) − log p(z); the 2π terms cancel.
                    lr += -sd.ln() - 0.5 * e * e + prior_sd.ln() + 0.5 * (z / prior_sd).powi(2);
                }
                total += lr;
            }
            total / samples as f64
        };
        let mc_r = mc(&post.mu_logr, &post.logvar_logr, sigma_r, &mut rng);
        let mc_b = mc(&post.mu_b, &post.logvar_b, 1.0, &mut rng);
        worst = worst
            .max(((kl_r - mc_r) / kl_r).abs())
            .max(((kl_b - mc_b) / kl_b).abs());
    }
    outcome(
        worst < 0.01,
        format!(
            "20 posteriors, 10^6 samples each, worst relative gap {:.3}% (limit 1%)",
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_confounding() -> Outcome {
    let (mut ones, mut orth) = (0.0f64, 0.0f64);
    let (mut mean_gap, mut cov_gap, mut shift_gap) = (0.0f64, 0.0f64, 0.0f64);
    let mut min_p = 1.0f64;
    let sigma = 0.1;
    let n = 20_000;
    for k in 2..=10usize {
        let cm = make_confounding_map(k, 70 + k as u64).unwrap();
        ones = ones.max(cm.ones_residual());
        orth = orth.max(cm.orthogonality_residual());
        let mut rng = ChaCha8Rng::seed_from_u64(80 + k as u64);
        let z: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..k)
                    .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mz: Vec<Vec<f64>> = z.iter().map(|v| cm.apply(v)).collect();
        // Moments of M z against those of N(0, σ² I).
        for a in 0..k {
            let m = mz.iter().map(|v| v[a]).sum::<f64>() / n as f64;
            mean_gap = mean_gap.max(m.abs() / sigma);
            for b in 0..k {
                let c = mz.iter().map(|v| v[a] * v[b]).sum::<f64>() / n as f64;
                let target = if a == b { sigma * sigma } else { 0.0 };
                cov_gap = cov_gap.max((c - target).abs() / (sigma * sigma));
            }
        }
        // Shifting every log-rate by log t commutes with M.
        let shift = 0.7;
        for v in z.iter().take(100) {
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let lhs = cm.apply(&shifted);
            let rhs = cm.apply(v);
            for a in 0..k {
                shift_gap = shift_gap.max((lhs[a] - rhs[a] - shift).abs());
            }
        }
        let p = energy_permutation_test(&z[..400], &mz[400..800], 199, k as u64);
        min_p = min_p.min(p);
    }
    // Sampling error: mean / σ has sd 1/√n ≈ 0.007, normalized covariance
    // entries have sd ≤ √(2/n) ≈ 0.01.
    let pass = ones < 1e-10 && orth < 1e-10 && mean_gap < 0.05 && cov_gap < 0.05 && shift_gap < 1e-10;
    outcome(
        pass,
        format!(
            "k=2..10: |M1-1| {ones:.1e}, |MM^T-I| {orth:.1e}; moments of Mz vs z: mean {mean_gap:.3} sd-units, cov {cov_gap:.3} relative (limit 0.05); shift residual {shift_gap:.1e}; min energy-test p {min_p:.3}"
        ),
    )
}

// ---------------------------------------------------------------- 11

fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf).unwrap();
    buf
}

fn criterion_determinism(fits: &[RecoverOutcome]) -> Outcome {
    let cfg = ModelConfig::new(10, 7, 2, 2);
    let truth = make_reference_params(&cfg, 5, &Default::default()).unwrap();
    let opts = GenerateOptions {
        n: 500,
        seed: 6,
        longitudinal_fraction: 0.3,
        ..GenerateOptions::default()
    };
    let csv_of = |ds: &Dataset| {
        let mut buf = Vec::new();
        write_csv(ds, &mut buf).unwrap();
        buf
    };
    let same_data =
        csv_of(&generate(&truth, &opts).unwrap().0) == csv_of(&generate(&truth, &opts).unwrap().0);

    let mut small = RecoverConfig::reference(4);
    small.model = ModelConfig {
        seed: 9,
        ..ModelConfig::new(8, 6, 2, 1)
    };
    small.generate.n = 400;
    small.train.epochs = 3;
    small.train.restarts = 2;
    let a = recover(&small).unwrap();
    let b = recover(&small).unwrap();
    let ck = |o: &RecoverOutcome| Checkpoint {
        model: o.fitted.clone(),
        standardization: Some(o.standardization.clone()),
        feature_order: None,
        train_seed: 0,
        epochs: o.history.len(),
    };
    let same_fit = checkpoint_bytes(&ck(&a)) == checkpoint_bytes(&ck(&b)) && a.history == b.history;

    let dir = std::env::temp_dir().join(format!("multirate-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut round_trips = 0;
    let mut exact = true;
    for (i, o) in fits.iter().chain([&a]).enumerate() {
        let ckpt = ck(o);
        let path = dir.join(format!("m{i}.ckpt"));
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits_equal = back
            .model
            .params
            .named_tensors()
            .iter()
            .zip(ckpt.model.params.named_tensors())
            .all(|((_, x), (_, y))| {
                x.data()
                    .iter()
                    .zip(y.data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
            });
        let bytes = checkpoint_bytes(&ckpt);
        exact &= bits_equal && back == ckpt && checkpoint_bytes(&back) == bytes;
        exact &= read_checkpoint(bytes.as_slice()).unwrap() == ckpt;
        round_trips += 1;
    }
    std::fs::remove_dir_all(&dir).ok();
    outcome(
        same_data && same_fit && exact,
        format!(
            "same-seed cohorts byte-identical {same_data}; same-seed fits byte-identical {same_fit}; {round_trips} checkpoint round trips bit-exact {exact}"
        ),
    )
}

// ---------------------------------------------------------------- 2, 4

const RECOVERY_SEEDS: [u64; 3] = [0, 1, 2];

fn criterion_recovery(fits: &[RecoverOutcome], secs: f64) -> Outcome {
    let mut good = 0;
    let mut parts = Vec::new();
    for (s, o) in RECOVERY_SEEDS.iter().zip(fits) {
        let sc = &o.score;
        let ok = sc.mean_correlation >= 0.80 && sc.slopes.iter().all(|b| (b - 1.0).abs() <= 0.25);
        good += usize::from(ok);
        parts.push(format!(
            "seed {s}: corr {:.3} slopes [{}]{}",
            sc.mean_correlation,
            sc.slopes
                .iter()
                .map(|b| format!("{b:.3}"))
                .collect::<Vec<_>>()
                .join(", "),
            if ok { "" } else { " (miss)" }
        ));
    }
    outcome(
        good >= 2 && secs < 20.0 * 60.0,
        format!(
            "{}; {good}/3 seeds meet corr >= 0.80 and |slope-1| <= 0.25; {:.0}s of 1200s",
            parts.join("; "),
            secs
        ),
    )
}

fn criterion_structure(fits: &[RecoverOutcome]) -> Outcome {
    let threshold = 5.0;
    let mut all = true;
    let mut parts = Vec::new();
    for (s, o) in RECOVERY_SEEDS.iter().zip(fits) {
        let report = check_approx(&o.fitted.params.loading_matrix(), threshold).unwrap();
        let witnesses = report.witness_rows.clone();
        let distinct = witnesses
            .as_ref()
            .is_some_and(|w| w.iter().collect::<BTreeSet<_>>().len() == w.len());
        let ok = report.approx_pass == Some(true) && distinct;
        all &= ok;
        parts.push(format!(
            "seed {s}: ratios [{}] witnesses {:?}",
            report
                .dominance_ratios
                .iter()
                .map(|r| if r.is_infinite() {
                    "inf".into()
                } else {
                    format!("{r:.1}")
                })
                .collect::<Vec<_>>()
                .join(", "),
            witnesses.unwrap_or_default()
        ));
    }
    outcome(all, format!("threshold {threshold}; {}", parts.join("; ")))
}

// ---------------------------------------------------------------- 5

const STABILITY_KR: usize = 3;
const STABILITY_TRAIN_SEEDS: [u64; 3] = [100, 200, 300];

/// Shorter budget for the paired objective comparison.
fn short_budget(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 256,
        learning_rate: 1e-3,
        restarts: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn criterion_stability() -> Outcome {
    let mut cfg = RecoverConfig::reference(10);
    cfg.model.k_r = STABILITY_KR;
    let truth = make_reference_params(&cfg.model, cfg.truth_seed, &cfg.design).unwrap();
    let (ds, latent) = generate(&truth, &cfg.generate).unwrap();
    let rows: Vec<usize> = (0..ds.len()).collect();
    let (z, _) = standardize_and_orient(&ds, &rows).unwrap();
    // Same budget as the recovery fits.
    let budget = |seed: u64| TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let fit_rates = |config: &ModelConfig, seed: u64| -> Tensor {
        let mc = ModelConfig {
            seed: seed + 1,
            ..config.clone()
        };
        let out = train(&z.x, &z.ages, None, &mc, &budget(seed)).unwrap();
        let r = out.model.point_latents(&z.x, &z.ages, false).unwrap().0;
        let vs_truth = recovery_score(&latent.r, &r).unwrap();
        eprintln!(
            "  stability fit (monotone {}, seed {seed}): restart losses {:?}, matched correlation to truth {:.3}",
            config.d_mono > 0,
            out.restart_losses,
            vs_truth.mean_correlation
        );
        r
    };
    let mono: Vec<Tensor> = STABILITY_TRAIN_SEEDS
        .iter()
        .map(|&s| fit_rates(&cfg.model, s))
        .collect();
    let free_config = cfg.model.without_monotone();
    let free: Vec<Tensor> = STABILITY_TRAIN_SEEDS
        .iter()
        .map(|&s| fit_rates(&free_config, s))
        .collect();
    let mut good = 0;
    let mut parts = Vec::new();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let rm = rho_r(&mono[i], &mono[j]).unwrap().rho;
        let rf = rho_r(&free[i], &free[j]).unwrap().rho;
        let ok = rm >= 0.8 && rf < rm;
        good += usize::from(ok);
        parts.push(format!(
            "pair ({i},{j}): monotone {rm:.3} vs non-monotone {rf:.3}"
        ));
    }
    outcome(
        good >= 2,
        format!(
            "k_r = {STABILITY_KR}, n = {}; {}; {good}/3 pairs with monotone >= 0.8 and non-monotone lower",
            ds.len(),
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 6

fn standardized(ds: &Dataset, o: &RecoverOutcome) -> Dataset {
    Dataset {
        x: o.standardization.apply(&ds.x).unwrap(),
        ..ds.clone()
    }
}

fn criterion_fast_forward(fit: &RecoverOutcome) -> Outcome {
    let train_set = standardized(&fit.dataset, fit);
    let ff = crosssectional_ffwd_eval(&fit.fitted, &train_set.x, &train_set.ages, 5.0, 5.0, false).unwrap();
    let corr = ff.correlation.unwrap_or(f64::NAN);
    // Held-out individuals with one follow-up 2 to 6 years later.
    let opts = GenerateOptions {
        n: 20_000,
        seed: 606,
        longitudinal_fraction: 1.0,
        gap_range: (2.0, 6.0),
        ..GenerateOptions::default()
    };
    let (held, _) = generate(&fit.truth.model, &opts).unwrap();
    let (pairs, _) = standardized(&held, fit).pairs().unwrap();
    let trend = age_trend(&train_set.x, &train_set.ages).unwrap();
    let rep = longitudinal_benchmark(&fit.fitted, &pairs, &trend, 5.0, false).unwrap();
    outcome(
        corr >= 0.90 && rep.win_vs_no_change >= 0.66,
        format!(
            "5-year cross-sectional correlation {corr:.3} (>= 0.90); wins vs no change {:.3} over {} follow-ups >= 5y (>= 0.66); vs reconstruction {:.3}, vs mean change {:.3}",
            rep.win_vs_no_change, rep.n, rep.win_vs_reconstruction, rep.win_vs_mean_change
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_longitudinal(fit: &RecoverOutcome) -> Outcome {
    let truth = &fit.truth.model;
    let opts = GenerateOptions {
        n: 10_000,
        seed: 707,
        longitudinal_fraction: 0.5,
        ..GenerateOptions::default()
    };
    let (ds, _) = generate(truth, &opts).unwrap();
    let base_rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.visits[i] == 0).collect();
    let (z, std) = standardize_and_orient(&ds, &base_rows).unwrap();
    let base = z.baseline().unwrap();
    let (pairs, _) = z.pairs().unwrap();

    // λ = 0 with pairs present is the cross-sectional loss, bit for bit.
    let model = &fit.fitted;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let cross_rows: Vec<usize> = (0..256).collect();
    let pair_rows: Vec<usize> = (0..128).collect();
    let xb = base.x.select_rows(&cross_rows).unwrap();
    let ab: Vec<f64> = cross_rows.iter().map(|&i| base.ages[i]).collect();
    let pb = pairs.select(&pair_rows).unwrap();
    let noise = Noise::sample(xb.rows(), &model.config, 1, &mut rng);
    let pnoise = Noise::sample(pb.len(), &model.config, 1, &mut rng);
    let batch = Batch { x: &xb, ages: &ab };
    let (l0, g0) = loss_and_gradients(model, batch, &noise, None, 0.0).unwrap();
    let (l1, g1) = loss_and_gradients(model, batch, &noise, Some((&pb, &pnoise)), 0.0).unwrap();
    let identical = l0.total.to_bits() == l1.total.to_bits()
        && g0.iter().zip(&g1).all(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let held_opts = GenerateOptions {
        n: 5_000,
        seed: 708,
        longitudinal_fraction: 1.0,
        ..GenerateOptions::default()
    };
    let (held, _) = generate(truth, &held_opts).unwrap();
    let held_z = Dataset {
        x: std.apply(&held.x).unwrap(),
        ..held.clone()
    };
    let (held_pairs, _) = held_z.pairs().unwrap();
    let trend = age_trend(&base.x, &base.ages).unwrap();
    let mut errors = Vec::new();
    for lambda in [0.0, 1.0] {
        let tc = TrainConfig {
            lambda_lon: lambda,
            ..short_budget(77)
        };
        let mc = ModelConfig {
            seed: 78,
            ..fit.fitted.config.clone()
        };
        let out = train(&base.x, &base.ages, (lambda > 0.0).then_some(&pairs), &mc, &tc).unwrap();
        let rep = longitudinal_benchmark(&out.model, &held_pairs, &trend, 0.0, false).unwrap();
        errors.push(rep.model_error);
    }
    outcome(
        identical && errors[1] < errors[0],
        format!(
            "lambda=0 loss and gradients bit-identical {identical}; held-out follow-up squared error lambda=1 {:.4} vs lambda=0 {:.4} over {} pairs",
            errors[1],
            errors[0],
            held_pairs.len()
        ),
    )
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| {
        s.split(',')
            .filter_map(|t| t.trim().parse().ok())
            .collect::<BTreeSet<usize>>()
    });
    let mut suite = Suite {
        only,
        results: Vec::new(),
    };
    suite.run(1, "gradient integrity", criterion_gradients);
    suite.run(3, "order-isomorphism checker soundness", criterion_iso);
    suite.run(8, "baselines", criterion_baselines);
    suite.run(9, "KL closed forms", criterion_kl);
    suite.run(10, "non-identifiability map", criterion_confounding);

    let needs_fits = [2, 4, 6, 7, 11].iter().any(|&c| suite.wants(c));
    let start = Instant::now();
    let fits: Vec<RecoverOutcome> = if needs_fits {
        RECOVERY_SEEDS
            .iter()
            .map(|&s| {
                let o = recover(&RecoverConfig::reference(s)).unwrap();
                eprintln!(
                    "  recovery seed {s}: {:?} after {:.0}s",
                    o.score.correlations,
                    start.elapsed().as_secs_f64()
                );
                o
            })
            .collect()
    } else {
        Vec::new()
    };
    let recovery_secs = start.elapsed().as_secs_f64();
    suite.run(2, "synthetic recovery", || {
        criterion_recovery(&fits, recovery_secs)
    });
    suite.run(4, "learned structure", || criterion_structure(&fits));
    suite.run(5, "stability", criterion_stability);
    suite.run(6, "fast-forward", || criterion_fast_forward(&fits[0]));
    suite.run(7, "longitudinal objective", || criterion_longitudinal(&fits[0]));
    suite.run(11, "determinism and persistence", || criterion_determinism(&fits));

    let passed = suite.results.iter().filter(|(_, p)| *p).count();
    println!("acceptance: {passed}/{} criteria passed", suite.results.len());
    if passed != suite.results.len() {
        std::process::exit(1);
    }
}
