//! Small in-process runs of the full pipeline.

use multirate::data::{read_csv, write_csv, RunConfig, Schema};
use multirate::elbo::{elbo, joint_loss, loss_and_gradients, Batch, Noise};
use multirate::eval::{age_trend, longitudinal_benchmark, reconstruction_corr};
use multirate::iso::check_exact;
use multirate::model::ModelConfig;
use multirate::pipeline::{apply_checkpoint, fit_dataset, followup_pairs};
use multirate::synth::{generate, make_reference_params, GenerateOptions, ReferenceDesign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort(n: usize, longitudinal_fraction: f64) -> multirate::data::Dataset {
    let cfg = ModelConfig::new(8, 6, 2, 1);
    let truth = make_reference_params(&cfg, 4, &ReferenceDesign::default()).unwrap();
    assert!(check_exact(&truth.params.loading_matrix()).unwrap().exact_pass);
    let opts = GenerateOptions {
        n,
        seed: 9,
        longitudinal_fraction,
        ..GenerateOptions::default()
    };
    generate(&truth, &opts).unwrap().0
}

fn small_run(lambda_lon: f64) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.encoder_layers = vec![12];
    run.model.decoder_layers = vec![10];
    run.model.k_r = 2;
    run.model.k_b = 1;
    run.train.epochs = 3;
    run.train.batch_size = 64;
    run.train.lambda_lon = lambda_lon;
    run.data.non_monotone = vec!["free_00".into(), "free_01".into()];
    run
}

#[test]
fn csv_fit_and_evaluate() {
    let ds = cohort(400, 0.3);
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let raw = read_csv(
        buf.as_slice(),
        &Schema {
            non_monotone: vec!["free_00".into(), "free_01".into()],
        },
    )
    .unwrap();
    assert_eq!(raw, ds);

    let run = small_run(1.0);
    let fit = fit_dataset(&raw, &run).unwrap();
    assert_eq!(fit.history.len(), 3);
    assert_eq!(fit.model_config.d, 8);
    assert_eq!(fit.model_config.d_mono, 6);
    assert!(fit.history.iter().all(|h| h.loss.lon > 0.0));

    let test = raw.select_rows(&fit.prepared.test_rows).unwrap();
    let z = apply_checkpoint(&test, &fit.checkpoint).unwrap();
    let base = z.baseline().unwrap();
    let recon = reconstruction_corr(&fit.checkpoint.model, &base.x, &base.ages, false).unwrap();
    assert!(recon.mean.is_finite());
    if let Some(pairs) = followup_pairs(&z).unwrap() {
        let trend = age_trend(&base.x, &base.ages).unwrap();
        let rep = longitudinal_benchmark(&fit.checkpoint.model, &pairs, &trend, 0.0, false).unwrap();
        assert_eq!(rep.n, pairs.len());
    }

    // Held-out rows standardized through the checkpoint equal the rows
    // standardized during fitting.
    let all = apply_checkpoint(&raw, &fit.checkpoint).unwrap();
    assert_eq!(all.x, fit.prepared.data.x);
}

#[test]
fn fitting_is_deterministic_and_seed_sensitive() {
    let ds = cohort(300, 0.0);
    let run = small_run(0.0);
    let a = fit_dataset(&ds, &run).unwrap();
    let b = fit_dataset(&ds, &run).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let mut other = run.clone();
    other.train.seed = 1;
    assert_ne!(fit_dataset(&ds, &other).unwrap().checkpoint, a.checkpoint);
}

#[test]
fn zero_weight_pairs_leave_the_loss_unchanged() {
    let ds = cohort(200, 0.5);
    let run = small_run(0.0);
    let fit = fit_dataset(&ds, &run).unwrap();
    let z = fit.prepared.data.clone();
    let base = z.baseline().unwrap();
    let (pairs, _) = z.pairs().unwrap();
    let model = &fit.checkpoint.model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Noise::sample(base.len(), &model.config, 1, &mut rng);
    let pair_noise = Noise::sample(pairs.len(), &model.config, 1, &mut rng);
    let batch = Batch {
        x: &base.x,
        ages: &base.ages,
    };
    let plain = elbo(model, batch, &noise).unwrap();
    let joint = joint_loss(model, batch, &noise, Some((&pairs, &pair_noise)), 0.0).unwrap();
    assert_eq!(plain.total.to_bits(), joint.total.to_bits());
    let (_, g0) = loss_and_gradients(model, batch, &noise, None, 0.0).unwrap();
    let (_, g1) = loss_and_gradients(model, batch, &noise, Some((&pairs, &pair_noise)), 0.0).unwrap();
    assert_eq!(g0, g1);
}
