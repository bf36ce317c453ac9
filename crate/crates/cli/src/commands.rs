use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use multirate::baselines::{fit_baseline, Method, CPCA_DEFAULT_ALPHA, MCPCA_DEFAULT_ALPHA};
use multirate::data::{
    load_checkpoint, load_csv, save_checkpoint, write_csv, Checkpoint, Dataset, RunConfig, Schema,
};
use multirate::elbo::write_history_csv;
use multirate::eval::{
    age_trend, crosssectional_ffwd_eval, fast_forward, longitudinal_benchmark, reconstruction_corr, rho_r,
};
use multirate::iso::check_approx;
use multirate::model::ModelConfig;
use multirate::pipeline::{apply_checkpoint, fit_dataset, followup_pairs, prepare, recover, RecoverConfig};
use multirate::synth::{
    generate, make_reference_params, write_ground_truth_csv, GenerateOptions, ReferenceDesign,
};
use multirate::tensor::Tensor;

use crate::manifest::Recorder;

/// A check that ran to completion and did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Debug, Parser)]
#[command(
    name = "multirate",
    version,
    about = "Multidimensional rates of progression from cross-sectional data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort from a reference model.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Fit(FitArgs),
    /// Reconstruction, fast-forward and longitudinal reports for a checkpoint.
    Eval(EvalArgs),
    /// Predict every baseline row a fixed number of years ahead.
    Ffwd(FfwdArgs),
    /// Check the structure of a checkpoint's loading matrix.
    CheckIso(CheckIsoArgs),
    /// Fit a linear baseline.
    Baseline(BaselineArgs),
    /// Agreement of the rates inferred by two checkpoints.
    Stability(StabilityArgs),
    /// Generate from a reference model, fit a fresh one and score the recovered rates.
    Recover(RecoverArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub d: usize,
    #[arg(long, default_value_t = 15)]
    pub d_mono: usize,
    #[arg(long, default_value_t = 2)]
    pub kr: usize,
    #[arg(long, default_value_t = 3)]
    pub kb: usize,
    /// Share of individuals given a second visit.
    #[arg(long, default_value_t = 0.0)]
    pub longitudinal_fraction: f64,
    #[arg(long, default_value_t = 40.0)]
    pub age_min: f64,
    #[arg(long, default_value_t = 70.0)]
    pub age_max: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with `[model]`, `[train]` and `[data]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda_lon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 5.0)]
    pub bin_width: f64,
    /// Shortest follow-up gap scored by the longitudinal benchmark.
    #[arg(long, default_value_t = 5.0)]
    pub min_gap: f64,
    /// Use the posterior mean of `r` instead of its median.
    #[arg(long)]
    pub lognormal_mean: bool,
}

#[derive(Debug, Args)]
pub struct FfwdArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub years: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lognormal_mean: bool,
}

#[derive(Debug, Args)]
pub struct CheckIsoArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = multirate::iso::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Directory for the report; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Contrast weight; defaults per method.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value_t = 50.0)]
    pub background_max_age: f64,
    /// Features excluded from the age orientation, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub non_monotone: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lognormal_mean: bool,
}

#[derive(Debug, Args)]
pub struct RecoverArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub kr: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Ffwd(a) => ffwd(a),
        Command::CheckIso(a) => check_iso(a),
        Command::Baseline(a) => baseline(a),
        Command::Stability(a) => stability(a),
        Command::Recover(a) => recover_cmd(a),
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(path: &Path, non_monotone: &[String]) -> Result<Dataset> {
    let schema = Schema {
        non_monotone: non_monotone.to_vec(),
    };
    Ok(load_csv(path, &schema)?)
}

/// Writes `id,visit,age,<prefix>_1..` rows.
fn write_matrix_csv(path: &Path, ds: &Dataset, columns: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["id".to_string(), "visit".into(), "age".into()];
    for (prefix, t) in columns {
        header.extend((1..=t.cols()).map(|j| format!("{prefix}_{j}")));
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![
            ds.ids[i].clone(),
            ds.visits[i].to_string(),
            ds.ages[i].to_string(),
        ];
        for (_, t) in columns {
            rec.extend(t.row(i).iter().map(|v| v.to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    out_dir(&a.out)?;
    let mut rec = Recorder::new("gen", Some(a.seed));
    let model_config = ModelConfig {
        seed: a.seed,
        ..ModelConfig::new(a.d, a.d_mono, a.kr, a.kb)
    };
    model_config.validate()?;
    let design = ReferenceDesign::default();
    let truth_model = make_reference_params(&model_config, a.seed, &design)?;
    let opts = GenerateOptions {
        n: a.n,
        age_range: (a.age_min, a.age_max),
        seed: a.seed.wrapping_add(1),
        longitudinal_fraction: a.longitudinal_fraction,
        ..GenerateOptions::default()
    };
    let (ds, truth) = generate(&truth_model, &opts)?;
    log::info!("generated {} rows for {} individuals", ds.len(), a.n);

    let data_path = a.out.join("data.csv");
    write_csv(&ds, create(&data_path)?)?;
    rec.output(&data_path);
    let truth_path = a.out.join("truth.csv");
    write_ground_truth_csv(&ds, &truth, create(&truth_path)?)?;
    rec.output(&truth_path);
    let ckpt_path = a.out.join("truth.ckpt");
    save_checkpoint(
        &Checkpoint {
            model: truth_model,
            standardization: None,
            feature_order: None,
            train_seed: a.seed,
            epochs: 0,
        },
        &ckpt_path,
    )?;
    rec.output(&ckpt_path);

    // A configuration that fits the generated data as is.
    let mut run = RunConfig::default();
    run.model = ModelConfig {
        seed: a.seed,
        ..model_config.clone()
    };
    run.data.non_monotone = ds.feature_names[a.d_mono..].to_vec();
    let config_path = a.out.join("config.toml");
    write_text(&config_path, &run.to_toml_string()?)?;
    rec.output(&config_path);

    rec.finish(
        &a.out,
        json!({ "model": model_config, "design": design, "generate": opts }),
    )?;
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    out_dir(&a.out)?;
    let mut run = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(l) = a.lambda_lon {
        run.train.lambda_lon = l;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
        run.model.seed = s.wrapping_add(1);
    }
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(r) = a.restarts {
        run.train.restarts = r;
    }
    let mut rec = Recorder::new("fit", Some(run.train.seed));
    if let Some(p) = &a.config {
        rec.input(p);
    }
    let raw = load_data(&a.data, &run.data.non_monotone)?;
    rec.input(&a.data);
    log::info!(
        "fitting {} rows, {} features ({} monotone), {} epochs",
        raw.len(),
        raw.d(),
        raw.d_mono(),
        run.train.epochs
    );
    let outcome = fit_dataset(&raw, &run)?;
    run.model = outcome.model_config.clone();

    let ckpt_path = a.out.join("model.ckpt");
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    rec.output(&ckpt_path);
    let hist_path = a.out.join("history.csv");
    write_history_csv(&outcome.history, create(&hist_path)?)?;
    rec.output(&hist_path);

    let data = &outcome.prepared.data;
    let post = outcome.checkpoint.model.encode(&data.x, &data.ages)?;
    let latents_path = a.out.join("latents.csv");
    write_matrix_csv(
        &latents_path,
        data,
        &[
            ("r", &post.rate_estimate(false)),
            ("log_r_sd", &post.logvar_logr.map(|v| (0.5 * v).exp())),
            ("b", &post.mu_b),
        ],
    )?;
    rec.output(&latents_path);
    let heldout_path = a.out.join("heldout.csv");
    write_csv(
        &raw.select_rows(&outcome.prepared.test_rows)?,
        create(&heldout_path)?,
    )?;
    rec.output(&heldout_path);
    let config_path = a.out.join("config.toml");
    write_text(&config_path, &run.to_toml_string()?)?;
    rec.output(&config_path);

    if let Some(last) = outcome.history.last() {
        println!(
            "final loss {:.6} (restart {} of {})",
            last.loss.total,
            outcome.selected + 1,
            outcome.restart_losses.len()
        );
    }
    rec.finish(
        &a.out,
        json!({ "run": run, "restart_losses": outcome.restart_losses, "selected": outcome.selected }),
    )?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    out_dir(&a.out)?;
    let mut rec = Recorder::new("eval", None);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let raw = load_data(&a.data, &[])?;
    rec.input(&a.data);
    let data = apply_checkpoint(&raw, &ckpt)?;
    let base = data.baseline()?;
    let model = &ckpt.model;

    let recon = reconstruction_corr(model, &base.x, &base.ages, a.lognormal_mean)?;
    let recon_path = a.out.join("reconstruction.csv");
    let mut w = csv::Writer::from_writer(create(&recon_path)?);
    w.write_record(["feature", "correlation"])?;
    for (name, c) in base.feature_names.iter().zip(&recon.per_feature) {
        w.write_record([name.clone(), c.map_or_else(String::new, |v| v.to_string())])?;
    }
    w.flush()?;
    rec.output(&recon_path);
    println!("reconstruction mean correlation {:.4}", recon.mean);

    let ffwd = crosssectional_ffwd_eval(
        model,
        &base.x,
        &base.ages,
        a.bin_width,
        a.horizon,
        a.lognormal_mean,
    )?;
    let ffwd_path = a.out.join("ffwd.csv");
    ffwd.write_csv(create(&ffwd_path)?, &base.feature_names)?;
    rec.output(&ffwd_path);
    match ffwd.correlation {
        Some(c) => println!("fast-forward correlation at {} years {:.4}", a.horizon, c),
        None => println!("fast-forward correlation at {} years undefined", a.horizon),
    }

    let longitudinal = match followup_pairs(&data)? {
        Some(pairs)
            if pairs
                .ages0
                .iter()
                .zip(&pairs.ages1)
                .any(|(t0, t1)| t1 - t0 >= a.min_gap) =>
        {
            let trend = age_trend(&base.x, &base.ages)?;
            let report = longitudinal_benchmark(model, &pairs, &trend, a.min_gap, a.lognormal_mean)?;
            println!(
                "longitudinal wins over {} pairs: no change {:.3}, reconstruction {:.3}, mean change {:.3}",
                report.n, report.win_vs_no_change, report.win_vs_reconstruction, report.win_vs_mean_change
            );
            Some(report)
        }
        _ => {
            log::info!(
                "no follow-ups at least {} years after baseline; skipping the longitudinal benchmark",
                a.min_gap
            );
            None
        }
    };
    let summary_path = a.out.join("summary.json");
    write_json(
        &summary_path,
        &json!({
            "reconstruction_mean": recon.mean,
            "ffwd_correlation": ffwd.correlation,
            "ffwd_skipped_bins": ffwd.skipped_bins,
            "longitudinal": longitudinal,
        }),
    )?;
    rec.output(&summary_path);
    rec.finish(
        &a.out,
        json!({
            "horizon": a.horizon,
            "bin_width": a.bin_width,
            "min_gap": a.min_gap,
            "lognormal_mean": a.lognormal_mean,
        }),
    )?;
    Ok(())
}

fn ffwd(a: FfwdArgs) -> Result<()> {
    out_dir(&a.out)?;
    if !(a.years >= 0.0 && a.years.is_finite()) {
        return Err(multirate::Error::Domain(format!("--years {} must be non-negative", a.years)).into());
    }
    let mut rec = Recorder::new("ffwd", None);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let raw = load_data(&a.data, &[])?;
    rec.input(&a.data);
    let base = apply_checkpoint(&raw, &ckpt)?.baseline()?;
    let targets: Vec<f64> = base.ages.iter().map(|t| t + a.years).collect();
    let pred = fast_forward(&ckpt.model, &base.x, &base.ages, &targets, a.lognormal_mean)?;
    let pred = match &ckpt.standardization {
        Some(s) => s.invert(&pred)?,
        None => pred,
    };
    let path = a.out.join("ffwd_predictions.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["id".to_string(), "age".into(), "target_age".into()];
    header.extend(base.feature_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..base.len() {
        let mut row = vec![
            base.ids[i].clone(),
            base.ages[i].to_string(),
            targets[i].to_string(),
        ];
        row.extend(pred.row(i).iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    rec.output(&path);
    rec.finish(
        &a.out,
        json!({ "years": a.years, "lognormal_mean": a.lognormal_mean }),
    )?;
    Ok(())
}

fn check_iso(a: CheckIsoArgs) -> Result<()> {
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a
            .checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    out_dir(&dir)?;
    let mut rec = Recorder::new("check-iso", None);
    let ckpt = load_checkpoint(&a.checkpoint)?;
    rec.input(&a.checkpoint);
    let report = check_approx(&ckpt.model.params.loading_matrix(), a.threshold)?;
    let text = report.render(&[a.threshold]);
    print!("{text}");
    let path = dir.join("iso_report.json");
    write_json(&path, &report)?;
    rec.output(&path);
    rec.finish(&dir, json!({ "threshold": a.threshold }))?;
    if report.approx_pass != Some(true) {
        bail!(CheckFailed(format!(
            "no distinct witness rows reach dominance ratio {}",
            a.threshold
        )));
    }
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    out_dir(&a.out)?;
    let mut rec = Recorder::new("baseline", None);
    let raw = load_data(&a.data, &a.non_monotone)?;
    rec.input(&a.data);
    let prepared = prepare(&raw, 1.0, 0)?;
    let base = prepared.train_baseline()?;
    let alpha = a.alpha.unwrap_or(match a.method {
        Method::Pca => 0.0,
        Method::Cpca => CPCA_DEFAULT_ALPHA,
        Method::Mcpca => MCPCA_DEFAULT_ALPHA,
    });
    let lm = fit_baseline(a.method, &base.x, &base.ages, alpha, a.k, a.background_max_age)?;

    let load_path = a.out.join("loadings.csv");
    let mut w = csv::Writer::from_writer(create(&load_path)?);
    w.write_record(["component", "feature", "loading"])?;
    for (j, name, v) in lm.loading_table(&base.feature_names) {
        w.write_record([(j + 1).to_string(), name.to_string(), v.to_string()])?;
    }
    w.flush()?;
    rec.output(&load_path);
    let scores_path = a.out.join("scores.csv");
    write_matrix_csv(&scores_path, &base, &[("score", &lm.scores(&base.x)?)])?;
    rec.output(&scores_path);
    println!(
        "{} with alpha {} and {} components",
        a.method.name(),
        lm.alpha,
        lm.k()
    );
    rec.finish(
        &a.out,
        json!({
            "method": a.method.name(),
            "alpha": lm.alpha,
            "k": a.k,
            "background_max_age": a.background_max_age,
            "non_monotone": a.non_monotone,
            "objective": lm.objective,
        }),
    )?;
    Ok(())
}

fn stability(a: StabilityArgs) -> Result<()> {
    out_dir(&a.out)?;
    let mut rec = Recorder::new("stability", None);
    let raw = load_data(&a.data, &[])?;
    rec.input(&a.data);
    let mut rates = Vec::new();
    for p in &a.checkpoints {
        let ckpt = load_checkpoint(p)?;
        rec.input(p);
        let base = apply_checkpoint(&raw, &ckpt)?.baseline()?;
        rates.push(ckpt.model.point_latents(&base.x, &base.ages, a.lognormal_mean)?.0);
    }
    let score = rho_r(&rates[0], &rates[1])?;
    println!("rho_r {:.4}", score.rho);
    let path = a.out.join("stability.json");
    write_json(&path, &score)?;
    rec.output(&path);
    rec.finish(&a.out, json!({ "lognormal_mean": a.lognormal_mean }))?;
    Ok(())
}

fn recover_cmd(a: RecoverArgs) -> Result<()> {
    let mut cfg = RecoverConfig::reference(a.seed);
    cfg.model.k_r = a.kr;
    cfg.generate.n = a.n;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = a.restarts {
        cfg.train.restarts = r;
    }
    let mut rec = Recorder::new("recover", Some(a.seed));
    log::info!(
        "recovery run: n = {}, k_r = {}, {} epochs, {} restarts",
        cfg.generate.n,
        cfg.model.k_r,
        cfg.train.epochs,
        cfg.train.restarts
    );
    let outcome = recover(&cfg)?;
    let s = &outcome.score;
    let list = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    println!("mean matched correlation {:.4}", s.mean_correlation);
    println!("correlations {}", list(&s.correlations));
    println!("slopes {}", list(&s.slopes));
    if let Some(dir) = &a.out {
        out_dir(dir)?;
        let score_path = dir.join("recovery.json");
        write_json(&score_path, s)?;
        rec.output(&score_path);
        let ckpt_path = dir.join("fitted.ckpt");
        save_checkpoint(
            &Checkpoint {
                model: outcome.fitted.clone(),
                standardization: Some(outcome.standardization.clone()),
                feature_order: None,
                train_seed: cfg.train.seed,
                epochs: outcome.history.len(),
            },
            &ckpt_path,
        )?;
        rec.output(&ckpt_path);
        let truth_path = dir.join("truth.ckpt");
        save_checkpoint(
            &Checkpoint {
                model: outcome.truth.model.clone(),
                standardization: None,
                feature_order: None,
                train_seed: cfg.truth_seed,
                epochs: 0,
            },
            &truth_path,
        )?;
        rec.output(&truth_path);
        let hist_path = dir.join("history.csv");
        write_history_csv(&outcome.history, create(&hist_path)?)?;
        rec.output(&hist_path);
        rec.finish(
            dir,
            json!({ "recover": cfg, "restart_losses": outcome.restart_losses, "selected": outcome.selected }),
        )?;
    }
    Ok(())
}
