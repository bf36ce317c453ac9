//! End-to-end synthetic recovery: generate from a known model, fit a fresh
//! one, score the recovered rates.

use serde::{Deserialize, Serialize};

use crate::data::{standardize_and_orient, Checkpoint, Dataset, RunConfig, Standardization};
use crate::elbo::{train, EpochRecord, PairedData, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{recovery_score, RecoveryScore};
use crate::model::{Model, ModelConfig};
use crate::synth::{generate, make_reference_params, GenerateOptions, GroundTruth, ReferenceDesign};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverConfig {
    /// Shapes of both the generating and the fitted model. Its `seed`
    /// initializes the fitted model.
    pub model: ModelConfig,
    pub design: ReferenceDesign,
    /// Seed of the generating parameters.
    pub truth_seed: u64,
    pub generate: GenerateOptions,
    pub train: TrainConfig,
    /// Use `exp(μ + σ²/2)` instead of `exp(μ)` as the rate estimate.
    pub lognormal_mean: bool,
}

impl RecoverConfig {
    /// The default recovery setting: `d = 20`, 15 monotone features,
    /// two rates, three bias dimensions and 20,000 individuals, fitted with
    /// 200 epochs of batch 256 and the best of three restarts. Every seed
    /// is derived from `seed`.
    pub fn reference(seed: u64) -> Self {
        let model = ModelConfig {
            seed: seed.wrapping_mul(3).wrapping_add(1),
            ..ModelConfig::new(20, 15, 2, 3)
        };
        Self {
            model,
            design: ReferenceDesign::default(),
            truth_seed: seed,
            generate: GenerateOptions {
                n: 20_000,
                seed: seed.wrapping_mul(3).wrapping_add(2),
                ..GenerateOptions::default()
            },
            train: TrainConfig {
                seed: seed.wrapping_mul(3),
                epochs: 200,
                batch_size: 256,
                restarts: 3,
                ..TrainConfig::default()
            },
            lognormal_mean: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecoverOutcome {
    pub truth: GroundTruth,
    /// The generated cohort in original units.
    pub dataset: Dataset,
    pub standardization: Standardization,
    pub fitted: Model,
    pub history: Vec<EpochRecord>,
    /// Index of the kept restart and the final loss of every restart.
    pub selected: usize,
    pub restart_losses: Vec<f64>,
    pub score: RecoveryScore,
}

pub fn recover(cfg: &RecoverConfig) -> Result<RecoverOutcome> {
    let truth_model = make_reference_params(&cfg.model, cfg.truth_seed, &cfg.design)?;
    let (dataset, truth) = generate(&truth_model, &cfg.generate)?;
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let (z, standardization) = standardize_and_orient(&dataset, &rows)?;
    let outcome = train(&z.x, &z.ages, None, &cfg.model, &cfg.train)?;
    let (r_hat, _) = outcome.model.point_latents(&z.x, &z.ages, cfg.lognormal_mean)?;
    let score = recovery_score(&truth.r, &r_hat)?;
    Ok(RecoverOutcome {
        truth,
        dataset,
        standardization,
        fitted: outcome.model,
        history: outcome.history,
        selected: outcome.selected,
        restart_losses: outcome.restart_losses,
        score,
    })
}

/// A dataset in model coordinates: monotone features first, standardized
/// with statistics from the training split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub standardization: Standardization,
    /// Original column index of each model feature.
    pub feature_order: Vec<usize>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl Prepared {
    /// Baseline rows of the training split.
    pub fn train_baseline(&self) -> Result<Dataset> {
        let rows: Vec<usize> = self
            .train_rows
            .iter()
            .copied()
            .filter(|&i| self.data.visits[i] == 0)
            .collect();
        self.data.select_rows(&rows)
    }

    pub fn test_set(&self) -> Result<Dataset> {
        self.data.select_rows(&self.test_rows)
    }
}

/// Splits `raw` by id, reorders features monotone-first and standardizes
/// every row with statistics of the training baseline rows.
pub fn prepare(raw: &Dataset, train_fraction: f64, split_seed: u64) -> Result<Prepared> {
    let (ordered, feature_order) = raw.monotone_first()?;
    let (train_rows, test_rows) = ordered.split_by_id(train_fraction, split_seed)?;
    let stat_rows: Vec<usize> = train_rows
        .iter()
        .copied()
        .filter(|&i| ordered.visits[i] == 0)
        .collect();
    let (data, standardization) = standardize_and_orient(&ordered, &stat_rows)?;
    Ok(Prepared {
        data,
        standardization,
        feature_order,
        train_rows,
        test_rows,
    })
}

/// Maps a raw dataset into the coordinates of a fitted checkpoint.
pub fn apply_checkpoint(raw: &Dataset, ckpt: &Checkpoint) -> Result<Dataset> {
    let d = ckpt.model.config.d;
    let order: Vec<usize> = match &ckpt.feature_order {
        Some(o) => o.clone(),
        None => (0..d).collect(),
    };
    let std = ckpt.standardization.clone().unwrap_or_else(|| {
        Standardization::identity(
            order
                .iter()
                .map(|&j| raw.feature_names.get(j).cloned().unwrap_or_default())
                .collect(),
        )
    });
    if raw.d() != d || order.len() != d || order.iter().any(|&j| j >= d) {
        return Err(Error::Data(format!(
            "dataset has {} features, checkpoint expects {d}",
            raw.d()
        )));
    }
    for (k, &j) in order.iter().enumerate() {
        if raw.feature_names[j] != std.feature_names[k] {
            return Err(Error::Data(format!(
                "column {j} is `{}`, checkpoint expects `{}`",
                raw.feature_names[j], std.feature_names[k]
            )));
        }
    }
    let cols: Vec<Tensor> = order
        .iter()
        .map(|&j| raw.x.slice_cols(j, j + 1))
        .collect::<std::result::Result<_, _>>()?;
    let refs: Vec<&Tensor> = cols.iter().collect();
    let x = std.apply(&Tensor::concat_cols(&refs)?)?;
    Ok(Dataset {
        x,
        feature_names: std.feature_names.clone(),
        monotone: (0..d).map(|k| k < ckpt.model.config.d_mono).collect(),
        ..raw.clone()
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub prepared: Prepared,
    /// Model configuration actually trained: `d` and `d_mono` come from the
    /// data.
    pub model_config: ModelConfig,
    pub history: Vec<EpochRecord>,
    pub selected: usize,
    pub restart_losses: Vec<f64>,
}

/// Prepares `raw`, trains on the training split (with its follow-up pairs
/// when `λ_lon > 0`) and packages the result as a checkpoint.
pub fn fit_dataset(raw: &Dataset, cfg: &RunConfig) -> Result<FitOutcome> {
    cfg.train.validate()?;
    let prepared = prepare(raw, cfg.data.train_fraction, cfg.train.seed)?;
    let model_config = ModelConfig {
        d: raw.d(),
        d_mono: raw.d_mono(),
        ..cfg.model.clone()
    };
    if (model_config.d, model_config.d_mono) != (cfg.model.d, cfg.model.d_mono) {
        log::info!(
            "using d = {}, d_mono = {} from the data",
            model_config.d,
            model_config.d_mono
        );
    }
    let base = prepared.train_baseline()?;
    let pairs = if cfg.train.lambda_lon > 0.0 {
        let train_part = prepared.data.select_rows(&prepared.train_rows)?;
        let (p, _) = train_part.pairs()?;
        if p.is_empty() {
            return Err(Error::Data(
                "lambda_lon > 0 but the training split has no follow-up visits".into(),
            ));
        }
        Some(p)
    } else {
        None
    };
    let outcome = train(&base.x, &base.ages, pairs.as_ref(), &model_config, &cfg.train)?;
    let epochs = outcome.history.len();
    Ok(FitOutcome {
        checkpoint: Checkpoint {
            model: outcome.model,
            standardization: Some(prepared.standardization.clone()),
            feature_order: Some(prepared.feature_order.clone()),
            train_seed: cfg.train.seed,
            epochs,
        },
        prepared,
        model_config,
        history: outcome.history,
        selected: outcome.selected,
        restart_losses: outcome.restart_losses,
    })
}

/// Follow-up pairs of the given rows, or `None` when there are none.
pub fn followup_pairs(ds: &Dataset) -> Result<Option<PairedData>> {
    let (p, _) = ds.pairs()?;
    Ok((!p.is_empty()).then_some(p))
}
