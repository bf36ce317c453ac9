//! Datasets, preprocessing and persistence.

mod checkpoint;
mod config;
mod csv_io;
mod standardize;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use config::{DataConfig, RunConfig};
pub use csv_io::{load_csv, read_csv, write_csv, Schema};
pub use standardize::{ambiguous_features, standardize_and_orient, Standardization};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elbo::PairedData;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observations keyed by `(id, visit)`. Visit 0 is the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub visits: Vec<u32>,
    /// Years.
    pub ages: Vec<f64>,
    /// `[n, d]`
    pub x: Tensor,
    pub feature_names: Vec<String>,
    pub monotone: Vec<bool>,
    /// Rows rejected during ingestion.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        visits: Vec<u32>,
        ages: Vec<f64>,
        x: Tensor,
        feature_names: Vec<String>,
        monotone: Vec<bool>,
    ) -> Result<Self> {
        let (n, d) = x.dims2("dataset")?;
        if ids.len() != n || visits.len() != n || ages.len() != n {
            return Err(Error::Data(format!(
                "{} ids, {} visits and {} ages for {n} rows",
                ids.len(),
                visits.len(),
                ages.len()
            )));
        }
        if feature_names.len() != d || monotone.len() != d {
            return Err(Error::Data(format!(
                "{} names and {} monotone flags for {d} features",
                feature_names.len(),
                monotone.len()
            )));
        }
        let ds = Self {
            ids,
            visits,
            ages,
            x,
            feature_names,
            monotone,
            dropped_rows: 0,
        };
        ds.check_unique_keys()?;
        Ok(ds)
    }

    fn check_unique_keys(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (id, v) in self.ids.iter().zip(&self.visits) {
            if !seen.insert((id.as_str(), *v)) {
                return Err(Error::Data(format!("duplicate row for id {id}, visit {v}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    pub fn d(&self) -> usize {
        self.feature_names.len()
    }

    pub fn d_mono(&self) -> usize {
        self.monotone.iter().filter(|m| **m).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            visits: rows.iter().map(|&i| self.visits[i]).collect(),
            ages: rows.iter().map(|&i| self.ages[i]).collect(),
            x: self.x.select_rows(rows)?,
            feature_names: self.feature_names.clone(),
            monotone: self.monotone.clone(),
            dropped_rows: self.dropped_rows,
        })
    }

    /// Rows with visit 0.
    pub fn baseline(&self) -> Result<Self> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.visits[i] == 0).collect();
        self.select_rows(&rows)
    }

    /// Pairs each baseline row with the same id's earliest later visit.
    /// Returns the pairs and their ids.
    pub fn pairs(&self) -> Result<(PairedData, Vec<String>)> {
        let mut base: BTreeMap<&str, usize> = BTreeMap::new();
        let mut follow: BTreeMap<&str, usize> = BTreeMap::new();
        for i in 0..self.len() {
            let id = self.ids[i].as_str();
            if self.visits[i] == 0 {
                base.insert(id, i);
            } else {
                let e = follow.entry(id).or_insert(i);
                if self.visits[i] < self.visits[*e] {
                    *e = i;
                }
            }
        }
        let mut r0 = Vec::new();
        let mut r1 = Vec::new();
        let mut ids = Vec::new();
        for (id, &i) in &base {
            if let Some(&j) = follow.get(id) {
                r0.push(i);
                r1.push(j);
                ids.push(id.to_string());
            }
        }
        let pd = PairedData {
            x0: self.x.select_rows(&r0)?,
            ages0: r0.iter().map(|&i| self.ages[i]).collect(),
            x1: self.x.select_rows(&r1)?,
            ages1: r1.iter().map(|&i| self.ages[i]).collect(),
        };
        Ok((pd, ids))
    }

    /// Permutes features so monotone ones come first, keeping relative
    /// order within each group. Returns the dataset and, for each new
    /// column, its original index.
    pub fn monotone_first(&self) -> Result<(Self, Vec<usize>)> {
        let mut order: Vec<usize> = (0..self.d()).filter(|&j| self.monotone[j]).collect();
        order.extend((0..self.d()).filter(|&j| !self.monotone[j]));
        let cols: Vec<Tensor> = order
            .iter()
            .map(|&j| self.x.slice_cols(j, j + 1))
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&Tensor> = cols.iter().collect();
        let x = if refs.is_empty() {
            self.x.clone()
        } else {
            Tensor::concat_cols(&refs)?
        };
        Ok((
            Self {
                x,
                feature_names: order.iter().map(|&j| self.feature_names[j].clone()).collect(),
                monotone: order.iter().map(|&j| self.monotone[j]).collect(),
                ..self.clone()
            },
            order,
        ))
    }

    /// Splits rows by id so all visits of an individual land on the same
    /// side. Returns `(train_rows, test_rows)`.
    pub fn split_by_id(&self, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Domain(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut unique: Vec<&str> = self.ids.iter().map(String::as_str).collect();
        unique.sort_unstable();
        unique.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unique.shuffle(&mut rng);
        let cut = (train_fraction * unique.len() as f64).round() as usize;
        let train: std::collections::HashSet<&str> = unique[..cut].iter().copied().collect();
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if train.contains(self.ids[i].as_str()) {
                tr.push(i);
            } else {
                te.push(i);
            }
        }
        Ok((tr, te))
    }
}
