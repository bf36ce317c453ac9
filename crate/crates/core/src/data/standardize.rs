use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::pearson;
use crate::tensor::Tensor;

/// Per-feature affine map `z = sign · (x − mean) / std`, frozen from a
/// training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_names: Vec<String>,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    /// `-1` for monotone features that decrease with age on the training
    /// split.
    pub sign: Vec<f64>,
}

impl Standardization {
    pub fn identity(feature_names: Vec<String>) -> Self {
        let d = feature_names.len();
        Self {
            feature_names,
            mean: vec![0.0; d],
            std: vec![1.0; d],
            sign: vec![1.0; d],
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.dims2("standardize")?.1 != self.mean.len() {
            return Err(Error::Data(format!(
                "{} columns, standardization record has {}",
                x.cols(),
                self.mean.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.mean.len();
        let mut out = x.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = self.sign[j] * (*v - self.mean[j]) / self.std[j];
        }
        Ok(out)
    }

    /// Maps standardized values back to original units and signs.
    pub fn invert(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.mean.len();
        let mut out = z.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v = self.sign[j] * *v * self.std[j] + self.mean[j];
        }
        Ok(out)
    }

    /// Converts standardized differences back to original units.
    pub fn invert_delta(&self, dz: &Tensor) -> Result<Tensor> {
        self.check(dz)?;
        let d = self.mean.len();
        let mut out = dz.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *v *= self.sign[j] * self.std[j];
        }
        Ok(out)
    }
}

/// Fits the record on `train_rows` and applies it to every row.
pub fn standardize_and_orient(ds: &Dataset, train_rows: &[usize]) -> Result<(Dataset, Standardization)> {
    if train_rows.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let d = ds.d();
    let train_ages: Vec<f64> = train_rows.iter().map(|&i| ds.ages[i]).collect();
    let mut rec = Standardization::identity(ds.feature_names.clone());
    for j in 0..d {
        let col: Vec<f64> = train_rows.iter().map(|&i| ds.x.get(i, j)).collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Data(format!(
                "feature `{}` has zero variance on the training split",
                ds.feature_names[j]
            )));
        }
        rec.mean[j] = mean;
        rec.std[j] = std;
        if ds.monotone[j] && pearson(&col, &train_ages).is_some_and(|c| c < 0.0) {
            rec.sign[j] = -1.0;
        }
    }
    let out = Dataset {
        x: rec.apply(&ds.x)?,
        ..ds.clone()
    };
    Ok((out, rec))
}

/// Monotone features whose correlation with age on `ds` is weaker than
/// `min_abs_corr` in magnitude, with that correlation.
pub fn ambiguous_features(ds: &Dataset, min_abs_corr: f64) -> Vec<(String, f64)> {
    (0..ds.d())
        .filter(|&j| ds.monotone[j])
        .filter_map(|j| {
            let c = pearson(&ds.x.col(j), &ds.ages).unwrap_or(0.0);
            (c.abs() < min_abs_corr).then(|| (ds.feature_names[j].clone(), c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cohort(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ages: Vec<f64> = (0..n).map(|_| rng.random_range(40.0..70.0)).collect();
        let mut data = Vec::new();
        for a in &ages {
            data.push(0.1 * a + rng.random_range(-1.0..1.0));
            data.push(-a + rng.random_range(-1.0..1.0));
            data.push(rng.random_range(-1.0..1.0));
        }
        Dataset::new(
            (0..n).map(|i| i.to_string()).collect(),
            vec![0; n],
            ages,
            Tensor::matrix(n, 3, data).unwrap(),
            vec!["up".into(), "down".into(), "noise".into()],
            vec![true, true, false],
        )
        .unwrap()
    }

    #[test]
    fn signs_follow_age_correlation() {
        let ds = cohort(500);
        let rows: Vec<usize> = (0..500).collect();
        let (z, rec) = standardize_and_orient(&ds, &rows).unwrap();
        assert_eq!(rec.sign, vec![1.0, -1.0, 1.0]);
        for j in 0..3 {
            let col = z.x.col(j);
            let m = col.iter().sum::<f64>() / 500.0;
            let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 500.0).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        assert!(pearson(&z.x.col(1), &z.ages).unwrap() > 0.0);
    }

    #[test]
    fn held_out_round_trip() {
        let ds = cohort(300);
        let train: Vec<usize> = (0..200).collect();
        let (z, rec) = standardize_and_orient(&ds, &train).unwrap();
        let back = rec.invert(&z.x).unwrap();
        for (a, b) in back.data().iter().zip(ds.x.data()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn zero_variance_named() {
        let mut ds = cohort(10);
        for i in 0..10 {
            ds.x.set(i, 2, 5.0);
        }
        let rows: Vec<usize> = (0..10).collect();
        let err = standardize_and_orient(&ds, &rows).unwrap_err();
        assert!(err.to_string().contains("noise"));
    }

    #[test]
    fn idempotent_on_standardized_data() {
        let ds = cohort(400);
        let rows: Vec<usize> = (0..400).collect();
        let (z, _) = standardize_and_orient(&ds, &rows).unwrap();
        let (_, rec) = standardize_and_orient(&z, &rows).unwrap();
        for j in 0..3 {
            assert!(rec.mean[j].abs() < 1e-12);
            assert!((rec.std[j] - 1.0).abs() < 1e-12);
            assert_eq!(rec.sign[j], 1.0);
        }
    }

    #[test]
    fn ambiguity_flags_flat_monotone_features() {
        let mut ds = cohort(2000);
        ds.monotone = vec![true, true, true];
        let flagged = ambiguous_features(&ds, 0.05);
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].0, "noise");
    }
}
