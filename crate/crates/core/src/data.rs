//! Regression datasets: CSV ingestion, seeded splits, train-statistics
//! standardization, round-robin sharding and a synthetic linear generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AftoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    /// Standardized feature rows.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Input noise level of the noisy test variant, in standardized units.
    pub noise_sigma: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

/// Rows and targets of one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub x_val: Vec<Vec<f64>>,
    pub y_val: Vec<f64>,
}

impl RegressionDataset {
    /// Shuffles with `seed`, splits by `ratios` (train, val, test) and
    /// standardizes every split with the training moments.
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
        ratios: [f64; 3],
        seed: u64,
        noise_sigma: f64,
    ) -> Result<Self> {
        let n = rows.len();
        if targets.len() != n {
            return Err(AftoError::Data(format!("{n} rows but {} targets", targets.len())));
        }
        let width = rows.first().map_or(0, Vec::len);
        if width == 0 {
            return Err(AftoError::Data("dataset has no feature columns".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != width) {
            return Err(AftoError::Data(format!(
                "row {i} has {} features, expected {width}",
                rows[i].len()
            )));
        }
        if rows.iter().flatten().chain(&targets).any(|v| !v.is_finite()) {
            return Err(AftoError::Data("dataset contains non-finite values".into()));
        }
        if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AftoError::Data(format!(
                "split ratios {ratios:?} must be nonnegative and sum to 1"
            )));
        }
        if !(noise_sigma >= 0.0) {
            return Err(AftoError::Data("noise_sigma must be nonnegative".into()));
        }
        let n_train = (ratios[0] * n as f64).round() as usize;
        let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
        let n_test = n.saturating_sub(n_train + n_val);
        let wanted = |r: f64, got: usize| r > 0.0 && got == 0;
        if n_train < 2 || wanted(ratios[1], n_val) || wanted(ratios[2], n_test) {
            return Err(AftoError::Data(format!(
                "{n} rows are too few for split ratios {ratios:?}"
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let train = order[..n_train].to_vec();
        let val = order[n_train..n_train + n_val].to_vec();
        let test = order[n_train + n_val..].to_vec();

        let mut mean = vec![0.0; width];
        for &i in &train {
            for (m, v) in mean.iter_mut().zip(&rows[i]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_train as f64);
        let mut std = vec![0.0; width];
        for &i in &train {
            for (k, v) in rows[i].iter().enumerate() {
                std[k] += (v - mean[k]).powi(2);
            }
        }
        // constant columns are centred but left unscaled
        std.iter_mut()
            .for_each(|s| *s = if *s > 0.0 { (*s / n_train as f64).sqrt() } else { 1.0 });
        let x = rows
            .into_iter()
            .map(|r| r.iter().enumerate().map(|(k, v)| (v - mean[k]) / std[k]).collect())
            .collect();

        Ok(RegressionDataset {
            x,
            y: targets,
            train,
            val,
            test,
            noise_sigma,
            feature_mean: mean,
            feature_std: std,
        })
    }

    pub fn features(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| self.x[i].clone()).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }

    /// IID round-robin sharding of the (already shuffled) train and
    /// validation orders across `n` workers.
    pub fn shards(&self, n: usize) -> Result<Vec<Shard>> {
        if n == 0 || self.train.len() < n || self.val.len() < n {
            return Err(AftoError::Data(format!(
                "cannot shard {} train / {} validation rows across {n} workers",
                self.train.len(),
                self.val.len()
            )));
        }
        let pick = |idx: &[usize], j: usize| -> Vec<usize> { idx.iter().copied().skip(j).step_by(n).collect() };
        Ok((0..n)
            .map(|j| {
                let (x_train, y_train) = self.rows(&pick(&self.train, j));
                let (x_val, y_val) = self.rows(&pick(&self.val, j));
                Shard {
                    x_train,
                    y_train,
                    x_val,
                    y_val,
                }
            })
            .collect())
    }

    pub fn test_clean(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.rows(&self.test)
    }

    /// Test inputs with seeded Gaussian noise of level `noise_sigma`.
    pub fn test_noisy(&self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (mut x, y) = self.test_clean();
        if self.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, self.noise_sigma).expect("sigma checked at construction");
            for v in x.iter_mut().flatten() {
                *v += normal.sample(&mut rng);
            }
        }
        (x, y)
    }
}

/// Reads a comma-separated file whose last column is the target. A first
/// row that does not parse as numbers is taken as a header.
pub fn load_dataset(
    path: impl AsRef<Path>,
    ratios: [f64; 3],
    seed: u64,
    noise_sigma: f64,
) -> Result<RegressionDataset> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let (rows, targets) = parse_csv(&text)?;
    RegressionDataset::from_rows(rows, targets, ratios, seed, noise_sigma)
}

pub fn parse_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| AftoError::Data(format!("csv: {e}")))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if i == 0 && parsed.iter().any(|p| p.is_err()) {
            continue;
        }
        let mut vals = Vec::with_capacity(parsed.len());
        for (col, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(v) => vals.push(v),
                Err(_) => {
                    return Err(AftoError::Data(format!(
                        "non-numeric cell {:?} at row {}, column {}",
                        &rec[col],
                        i + 1,
                        col + 1
                    )))
                }
            }
        }
        if vals.len() < 2 {
            return Err(AftoError::Data(format!("row {} needs a feature and a target", i + 1)));
        }
        targets.push(vals.pop().expect("length checked"));
        rows.push(vals);
    }
    Ok((rows, targets))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub features: usize,
    /// Standard deviation of the target noise.
    pub target_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 200,
            features: 3,
            target_noise: 0.1,
            seed: 0,
        }
    }
}

/// `y = x . beta + noise` with standard-normal inputs and a unit-norm `beta`.
pub fn synthetic_linear(spec: &SyntheticSpec) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut beta: Vec<f64> = (0..spec.features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
    beta.iter_mut().for_each(|b| *b /= norm);
    let mut rows = Vec::with_capacity(spec.rows);
    let mut y = Vec::with_capacity(spec.rows);
    for _ in 0..spec.rows {
        let r: Vec<f64> = (0..spec.features).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e: f64 = StandardNormal.sample(&mut rng);
        y.push(r.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + spec.target_noise * e);
        rows.push(r);
    }
    (rows, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows = (0..10).map(|i| vec![i as f64, (i * i) as f64 % 7.0]).collect();
        let y = (0..10).map(|i| 2.0 * i as f64).collect();
        (rows, y)
    }

    #[test]
    fn toy_split_sizes_and_seed() {
        let (r, y) = toy();
        let a = RegressionDataset::from_rows(r.clone(), y.clone(), [0.6, 0.2, 0.2], 5, 0.1).unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (6, 2, 2));
        let b = RegressionDataset::from_rows(r.clone(), y.clone(), [0.6, 0.2, 0.2], 5, 0.1).unwrap();
        assert_eq!(a, b);
        let c = RegressionDataset::from_rows(r, y, [0.6, 0.2, 0.2], 6, 0.1).unwrap();
        assert_ne!(a.train, c.train);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_pinned() {
        let (r, y) = toy();
        let a = RegressionDataset::from_rows(r, y, [0.6, 0.2, 0.2], 5, 0.1).unwrap();
        assert_eq!(a.train, vec![0, 7, 8, 2, 6, 9]);
        assert_eq!(a.val, vec![4, 5]);
        assert_eq!(a.test, vec![3, 1]);
    }

    #[test]
    fn train_moments_are_standard() {
        let (r, y) = synthetic_linear(&SyntheticSpec {
            rows: 57,
            features: 4,
            ..SyntheticSpec::default()
        });
        let shifted: Vec<Vec<f64>> = r
            .iter()
            .map(|row| row.iter().map(|v| 3.0 * v + 7.0).collect())
            .collect();
        let d = RegressionDataset::from_rows(shifted, y, [0.5, 0.25, 0.25], 1, 0.1).unwrap();
        for k in 0..4 {
            let col: Vec<f64> = d.train.iter().map(|&i| d.x[i][k]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(m.abs() <= 1e-10);
            assert!((v - 1.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn csv_header_and_errors() {
        let (r, y) = parse_csv("a,b,target\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(r, vec![vec![1.0, 2.0], vec![4.0, 5.0]]);
        assert_eq!(y, vec![3.0, 6.0]);
        let (r, _) = parse_csv("1,2,3\n4,5,6\n").unwrap();
        assert_eq!(r.len(), 2);
        let err = parse_csv("1,2,3\n4,x,6\n").unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 2"), "{err}");
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert!(RegressionDataset::from_rows(rows, vec![1.0, 2.0, 3.0], [0.6, 0.2, 0.2], 0, 0.1).is_err());
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let (r, y) = toy();
        let body: String = r
            .iter()
            .zip(&y)
            .map(|(row, t)| format!("{},{},{}\n", row[0], row[1], t))
            .collect();
        std::fs::write(&path, body).unwrap();
        let d = load_dataset(&path, [0.6, 0.2, 0.2], 5, 0.1).unwrap();
        let (r2, y2) = toy();
        assert_eq!(
            d,
            RegressionDataset::from_rows(r2, y2, [0.6, 0.2, 0.2], 5, 0.1).unwrap()
        );
    }

    #[test]
    fn shards_cover_splits() {
        let (r, y) = synthetic_linear(&SyntheticSpec::default());
        let d = RegressionDataset::from_rows(r, y, [0.5, 0.25, 0.25], 2, 0.1).unwrap();
        let s = d.shards(4).unwrap();
        assert_eq!(s.iter().map(|w| w.y_train.len()).sum::<usize>(), d.train.len());
        assert_eq!(s.iter().map(|w| w.y_val.len()).sum::<usize>(), d.val.len());
        assert!(d.shards(0).is_err());
    }

    #[test]
    fn zero_sigma_noisy_equals_clean() {
        let (r, y) = synthetic_linear(&SyntheticSpec::default());
        let d = RegressionDataset::from_rows(r, y, [0.5, 0.25, 0.25], 2, 0.0).unwrap();
        assert_eq!(d.test_noisy(4), d.test_clean());
    }
}
