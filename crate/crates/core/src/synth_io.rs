//! Synthetic data generation, CSV ingestion and mini-batch subsampling.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Family, MiniBatch};
use crate::error::{Error, Result};
use crate::gradients::sigmoid;
use crate::rng::{RngStream, Stream};

/// Rejection attempts allowed per row when balancing logistic classes.
const BALANCE_ATTEMPTS_PER_ROW: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rows: usize,
    pub features: usize,
    pub family: Family,
    /// Nonzero coefficients keyed by feature index in `1..=features`.
    pub true_coefficients: BTreeMap<usize, f64>,
    pub correlation: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// β1..β5 = 1, β6..β8 = -1, everything else 0.
    pub fn standard_truth() -> BTreeMap<usize, f64> {
        (1..=8).map(|j| (j, if j <= 5 { 1.0 } else { -1.0 })).collect()
    }

    /// Standard truth restricted to the first `features` positions.
    pub fn linear(rows: usize, features: usize, seed: u64) -> Self {
        Self {
            rows,
            features,
            family: Family::Linear { noise_variance: 1.0 },
            true_coefficients: Self::standard_truth()
                .into_iter()
                .filter(|&(j, _)| j <= features)
                .collect(),
            correlation: 0.5,
            seed,
        }
    }

    pub fn logistic(rows: usize, features: usize, seed: u64) -> Self {
        Self {
            family: Family::Logistic,
            ..Self::linear(rows, features, seed)
        }
    }

    /// True coefficient vector of length p+1 (intercept 0).
    pub fn true_beta(&self) -> Vec<f64> {
        let mut beta = vec![0.0; self.features + 1];
        for (&j, &b) in &self.true_coefficients {
            beta[j] = b;
        }
        beta
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::param("correlation", "must lie in [0, 1)"));
        }
        if self.rows == 0 || self.features == 0 {
            return Err(Error::param("rows", "rows and features must be positive"));
        }
        if let Some((&j, _)) = self
            .true_coefficients
            .iter()
            .find(|(&j, _)| j == 0 || j > self.features)
        {
            return Err(Error::param(
                "true_coefficients",
                format!("index {j} outside 1..={}", self.features),
            ));
        }
        if let Family::Linear { noise_variance } = self.family {
            if !(noise_variance > 0.0) {
                return Err(Error::param("noise_variance", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Draws one row of equicorrelated standard normals:
/// z_i = √ρ w0 + √(1-ρ) w_i.
fn draw_features(rng: &mut RngStream, p: usize, rho: f64, out: &mut [f64]) {
    let shared: f64 = rng.sample(StandardNormal);
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    for z in out.iter_mut().take(p) {
        let own: f64 = rng.sample(StandardNormal);
        *z = a * shared + b * own;
    }
}

fn linear_predictor(z: &[f64], beta: &BTreeMap<usize, f64>) -> f64 {
    beta.iter().map(|(&j, &b)| b * z[j - 1]).sum()
}

pub fn generate_linear(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let Family::Linear { noise_variance } = config.family else {
        return Err(Error::param("family", "generate_linear requires the linear family"));
    };
    let (n, p) = (config.rows, config.features);
    let mut rng = RngStream::named(config.seed, Stream::DataGeneration);
    let mut features = vec![0.0; n * p];
    let mut response = Vec::with_capacity(n);
    let sd = noise_variance.sqrt();
    for r in 0..n {
        let row = &mut features[r * p..(r + 1) * p];
        draw_features(&mut rng, p, config.correlation, row);
        let eps: f64 = rng.sample(StandardNormal);
        response.push(linear_predictor(row, &config.true_coefficients) + sd * eps);
    }
    Dataset::from_features(&features, n, p, response, config.family, None)
}

/// Logistic data with exactly ⌊N/2⌋ ones. Rows whose class is already full
/// are redrawn whole (features and response).
pub fn generate_logistic(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    if !config.family.is_logistic() {
        return Err(Error::param("family", "generate_logistic requires the logistic family"));
    }
    let (n, p) = (config.rows, config.features);
    let mut rng = RngStream::named(config.seed, Stream::DataGeneration);
    let target_ones = n / 2;
    let target_zeros = n - target_ones;
    let (mut ones, mut zeros) = (0usize, 0usize);
    let mut features = vec![0.0; n * p];
    let mut response = Vec::with_capacity(n);
    let mut scratch = vec![0.0; p];
    let cap = BALANCE_ATTEMPTS_PER_ROW * n;
    let mut attempts = 0usize;
    while response.len() < n {
        attempts += 1;
        if attempts > cap {
            return Err(Error::Contract(format!(
                "class balancing exceeded {cap} row draws ({ones} ones, {zeros} zeros)"
            )));
        }
        draw_features(&mut rng, p, config.correlation, &mut scratch);
        let eta = linear_predictor(&scratch, &config.true_coefficients);
        let y = if rng.random::<f64>() < sigmoid(eta) { 1.0 } else { 0.0 };
        let accept = if y == 1.0 {
            ones < target_ones
        } else {
            zeros < target_zeros
        };
        if !accept {
            continue;
        }
        if y == 1.0 {
            ones += 1;
        } else {
            zeros += 1;
        }
        let r = response.len();
        features[r * p..(r + 1) * p].copy_from_slice(&scratch);
        response.push(y);
    }
    Dataset::from_features(&features, n, p, response, config.family, None)
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    match config.family {
        Family::Linear { .. } => generate_linear(config),
        Family::Logistic => generate_logistic(config),
    }
}

/// Options for [`load_csv`]. The family comes from configuration, never from the data.
#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub response_column: String,
    pub family: Family,
}

/// Reads a headered CSV; every column except the response becomes a feature,
/// in file order. Row numbers in errors are 1-based file lines.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let response_idx = headers
        .iter()
        .position(|h| *h == options.response_column)
        .ok_or_else(|| Error::Parse {
            row: 1,
            column: options.response_column.clone(),
            reason: "response column not found in header".into(),
        })?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != response_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let p = names.len();
    let mut features = Vec::new();
    let mut response = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row: line,
                column: headers[i].clone(),
                reason: format!("`{cell}` is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: headers[i].clone(),
                    reason: format!("`{cell}` is not finite"),
                });
            }
            if i == response_idx {
                response.push(value);
            } else {
                features.push(value);
            }
        }
    }
    let rows = response.len();
    Dataset::from_features(&features, rows, p, response, options.family, Some(names))
}

/// Writes features (without the intercept) and the response. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, response_column: &str) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    let mut line = String::new();
    for name in dataset.feature_names() {
        line.push_str(name);
        line.push(',');
    }
    line.push_str(response_column);
    writeln!(out, "{line}").map_err(io_err)?;
    for r in 0..dataset.rows() {
        line.clear();
        for v in &dataset.row(r)[1..] {
            line.push_str(&v.to_string());
            line.push(',');
        }
        line.push_str(&dataset.response()[r].to_string());
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Draws `n` distinct rows uniformly at random.
pub fn subsample(dataset: &Dataset, n: usize, rng: &mut RngStream) -> Result<MiniBatch> {
    subsample_rows(dataset.rows(), n, rng)
}

pub fn subsample_rows(total: usize, n: usize, rng: &mut RngStream) -> Result<MiniBatch> {
    if n == 0 || n > total {
        return Err(Error::param("n", format!("subsample size {n} must lie in 1..={total}")));
    }
    let indices = rand::seq::index::sample(rng, total, n).into_vec();
    MiniBatch::new(indices, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn independent_columns_when_rho_zero() {
        let mut cfg = SynthConfig::linear(2000, 4, 11);
        cfg.correlation = 0.0;
        let ds = generate_linear(&cfg).unwrap();
        let tol = 3.0 / (2000f64).sqrt();
        for i in 1..=4 {
            for j in (i + 1)..=4 {
                assert!(corr(&ds.column(i), &ds.column(j)).abs() < tol);
            }
        }
    }

    #[test]
    fn equicorrelated_columns() {
        let cfg = SynthConfig::linear(50_000, 4, 5);
        let ds = generate_linear(&cfg).unwrap();
        for i in 1..=4 {
            for j in (i + 1)..=4 {
                let c = corr(&ds.column(i), &ds.column(j));
                assert!((c - 0.5).abs() < 0.02, "corr({i},{j}) = {c}");
            }
        }
    }

    #[test]
    fn population_covariance_within_three_standard_errors() {
        // Var(z_i) = 1 and Cov(z_i, z_j) = ρ; the sample covariance of
        // bivariate normals has variance (σ_ii σ_jj + σ_ij²)/N.
        let n = 20_000;
        let cfg = SynthConfig::linear(n, 3, 17);
        let ds = generate_linear(&cfg).unwrap();
        let cols: Vec<Vec<f64>> = (1..=3).map(|j| ds.column(j)).collect();
        for i in 0..3 {
            for j in i..3 {
                let cov = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                let target = if i == j { 1.0 } else { 0.5 };
                let se = ((1.0 + target * target) / n as f64).sqrt();
                assert!((cov - target).abs() < 3.0 * se, "cov({i},{j}) = {cov}");
            }
        }
    }

    #[test]
    fn linear_truth_layout() {
        let cfg = SynthConfig::linear(10, 12, 1);
        let beta = cfg.true_beta();
        assert_eq!(&beta[..10], &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn invalid_correlation_rejected() {
        let mut cfg = SynthConfig::linear(10, 3, 1);
        cfg.correlation = 1.0;
        assert!(matches!(generate_linear(&cfg), Err(Error::Parameter { .. })));
        cfg.correlation = -0.1;
        assert!(generate_linear(&cfg).is_err());
    }

    #[test]
    fn logistic_is_exactly_balanced() {
        let cfg = SynthConfig::logistic(2000, 20, 9);
        let ds = generate_logistic(&cfg).unwrap();
        let ones = ds.response().iter().filter(|&&y| y == 1.0).count();
        assert_eq!(ones, 1000);
    }

    #[test]
    fn logistic_null_truth_is_balanced_in_expectation() {
        // With β = 0 every draw is a fair coin, so balancing rarely rejects.
        let mut cfg = SynthConfig::logistic(4000, 5, 2);
        cfg.true_coefficients.clear();
        let ds = generate_logistic(&cfg).unwrap();
        let ratio = ds.response().iter().sum::<f64>() / 4000.0;
        assert!((ratio - 0.5).abs() < 0.02);
    }

    #[test]
    fn logistic_extreme_coefficients_stay_finite() {
        let mut cfg = SynthConfig::logistic(500, 10, 4);
        for v in cfg.true_coefficients.values_mut() {
            *v *= 100.0;
        }
        let ds = generate_logistic(&cfg).unwrap();
        assert!(ds.design().iter().all(|v| v.is_finite()));
        assert_eq!(ds.response().iter().filter(|&&y| y == 1.0).count(), 250);
    }

    #[test]
    fn csv_small_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,y,b\n1,0.5,2\n3,1.5,4\n5,2.5,6\n").unwrap();
        let opts = CsvOptions {
            response_column: "y".into(),
            family: Family::Linear { noise_variance: 1.0 },
        };
        let ds = load_csv(&path, &opts).unwrap();
        assert_eq!((ds.rows(), ds.features(), ds.dim()), (3, 2, 3));
        assert_eq!(ds.row(2), &[1.0, 5.0, 6.0]);
        assert_eq!(ds.response(), &[0.5, 1.5, 2.5]);
        assert_eq!(ds.feature_names(), &["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn csv_errors_name_the_cell() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CsvOptions {
            response_column: "y".into(),
            family: Family::Linear { noise_variance: 1.0 },
        };
        let path = dir.path().join("na.csv");
        std::fs::write(&path, "a,y\n1,2\nNA,3\n").unwrap();
        match load_csv(&path, &opts) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "a");
            }
            other => panic!("unexpected {other:?}"),
        }
        let path = dir.path().join("ragged.csv");
        std::fs::write(&path, "a,y\n1,2\n1,2,3\n").unwrap();
        assert!(matches!(load_csv(&path, &opts), Err(Error::Parse { row: 3, .. })));
        let path = dir.path().join("noresp.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&path, &opts), Err(Error::Parse { .. })));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.csv");
        let cfg = SynthConfig::linear(200, 7, 99);
        let ds = generate_linear(&cfg).unwrap();
        write_csv(&ds, &path, "y").unwrap();
        let back = load_csv(
            &path,
            &CsvOptions {
                response_column: "y".into(),
                family: cfg.family,
            },
        )
        .unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn full_subsample_is_permutation() {
        let mut rng = RngStream::named(1, Stream::Subsampling);
        let b = subsample_rows(50, 50, &mut rng).unwrap();
        let mut idx = b.indices().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
        assert_eq!(b.replication_factor(), 1.0);
    }

    #[test]
    fn subsample_is_deterministic() {
        let mut a = RngStream::named(3, Stream::Subsampling);
        let mut b = a.clone();
        assert_eq!(
            subsample_rows(1000, 20, &mut a).unwrap(),
            subsample_rows(1000, 20, &mut b).unwrap()
        );
    }

    #[test]
    fn subsample_is_uniform() {
        let mut rng = RngStream::named(8, Stream::Subsampling);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            for &i in subsample_rows(10, 2, &mut rng).unwrap().indices() {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.02, "freq {freq}");
        }
    }

    #[test]
    fn subsample_rejects_oversized_batch() {
        let mut rng = RngStream::named(1, Stream::Subsampling);
        assert!(matches!(subsample_rows(5, 6, &mut rng), Err(Error::Parameter { .. })));
        assert!(subsample_rows(5, 0, &mut rng).is_err());
    }
}
