//! Datasets: synthetic generators, outlier injection, CSV I/O and seeded
//! train/calibration/test splits.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, Gaussian};

pub const MIN_GENERATED_ROWS: usize = 10;

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub details: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Matrix,
    pub targets: Matrix,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub provenance: Provenance,
    /// Mixture component of each row, kept for generated data only.
    pub components: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Matrix,
        targets: Matrix,
        provenance: Provenance,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            feature_names: (0..features.cols()).map(|j| format!("x{j}")).collect(),
            target_names: (0..targets.cols()).map(|j| format!("y{j}")).collect(),
            features,
            targets,
            provenance,
            components: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.targets.rows() {
            return Err(Error::Data(format!(
                "{} feature rows but {} target rows",
                self.features.rows(),
                self.targets.rows()
            )));
        }
        if self.targets.rows() == 0 {
            return Err(Error::Data(format!("dataset '{}' is empty", self.name)));
        }
        if !(1..=2).contains(&self.targets.cols()) {
            return Err(Error::Data(format!(
                "target dimension {} is not supported (only 1 or 2)",
                self.targets.cols()
            )));
        }
        if self.features.cols() == 0 {
            return Err(Error::Data("dataset has no feature columns".into()));
        }
        if !self.features.all_finite() || !self.targets.all_finite() {
            return Err(Error::Data(format!(
                "dataset '{}' contains NaN or infinite values",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.rows() == 0
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            features: self.features.select_rows(indices),
            targets: self.targets.select_rows(indices),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            provenance: self.provenance.clone(),
            components: self
                .components
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// How to read the second parameter of the 1D mixture components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadReading {
    #[default]
    Variance,
    StdDev,
}

pub const UNCOND1D_MEANS: [f64; 2] = [0.75, -0.75];
pub const UNCOND1D_SPREAD: f64 = 0.05;

pub const UNCOND2D_MEANS: [[f64; 2]; 3] = [[0.0, 0.0], [3.0, 3.0], [-3.0, -4.0]];
pub const UNCOND2D_COVS: [[[f64; 2]; 2]; 3] = [
    [[1.0, 0.0], [0.0, 1.0]],
    [[0.5, 0.2], [0.2, 0.5]],
    [[0.7, -0.2], [-0.2, 0.5]],
];

/// Far-away components used for outlier injection (identity covariance).
pub const OUTLIER_MEANS: [[f64; 2]; 2] = [[8.0, -8.0], [-8.0, 8.0]];

fn check_size(n: usize) -> Result<()> {
    if n < MIN_GENERATED_ROWS {
        return Err(Error::Config(format!(
            "generated datasets need at least {MIN_GENERATED_ROWS} rows, got {n}"
        )));
    }
    Ok(())
}

fn constant_features(n: usize) -> Matrix {
    Matrix::zeros(n, 1)
}

/// Equal mixture of N(0.75, s) and N(-0.75, s), constant-zero feature.
pub fn gen_uncond1d(n: usize, seed: u64) -> Result<Dataset> {
    gen_uncond1d_with(n, seed, SpreadReading::Variance)
}

pub fn gen_uncond1d_with(n: usize, seed: u64, reading: SpreadReading) -> Result<Dataset> {
    check_size(n)?;
    let std = match reading {
        SpreadReading::Variance => UNCOND1D_SPREAD.sqrt(),
        SpreadReading::StdDev => UNCOND1D_SPREAD,
    };
    let mut r = rng::seeded(seed, rng::stream::DATA);
    let mut g = Gaussian::new();
    let mut targets = Vec::with_capacity(n);
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let c = usize::from(rand::Rng::random::<bool>(&mut r));
        components.push(c);
        targets.push(UNCOND1D_MEANS[c] + std * g.sample(&mut r));
    }
    let mut ds = Dataset::new(
        "uncond1d",
        constant_features(n),
        Matrix::from_vec(n, 1, targets)?,
        Provenance {
            source: "generator".into(),
            details: serde_json::json!({
                "generator": "uncond1d", "n": n, "seed": seed, "spread": reading,
                "rng": "chacha8+box-muller",
            }),
            notes: vec![],
        },
    )?;
    ds.components = Some(components);
    Ok(ds)
}

/// Lower Cholesky factor of a 2x2 symmetric matrix.
pub fn cholesky2(cov: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    if (cov[0][1] - cov[1][0]).abs() > 1e-12 {
        return Err(Error::Config(format!("covariance {cov:?} is not symmetric")));
    }
    let a = cov[0][0];
    if !(a > 0.0) {
        return Err(Error::Config(format!("covariance {cov:?} is not positive definite")));
    }
    let l00 = a.sqrt();
    let l10 = cov[1][0] / l00;
    let rest = cov[1][1] - l10 * l10;
    if !(rest > 0.0) {
        return Err(Error::Config(format!("covariance {cov:?} is not positive definite")));
    }
    Ok([[l00, 0.0], [l10, rest.sqrt()]])
}

fn sample_gaussian2<R: rand::Rng + ?Sized>(
    mean: &[f64; 2],
    chol: &[[f64; 2]; 2],
    g: &mut Gaussian,
    r: &mut R,
) -> [f64; 2] {
    let z0 = g.sample(r);
    let z1 = g.sample(r);
    [
        mean[0] + chol[0][0] * z0,
        mean[1] + chol[1][0] * z0 + chol[1][1] * z1,
    ]
}

/// Equal-weight three-component 2D Gaussian mixture, constant-zero feature.
pub fn gen_uncond2d(n: usize, seed: u64) -> Result<Dataset> {
    check_size(n)?;
    let chols = UNCOND2D_COVS
        .iter()
        .map(cholesky2)
        .collect::<Result<Vec<_>>>()?;
    let mut r = rng::seeded(seed, rng::stream::DATA);
    let mut g = Gaussian::new();
    let mut targets = Vec::with_capacity(2 * n);
    let mut components = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rand::Rng::random_range(&mut r, 0..3usize);
        components.push(c);
        targets.extend(sample_gaussian2(&UNCOND2D_MEANS[c], &chols[c], &mut g, &mut r));
    }
    let mut ds = Dataset::new(
        "uncond2d",
        constant_features(n),
        Matrix::from_vec(n, 2, targets)?,
        Provenance {
            source: "generator".into(),
            details: serde_json::json!({
                "generator": "uncond2d", "n": n, "seed": seed,
                "rng": "chacha8+box-muller",
            }),
            notes: vec![],
        },
    )?;
    ds.components = Some(components);
    Ok(ds)
}

/// Appends `n_per_component` draws from each of the two far components in
/// [`OUTLIER_MEANS`] and shuffles. Outlier rows carry component labels 3
/// and 4.
pub fn add_outliers(base: &Dataset, n_per_component: usize, seed: u64) -> Result<Dataset> {
    if base.target_dim() != 2 {
        return Err(Error::Data(format!(
            "outliers need a 2D target, dataset '{}' has {}",
            base.name,
            base.target_dim()
        )));
    }
    let mut out = base.clone();
    out.name = format!("{}+outliers{n_per_component}", base.name);
    out.provenance
        .notes
        .push(format!("outliers: {n_per_component} per component, seed {seed}"));
    if n_per_component == 0 {
        return Ok(out);
    }
    let chol = cholesky2(&[[1.0, 0.0], [0.0, 1.0]])?;
    let mut r = rng::seeded(seed, rng::stream::OUTLIERS);
    let mut g = Gaussian::new();
    let base_components = base
        .components
        .clone()
        .unwrap_or_else(|| vec![0; base.len()]);
    let mut targets = base.targets.clone();
    let mut components = base_components;
    let zero_features = vec![0.0; base.feature_dim()];
    let mut features = base.features.clone();
    for (k, mean) in OUTLIER_MEANS.iter().enumerate() {
        for _ in 0..n_per_component {
            targets.push_row(&sample_gaussian2(mean, &chol, &mut g, &mut r))?;
            features.push_row(&zero_features)?;
            components.push(3 + k);
        }
    }
    let perm = rng::permutation(targets.rows(), &mut r);
    out.targets = targets.select_rows(&perm);
    out.features = features.select_rows(&perm);
    out.components = Some(perm.iter().map(|&i| components[i]).collect());
    out.validate()?;
    Ok(out)
}

/// Reads a headed CSV. `feature_columns = None` uses every non-target column.
pub fn load_csv(
    path: &Path,
    target_columns: &[String],
    feature_columns: Option<&[String]>,
) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!("{}: missing column '{name}'", path.display()))
        })
    };
    if target_columns.is_empty() {
        return Err(Error::Config("no target columns given".into()));
    }
    let target_idx = target_columns
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let feature_names: Vec<String> = match feature_columns {
        Some(cols) => cols.to_vec(),
        None => headers
            .iter()
            .filter(|h| !target_columns.contains(h))
            .cloned()
            .collect(),
    };
    let feature_idx = feature_names
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = row_no + 2;
        let record =
            record.map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
        let parse = |i: usize| -> Result<f64> {
            let raw = record.get(i).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{line}: column '{}' value '{raw}' is not numeric",
                    path.display(),
                    headers[i]
                ))
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Data(format!(
                    "{}:{line}: column '{}' is not finite",
                    path.display(),
                    headers[i]
                )))
            }
        };
        for &i in &feature_idx {
            features.push(parse(i)?);
        }
        for &i in &target_idx {
            targets.push(parse(i)?);
        }
    }
    let n = targets.len() / target_idx.len();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let mut ds = Dataset::new(
        name,
        Matrix::from_vec(n, feature_idx.len(), features)?,
        Matrix::from_vec(n, target_idx.len(), targets)?,
        Provenance {
            source: "csv".into(),
            details: serde_json::json!({
                "path": path.display().to_string(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
                "targets": target_columns,
                "features": feature_names,
            }),
            notes: vec![],
        },
    )
    .map_err(|e| e.context(path.display().to_string()))?;
    ds.feature_names = feature_names;
    ds.target_names = target_columns.to_vec();
    Ok(ds)
}

/// CSV bytes: header of feature then target names, shortest round-trip floats.
pub fn to_csv_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    let header: Vec<&str> = ds
        .feature_names
        .iter()
        .chain(&ds.target_names)
        .map(String::as_str)
        .collect();
    writeln!(out, "{}", header.join(",")).unwrap();
    for i in 0..ds.len() {
        let row: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .chain(ds.targets.row(i))
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Writes `path` atomically through a temporary sibling.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `<path>` and a provenance sidecar `<path>.provenance.json`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = to_csv_bytes(ds);
    let sidecar = serde_json::json!({
        "name": ds.name,
        "rows": ds.len(),
        "features": ds.feature_names,
        "targets": ds.target_names,
        "provenance": ds.provenance,
        "sha256": hex::encode(Sha256::digest(&bytes)),
    });
    write_atomic(path, &bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".provenance.json");
    write_atomic(
        Path::new(&side),
        serde_json::to_string_pretty(&sidecar)?.as_bytes(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub cal: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn standard(seed: u64) -> Self {
        Self {
            train: 0.8,
            cal: 0.1,
            test: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.cal, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }

    /// `(floor(train N), floor(cal N), remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let cal = floor(self.cal).min(n - train);
        (train, cal, n - train - cal)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub cal_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.len();
    let (n_train, n_cal, n_test) = spec.sizes(n);
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "{n} rows give an empty split ({n_train}/{n_cal}/{n_test})"
        )));
    }
    let mut r = rng::seeded(spec.seed, rng::stream::SPLIT);
    let perm = rng::permutation(n, &mut r);
    let train_idx = perm[..n_train].to_vec();
    let cal_idx = perm[n_train..n_train + n_cal].to_vec();
    let test_idx = perm[n_train + n_cal..].to_vec();
    Ok(Splits {
        train: ds.subset(&train_idx, format!("{}-train", ds.name)),
        cal: ds.subset(&cal_idx, format!("{}-cal", ds.name)),
        test: ds.subset(&test_idx, format!("{}-test", ds.name)),
        train_idx,
        cal_idx,
        test_idx,
    })
}

/// Per-column z-scoring fitted on one split. Zero-variance columns keep
/// unit scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(m: &Matrix) -> Self {
        let n = m.rows().max(1) as f64;
        let mut mean = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m.cols()];
        for row in m.iter_rows() {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_all(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for i in 0..out.rows() {
            let z = self.apply(m.row(i));
            out.row_mut(i).copy_from_slice(&z);
        }
        out
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}
