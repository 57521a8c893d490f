//! Datasets, CSV input and output, the synthetic step function, model files
//! and run configuration.

pub mod config;
pub mod model_file;

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DeepGpError, Result};

pub use config::{DataConfig, RunConfig};
pub use model_file::{ModelFile, TrainingMetadata, FORMAT_VERSION};

/// Per-column affine map `z = (v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaling {
    /// Z-score scaling of every column. Constant columns get scale 1.
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut mean = Vec::with_capacity(m.ncols());
        let mut scale = Vec::with_capacity(m.ncols());
        for col in m.column_iter() {
            let mu = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(mu);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Self { mean, scale }
    }

    fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.ncols() != self.mean.len() {
            return Err(DeepGpError::dims("normalized columns", self.mean.len(), m.ncols()));
        }
        Ok(())
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            (m[(i, j)] - self.mean[j]) / self.scale[j]
        }))
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            m[(i, j)] * self.scale[j] + self.mean[j]
        }))
    }

    /// Maps variances in normalized units back to data units.
    pub fn invert_variance(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(v)?;
        Ok(DMatrix::from_fn(v.nrows(), v.ncols(), |i, j| {
            v[(i, j)] * self.scale[j].powi(2)
        }))
    }
}

/// Scalings applied at ingestion; `None` means the columns are raw.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub x: Option<ColumnScaling>,
    pub y: Option<ColumnScaling>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Absent for autoencoder data.
    pub x: Option<DMatrix<f64>>,
    pub y: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub y_names: Vec<String>,
    pub normalization: NormalizationRecord,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }
}

/// A column picked by zero-based index or by header name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for Column {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(s.trim()
            .parse()
            .map_or_else(|_| Column::Name(s.trim().to_string()), Column::Index))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Input columns; `None` takes every column not used for targets.
    pub x_cols: Option<Vec<Column>>,
    /// Target columns; `None` takes every column not used for inputs, or the
    /// last column when inputs are not given either.
    pub y_cols: Option<Vec<Column>>,
    pub normalize: bool,
}

/// Reads a rectangular numeric CSV file.
///
/// Rows and columns in errors are 1-based positions in the file.
pub fn load_csv(path: &Path, options: &CsvOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, options)
}

pub fn read_csv<R: std::io::Read>(reader: R, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Option<Vec<String>> = if options.has_header {
        Some(rdr.headers()?.iter().map(str::to_string).collect())
    } else {
        None
    };
    let first_data_row = usize::from(options.has_header) + 1;
    let mut width = header.as_ref().map(Vec::len);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = first_data_row + k;
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DeepGpError::RaggedRows {
                row,
                expected,
                found: record.len(),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DeepGpError::Parse {
                        row,
                        column: c + 1,
                        message: format!("`{cell}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(DeepGpError::EmptyFile);
    }
    let width = width.expect("set by the first row");
    let names = header.unwrap_or_else(|| (1..=width).map(|c| format!("c{c}")).collect());
    let resolve = |cols: &[Column]| -> Result<Vec<usize>> {
        cols.iter()
            .map(|c| match c {
                Column::Index(i) if *i < width => Ok(*i),
                Column::Index(i) => Err(DeepGpError::Config(format!(
                    "column {i} out of range for {width} columns"
                ))),
                Column::Name(s) => names
                    .iter()
                    .position(|h| h == s)
                    .ok_or_else(|| DeepGpError::Config(format!("no column named `{s}`"))),
            })
            .collect()
    };
    let (x_idx, y_idx) = match (&options.x_cols, &options.y_cols) {
        (Some(xc), Some(yc)) => (resolve(xc)?, resolve(yc)?),
        (Some(xc), None) => {
            let x_idx = resolve(xc)?;
            let y_idx = (0..width).filter(|c| !x_idx.contains(c)).collect();
            (x_idx, y_idx)
        }
        (None, yc) => {
            let y_idx = match yc {
                Some(yc) => resolve(yc)?,
                None => vec![width - 1],
            };
            ((0..width).filter(|c| !y_idx.contains(c)).collect(), y_idx)
        }
    };
    if y_idx.is_empty() {
        return Err(DeepGpError::Config("no target columns selected".into()));
    }
    let n = rows.len();
    let take = |idx: &[usize]| DMatrix::from_fn(n, idx.len(), |i, j| rows[i][idx[j]]);
    let pick_names = |idx: &[usize]| idx.iter().map(|&c| names[c].clone()).collect::<Vec<_>>();
    let mut x = (!x_idx.is_empty()).then(|| take(&x_idx));
    let mut y = take(&y_idx);
    let mut normalization = NormalizationRecord::default();
    if options.normalize {
        if let Some(xm) = &x {
            let s = ColumnScaling::fit(xm);
            x = Some(s.apply(xm)?);
            normalization.x = Some(s);
        }
        let s = ColumnScaling::fit(&y);
        y = s.apply(&y)?;
        normalization.y = Some(s);
    }
    Ok(Dataset {
        x,
        y,
        x_names: pick_names(&x_idx),
        y_names: pick_names(&y_idx),
        normalization,
    })
}

pub const STEP_NOISE_SD: f64 = 0.1;

/// Noisy step: `x` sorted uniform on `[-1, 1]`, `y = [x ≥ 0] + N(0, noise_sd²)`.
pub fn gen_step(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DeepGpError::Config(format!("gen_step needs n ≥ 2, got {n}")));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| DeepGpError::Config(format!("noise sd {noise_sd}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    xs.sort_by(f64::total_cmp);
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| if x < 0.0 { 0.0 } else { 1.0 } + noise.sample(&mut rng))
        .collect();
    Ok(Dataset {
        x: Some(DMatrix::from_vec(n, 1, xs)),
        y: DMatrix::from_vec(n, 1, ys),
        x_names: vec!["x".into()],
        y_names: vec!["y".into()],
        normalization: NormalizationRecord::default(),
    })
}

/// Noisy arc in the plane: `t` uniform on `[0, 1]`, `y = (cos θ, sin θ)` with
/// `θ = 0.75 π t`, plus isotropic noise. `x` holds the manifold parameter `t`.
pub fn gen_arc(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(DeepGpError::Config(format!("gen_arc needs n ≥ 2, got {n}")));
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| DeepGpError::Config(format!("noise sd {noise_sd}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
    let y = DMatrix::from_fn(n, 2, |i, c| {
        let theta = 0.75 * std::f64::consts::PI * ts[i];
        if c == 0 {
            theta.cos()
        } else {
            theta.sin()
        }
    });
    let y = y.map(|v| v + noise.sample(&mut rng));
    Ok(Dataset {
        x: Some(DMatrix::from_vec(n, 1, ts)),
        y,
        x_names: vec!["t".into()],
        y_names: vec!["y1".into(), "y2".into()],
        normalization: NormalizationRecord::default(),
    })
}

/// Writes the named column blocks side by side as CSV with a header row.
pub fn write_columns<W: std::io::Write>(writer: W, blocks: &[(&[String], &DMatrix<f64>)]) -> Result<()> {
    let n = blocks.first().map_or(0, |(_, m)| m.nrows());
    for (names, m) in blocks {
        if m.nrows() != n {
            return Err(DeepGpError::dims("csv block rows", n, m.nrows()));
        }
        if names.len() != m.ncols() {
            return Err(DeepGpError::dims("csv block names", m.ncols(), names.len()));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(blocks.iter().flat_map(|(names, _)| names.iter()))?;
    for i in 0..n {
        let row: Vec<String> = blocks
            .iter()
            .flat_map(|(_, m)| (0..m.ncols()).map(move |j| m[(i, j)].to_string()))
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_columns_to(path: &Path, blocks: &[(&[String], &DMatrix<f64>)]) -> Result<()> {
    write_columns(std::fs::File::create(path)?, blocks)
}

/// Writes a dataset with its input columns (if any) followed by its targets.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    match &data.x {
        Some(x) => write_columns_to(path, &[(&data.x_names, x), (&data.y_names, &data.y)]),
        None => write_columns_to(path, &[(&data.y_names, &data.y)]),
    }
}
