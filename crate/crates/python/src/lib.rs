//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use deepgp::deep::{deep_bound, encode, predict, Mode};
use deepgp::gradients::{finite_difference_check, pack, Data, Objective, DEFAULT_FD_STEP};
use deepgp::io::{
    gen_step as generate_step, ColumnScaling, ModelFile, NormalizationRecord, RunConfig, TrainingMetadata,
};
use deepgp::optimizer::{initialize, maximize};
use deepgp::DeepGpError;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn to_py(e: DeepGpError) -> PyErr {
    match e {
        DeepGpError::Io(_) => PyOSError::new_err(e.to_string()),
        DeepGpError::Config(_)
        | DeepGpError::VersionMismatch { .. }
        | DeepGpError::DimensionMismatch { .. }
        | DeepGpError::NonPositiveHyperparameter { .. }
        | DeepGpError::InvalidLayerIndex { .. }
        | DeepGpError::EmptyFile => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Rows to a matrix; every row must have the same length.
pub fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, String> {
    let n = rows.len();
    if n == 0 {
        return Err(format!("{what} has no rows"));
    }
    let q = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != q) {
        return Err(format!("{what} row {i} has {} values, expected {q}", r.len()));
    }
    Ok(DMatrix::from_fn(n, q, |i, j| rows[i][j]))
}

pub fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_py(r: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    matrix(r, what).map_err(PyValueError::new_err)
}

/// A trained deep GP together with the scaling applied to its data.
#[pyclass(name = "Model", module = "deepgp")]
struct PyModel {
    file: ModelFile,
}

impl PyModel {
    fn scale_x(&self, x: DMatrix<f64>) -> PyResult<DMatrix<f64>> {
        match &self.file.normalization.x {
            Some(s) => s.apply(&x).map_err(to_py),
            None => Ok(x),
        }
    }

    fn scale_y(&self, y: DMatrix<f64>) -> PyResult<DMatrix<f64>> {
        match &self.file.normalization.y {
            Some(s) => s.apply(&y).map_err(to_py),
            None => Ok(y),
        }
    }

    fn inputs(&self, x: Option<Rows>) -> PyResult<Option<DMatrix<f64>>> {
        match (self.file.model.mode, x) {
            (Mode::Regression, Some(x)) => Ok(Some(self.scale_x(matrix_py(&x, "x")?)?)),
            (Mode::Regression, None) => Err(PyValueError::new_err("a regression model needs x")),
            (Mode::Autoencoder, _) => Ok(None),
        }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            file: ModelFile::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            file: ModelFile::from_json(text).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.file.save(&path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.file.to_json().map_err(to_py)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.file.model.depth()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.file.model.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.file.model.output_dim()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.file.model.mode {
            Mode::Regression => "regression",
            Mode::Autoencoder => "autoencoder",
        }
    }

    #[getter]
    fn final_bound(&self) -> Option<f64> {
        self.file.metadata.as_ref().map(|m| m.final_bound)
    }

    #[getter]
    fn stop_reason(&self) -> Option<String> {
        self.file.metadata.as_ref().map(|m| format!("{:?}", m.stop_reason))
    }

    /// Predictive means and variances in data units.
    fn predict(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let x = self.scale_x(matrix_py(&x, "x")?)?;
        let p = predict(&self.file.model, &x).map_err(to_py)?;
        let (mean, var) = match &self.file.normalization.y {
            Some(s) => (
                s.invert(p.means()).map_err(to_py)?,
                s.invert_variance(p.variances()).map_err(to_py)?,
            ),
            None => (p.means().clone(), p.variances().clone()),
        };
        Ok((rows(&mean), rows(&var)))
    }

    /// Means and variances of hidden layer `layer` (1-based) of an autoencoder.
    #[pyo3(signature = (y, layer = 1))]
    fn encode(&self, y: Rows, layer: usize) -> PyResult<(Rows, Rows)> {
        let y = self.scale_y(matrix_py(&y, "y")?)?;
        let m = encode(&self.file.model, &y, layer).map_err(to_py)?;
        Ok((rows(m.means()), rows(m.variances())))
    }

    /// The bound's term table as `(name, value)` pairs, ending with `total`.
    #[pyo3(signature = (y, x = None))]
    fn bound(&self, y: Rows, x: Option<Rows>) -> PyResult<Vec<(String, f64)>> {
        let y = self.scale_y(matrix_py(&y, "y")?)?;
        let x = self.inputs(x)?;
        let report = deep_bound(&self.file.model, x.as_ref(), &y).map_err(to_py)?;
        Ok(report.term_table())
    }

    /// Finite-difference check of the bound's gradient. Returns `(passed, worst relative error)`.
    #[pyo3(signature = (y, x = None, step = DEFAULT_FD_STEP, tolerance = 1e-4))]
    fn check_grad(&self, y: Rows, x: Option<Rows>, step: f64, tolerance: f64) -> PyResult<(bool, f64)> {
        let y = self.scale_y(matrix_py(&y, "y")?)?;
        let x = self.inputs(x)?;
        let data = Data { x: x.as_ref(), y: &y };
        let report =
            finite_difference_check(&Objective::Deep, &pack(&self.file.model), data, step, tolerance).map_err(to_py)?;
        Ok((report.passed(), report.worst_rel_error))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, depth={}, input_dim={}, output_dim={})",
            self.mode(),
            self.depth(),
            self.input_dim(),
            self.output_dim()
        )
    }
}

/// Trains a model described by a TOML run configuration (the same format the
/// command line reads; any `data` section is ignored).
#[pyfunction]
#[pyo3(signature = (config, y, x = None, normalize = false))]
fn train(py: Python<'_>, config: &str, y: Rows, x: Option<Rows>, normalize: bool) -> PyResult<PyModel> {
    let run = RunConfig::from_toml(config).map_err(to_py)?;
    let mut y = matrix_py(&y, "y")?;
    let mut x = match (run.mode, x) {
        (Mode::Regression, Some(x)) => Some(matrix_py(&x, "x")?),
        (Mode::Regression, None) => return Err(PyValueError::new_err("regression needs x")),
        (Mode::Autoencoder, _) => None,
    };
    let mut normalization = NormalizationRecord::default();
    if normalize {
        let sy = ColumnScaling::fit(&y);
        y = sy.apply(&y).map_err(to_py)?;
        normalization.y = Some(sy);
        if let Some(xm) = x.as_mut() {
            let sx = ColumnScaling::fit(xm);
            *xm = sx.apply(xm).map_err(to_py)?;
            normalization.x = Some(sx);
        }
    }
    let result = py
        .detach(|| {
            let data = Data { x: x.as_ref(), y: &y };
            let model = initialize(data, &run.architecture(), run.seed)?;
            maximize(&model, data, &run.optimizer)
        })
        .map_err(to_py)?;
    let meta = TrainingMetadata {
        seed: run.seed,
        optimizer: run.optimizer.clone(),
        final_bound: result.final_bound,
        iterations: result.trace.last().map_or(0, |t| t.iteration),
        stop_reason: result.reason,
    };
    Ok(PyModel {
        file: ModelFile::new(result.model, normalization, Some(meta)),
    })
}

/// Noisy step data: returns `(x, y)` as lists of floats.
#[pyfunction]
#[pyo3(signature = (n = 100, noise_sd = 0.1, seed = 0))]
fn gen_step(n: usize, noise_sd: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let d = generate_step(n, noise_sd, seed).map_err(to_py)?;
    let x = d.x.expect("step data has inputs");
    Ok((x.as_slice().to_vec(), d.y.as_slice().to_vec()))
}

#[pymodule]
#[pyo3(name = "deepgp")]
fn deepgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gen_step, m)?)?;
    m.add("FORMAT_VERSION", deepgp::io::FORMAT_VERSION)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let r = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let m = matrix(&r, "x").unwrap();
        assert_eq!(m[(2, 0)], 5.0);
        assert_eq!(rows(&m), r);
    }

    #[test]
    fn ragged_and_empty_rows_rejected() {
        assert!(matrix(&[vec![1.0], vec![1.0, 2.0]], "x").unwrap_err().contains("row 1"));
        assert!(matrix(&[], "y").is_err());
    }
}
