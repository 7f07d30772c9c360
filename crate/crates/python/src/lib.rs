//! Python bindings. Matrices cross the boundary as lists of rows.

use hetfac::analysis::{analyze, AnalysisOptions};
use hetfac::linalg::{from_rows, to_rows};
use hetfac::{
    correlation_from_data, determinacy_population, determinacy_sample, paf_fit, procrustes_target,
    varimax, CorrelationKind, CorrelationMatrix, DataMatrix, Error, ErrorKind, LoadingMatrix,
    PafOptions, VarimaxOptions,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(hetfac, HetfacError, PyException);
create_exception!(hetfac, InputError, HetfacError);
create_exception!(hetfac, ConvergenceError, HetfacError);
create_exception!(hetfac, SingularityError, HetfacError);
create_exception!(hetfac, ConfigError, HetfacError);
create_exception!(hetfac, NumericalError, HetfacError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.kind() {
        ErrorKind::Input => InputError::new_err(msg),
        ErrorKind::Convergence => ConvergenceError::new_err(msg),
        ErrorKind::Singularity => SingularityError::new_err(msg),
        ErrorKind::Config => ConfigError::new_err(msg),
        ErrorKind::Numerical => NumericalError::new_err(msg),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<nalgebra::DMatrix<f64>> {
    from_rows(rows).map_err(py_err)
}

fn correlation_matrix(rows: &[Vec<f64>]) -> PyResult<CorrelationMatrix> {
    CorrelationMatrix::new(matrix(rows)?, CorrelationKind::Sample).map_err(py_err)
}

/// Smallest G_crit whose exact right tail under Binomial(p, .5) is at most
/// `alpha_max`, with that tail.
#[pyfunction]
fn binomial_cutoff(p: usize, alpha_max: f64) -> PyResult<(usize, f64)> {
    let c = hetfac::heterogeneity::binomial_cutoff(p, alpha_max).map_err(py_err)?;
    Ok((c.g_crit, c.alpha_exact))
}

#[pyfunction]
fn loading_delta(total: f64, loo: f64) -> f64 {
    hetfac::heterogeneity::loading_delta(total, loo)
}

/// Pearson correlation matrix of an n×p data matrix.
#[pyfunction]
fn correlation(data: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let data = DataMatrix::from_matrix(matrix(&data)?).map_err(py_err)?;
    let s = correlation_from_data(&data).map_err(py_err)?;
    Ok(to_rows(s.values()))
}

#[pyclass(name = "FactorModel", frozen)]
struct PyFactorModel {
    inner: hetfac::FactorModel,
}

#[pymethods]
impl PyFactorModel {
    #[getter]
    fn loadings(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.loadings().values())
    }

    #[getter]
    fn unique_variances(&self) -> Vec<f64> {
        self.inner.unique_variances().iter().copied().collect()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations()
    }

    #[getter]
    fn heywood_flags(&self) -> Vec<(usize, usize)> {
        self.inner.loadings().heywood_flags().iter().copied().collect()
    }

    /// Determinacy per factor from the implied matrix, or from `s` when given.
    #[pyo3(signature = (s=None))]
    fn determinacy(&self, s: Option<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let report = match s {
            Some(s) => determinacy_sample(&self.inner, &correlation_matrix(&s)?),
            None => determinacy_population(&self.inner),
        };
        Ok(report.map_err(py_err)?.rho)
    }

    fn __repr__(&self) -> String {
        format!(
            "FactorModel(p={}, q={}, converged={})",
            self.inner.p(),
            self.inner.q(),
            self.inner.converged()
        )
    }
}

/// Principal axis factoring of a correlation matrix.
#[pyfunction]
#[pyo3(signature = (corr, q, tolerance=None, max_iterations=None))]
fn fit_paf(
    corr: Vec<Vec<f64>>,
    q: usize,
    tolerance: Option<f64>,
    max_iterations: Option<usize>,
) -> PyResult<PyFactorModel> {
    let mut opts = PafOptions::default();
    if let Some(t) = tolerance {
        opts.tolerance = t;
    }
    if let Some(m) = max_iterations {
        opts.max_iterations = m;
    }
    let inner = paf_fit(&correlation_matrix(&corr)?, q, &opts).map_err(py_err)?;
    Ok(PyFactorModel { inner })
}

/// Returns `(rotated, transform)`.
#[pyfunction(name = "varimax")]
#[pyo3(signature = (loadings, kaiser=false))]
fn varimax_py(loadings: Vec<Vec<f64>>, kaiser: bool) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let opts = VarimaxOptions {
        kaiser,
        ..VarimaxOptions::default()
    };
    let r = varimax(&LoadingMatrix::new(matrix(&loadings)?), &opts);
    Ok((to_rows(r.rotated.values()), to_rows(&r.transform)))
}

/// Orthogonal rotation of `source` toward `target`; returns `(rotated, transform)`.
#[pyfunction]
fn procrustes(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let r = procrustes_target(&matrix(&source)?, &matrix(&target)?).map_err(py_err)?;
    Ok((to_rows(r.rotated.values()), to_rows(&r.transform)))
}

/// Full analysis. `options` is the JSON form of the analysis options; missing
/// keys are not filled in, so pass a complete object or None for defaults.
#[pyfunction]
#[pyo3(signature = (data, column_names=None, options=None))]
fn analyze_json(
    data: Vec<Vec<f64>>,
    column_names: Option<Vec<String>>,
    options: Option<&str>,
) -> PyResult<String> {
    let values = matrix(&data)?;
    let data = match column_names {
        Some(names) => DataMatrix::new(values, names),
        None => DataMatrix::from_matrix(values),
    }
    .map_err(py_err)?;
    let opts: AnalysisOptions = match options {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| ConfigError::new_err(format!("invalid options: {e}")))?,
        None => AnalysisOptions::default(),
    };
    let report = analyze(&data, &opts).map_err(py_err)?;
    serde_json::to_string(&report).map_err(|e| NumericalError::new_err(e.to_string()))
}

/// Default analysis options as JSON, a starting point for `analyze_json`.
#[pyfunction]
fn default_options() -> String {
    serde_json::to_string(&AnalysisOptions::default()).expect("options serialize")
}

#[pymodule]
#[pyo3(name = "hetfac")]
fn hetfac_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", hetfac::analysis::VERSION)?;
    m.add("HetfacError", py.get_type::<HetfacError>())?;
    m.add("InputError", py.get_type::<InputError>())?;
    m.add("ConvergenceError", py.get_type::<ConvergenceError>())?;
    m.add("SingularityError", py.get_type::<SingularityError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add_class::<PyFactorModel>()?;
    m.add_function(wrap_pyfunction!(binomial_cutoff, m)?)?;
    m.add_function(wrap_pyfunction!(loading_delta, m)?)?;
    m.add_function(wrap_pyfunction!(correlation, m)?)?;
    m.add_function(wrap_pyfunction!(fit_paf, m)?)?;
    m.add_function(wrap_pyfunction!(varimax_py, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_json, m)?)?;
    m.add_function(wrap_pyfunction!(default_options, m)?)?;
    Ok(())
}
