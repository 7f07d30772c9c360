//! Iterated principal-axis factoring for orthogonal factor models.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CorrelationKind, CorrelationMatrix, DEFAULT_EIGEN_FLOOR};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PafOptions {
    /// Stop when the largest absolute communality change falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Communalities are clamped to `[0, communality_ceiling]`.
    pub communality_ceiling: f64,
    pub eigen_floor: f64,
}

impl Default for PafOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            communality_ceiling: 0.9801,
            eigen_floor: DEFAULT_EIGEN_FLOOR,
        }
    }
}

/// p×q loadings plus the set of entries touched by Heywood clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatrix {
    values: DMatrix<f64>,
    heywood_flags: BTreeSet<(usize, usize)>,
}

impl LoadingMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self {
            values,
            heywood_flags: BTreeSet::new(),
        }
    }

    pub fn with_flags(values: DMatrix<f64>, heywood_flags: BTreeSet<(usize, usize)>) -> Self {
        Self {
            values,
            heywood_flags,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn heywood_flags(&self) -> &BTreeSet<(usize, usize)> {
        &self.heywood_flags
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn communalities(&self) -> DVector<f64> {
        linalg::row_sum_squares(&self.values)
    }
}

/// A fitted orthogonal factor model in the correlation metric (Φ = I).
#[derive(Debug, Clone)]
pub struct FactorModel {
    loadings: LoadingMatrix,
    unique_variances: DVector<f64>,
    implied: CorrelationMatrix,
    n_used: usize,
    converged: bool,
    iterations: usize,
}

impl FactorModel {
    /// Builds a model from loadings; unique variances complete the unit
    /// diagonal and are floored at zero.
    pub fn from_loadings(loadings: LoadingMatrix, n_used: usize) -> Result<Self> {
        let unique_variances = loadings.communalities().map(|h| (1.0 - h).max(0.0));
        let implied = implied_from_parts(loadings.values(), &unique_variances)?;
        Ok(Self {
            loadings,
            unique_variances,
            implied,
            n_used,
            converged: true,
            iterations: 0,
        })
    }

    pub fn loadings(&self) -> &LoadingMatrix {
        &self.loadings
    }

    pub fn unique_variances(&self) -> &DVector<f64> {
        &self.unique_variances
    }

    pub fn implied(&self) -> &CorrelationMatrix {
        &self.implied
    }

    pub fn n_used(&self) -> usize {
        self.n_used
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn p(&self) -> usize {
        self.loadings.p()
    }

    pub fn q(&self) -> usize {
        self.loadings.q()
    }

    /// Same model with loadings replaced by an orthogonal rotation of them.
    /// Communalities, unique variances and Σ̂ are unchanged by rotation.
    pub fn with_rotated_loadings(&self, rotated: LoadingMatrix) -> Self {
        Self {
            loadings: rotated,
            unique_variances: self.unique_variances.clone(),
            implied: self.implied.clone(),
            n_used: self.n_used,
            converged: self.converged,
            iterations: self.iterations,
        }
    }
}

/// Σ̂ = ΛΛ' + Ψ².
pub fn implied_correlation(model: &FactorModel) -> CorrelationMatrix {
    model.implied.clone()
}

fn implied_from_parts(loadings: &DMatrix<f64>, unique: &DVector<f64>) -> Result<CorrelationMatrix> {
    let mut sigma = loadings * loadings.transpose();
    for i in 0..sigma.nrows() {
        sigma[(i, i)] += unique[i];
    }
    CorrelationMatrix::new(sigma, CorrelationKind::ModelImplied)
}

/// Squared multiple correlations, 1 - 1/diag(R⁻¹).
pub fn squared_multiple_correlations(corr: &CorrelationMatrix) -> Result<DVector<f64>> {
    let inv = linalg::spd_inverse(corr.values(), "correlation matrix")?;
    Ok(DVector::from_iterator(
        corr.p(),
        (0..corr.p()).map(|i| 1.0 - 1.0 / inv[(i, i)]),
    ))
}

/// Iterated principal-axis factoring of `corr` with `q` factors.
///
/// Starts from squared multiple correlations, replaces the diagonal with the
/// current communalities, takes the top-q eigenpairs and rescales the
/// eigenvectors by root eigenvalues until the largest communality change is
/// below `opts.tolerance`. Reaching the iteration cap is reported through
/// [`FactorModel::converged`], not as an error. Rows whose final communality
/// exceeds the ceiling are shrunk onto it and flagged.
pub fn paf_fit(corr: &CorrelationMatrix, q: usize, opts: &PafOptions) -> Result<FactorModel> {
    let p = corr.p();
    if q == 0 || q >= p {
        return Err(Error::Config(format!("need 1 <= q < p, got q = {q}, p = {p}")));
    }
    corr.ensure_invertible(opts.eigen_floor)?;
    let ceiling = opts.communality_ceiling;

    let mut h = squared_multiple_correlations(corr)?.map(|v| v.clamp(0.0, ceiling));
    let mut reduced = corr.values().clone();
    let mut loadings = DMatrix::zeros(p, q);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        reduced.set_diagonal(&h);
        let (values, vectors) = linalg::sym_eigen_desc(&reduced);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("eigen-solver returned non-finite values".into()));
        }
        for j in 0..q {
            let scale = values[j].max(0.0).sqrt();
            loadings.set_column(j, &(vectors.column(j) * scale));
        }
        let h_new = linalg::row_sum_squares(&loadings).map(|v| v.clamp(0.0, ceiling));
        let change = (&h_new - &h).amax();
        h = h_new;
        if change < opts.tolerance {
            converged = true;
            break;
        }
    }

    let mut flags = BTreeSet::new();
    for i in 0..p {
        let hi: f64 = loadings.row(i).iter().map(|v| v * v).sum();
        if hi > ceiling {
            let s = (ceiling / hi).sqrt();
            for j in 0..q {
                loadings[(i, j)] *= s;
                flags.insert((i, j));
            }
        }
    }
    linalg::canonical_column_signs(&mut loadings);

    let mut model = FactorModel::from_loadings(LoadingMatrix::with_flags(loadings, flags), 0)?;
    model.converged = converged;
    model.iterations = iterations;
    Ok(model)
}

/// [`paf_fit`] with the sample size recorded on the model.
pub fn paf_fit_n(
    corr: &CorrelationMatrix,
    q: usize,
    n_used: usize,
    opts: &PafOptions,
) -> Result<FactorModel> {
    let mut model = paf_fit(corr, q, opts)?;
    model.n_used = n_used;
    Ok(model)
}
