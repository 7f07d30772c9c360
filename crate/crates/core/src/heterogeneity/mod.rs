//! Individual loading estimation, the heterogeneity-based regression factor
//! score predictor (HRFS), the null-reference simulation and the binomial
//! heterogeneity test.

mod hrfs;
mod individual;
mod null_reference;

pub use hrfs::{hrfs_determinacy, hrfs_scores, individual_implied, HrfsScores, UNIQUE_VARIANCE_FLOOR};
pub use individual::{
    accept_individual_loadings, candidate_loading, loading_delta, loading_weight, AcceptanceRule,
    IndividualLoadingSet, IndividualOptions,
};
pub use null_reference::{null_reference_sd, NullReference};
pub use test::{
    binomial_cutoff, binomial_right_tail, conditional_predictor, heterogeneity_test,
    ConditionalPredictor, Counting, Cutoff, CutoffRule, Decision, FactorTest, HeterogeneityReport,
    Predictor, TestOptions,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg;
use crate::paf::{FactorModel, PafOptions};
use crate::scoring::{loo_sweep, LooFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooOptions {
    pub paf: PafOptions,
    /// The sweep fails as a whole when more than this fraction of the
    /// leave-one-out fits do not converge.
    pub max_failure_fraction: f64,
}

impl Default for LooOptions {
    fn default() -> Self {
        Self {
            paf: PafOptions::default(),
            max_failure_fraction: 0.5,
        }
    }
}

/// Rotated leave-one-out loadings Λ̂_(-k) for every individual, with the
/// inter-individual standard deviation of each entry.
#[derive(Debug, Clone)]
pub struct LooLoadingSet {
    pub fits: Vec<LooFit>,
    /// Sample SD (n - 1 denominator) over converged k, p×q.
    pub sds: DMatrix<f64>,
    /// Mean over converged k, p×q.
    pub means: DMatrix<f64>,
    pub n_converged: usize,
}

impl LooLoadingSet {
    pub fn from_fits(fits: Vec<LooFit>, p: usize, q: usize) -> Self {
        let converged: Vec<&LooFit> = fits.iter().filter(|f| f.converged).collect();
        let mut sds = DMatrix::zeros(p, q);
        let mut means = DMatrix::zeros(p, q);
        let mut column = Vec::with_capacity(converged.len());
        for j in 0..q {
            for i in 0..p {
                column.clear();
                column.extend(converged.iter().map(|f| f.loadings[(i, j)]));
                sds[(i, j)] = linalg::sample_sd(&column);
                if !column.is_empty() {
                    means[(i, j)] = column.iter().sum::<f64>() / column.len() as f64;
                }
            }
        }
        Self {
            n_converged: converged.len(),
            fits,
            sds,
            means,
        }
    }

    pub fn n(&self) -> usize {
        self.fits.len()
    }

    pub fn converged_fraction(&self) -> f64 {
        self.n_converged as f64 / self.n().max(1) as f64
    }
}

/// Refits the model n times, each time without one individual, and rotates
/// every solution toward the total-sample loadings.
pub fn loo_loading_sweep(
    data: &DataMatrix,
    total_model: &FactorModel,
    opts: &LooOptions,
) -> Result<LooLoadingSet> {
    if data.p() != total_model.p() {
        return Err(Error::Shape(format!(
            "model has {} variables, data {}",
            total_model.p(),
            data.p()
        )));
    }
    let fits = loo_sweep(data, total_model, &opts.paf, true);
    let set = LooLoadingSet::from_fits(fits, total_model.p(), total_model.q());
    check_failures(&set, opts)?;
    Ok(set)
}

pub(crate) fn check_failures(set: &LooLoadingSet, opts: &LooOptions) -> Result<()> {
    let failed = 1.0 - set.converged_fraction();
    if failed > opts.max_failure_fraction {
        return Err(Error::Convergence(format!(
            "{} of {} leave-one-out fits did not converge",
            set.n() - set.n_converged,
            set.n()
        )));
    }
    Ok(())
}
