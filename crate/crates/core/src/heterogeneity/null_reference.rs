use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LooLoadingSet, LooOptions};
use crate::data::{correlation_from_data, DataMatrix};
use crate::error::{Error, Result};
use crate::paf::{paf_fit_n, LoadingMatrix};
use crate::rng::{stream, TAG_NULL_REFERENCE};
use crate::rotation::rotate_toward;
use crate::scoring::loo_sweep;

/// Mean leave-one-out loading SDs over samples drawn from a homogeneous
/// population whose loadings are the mean leave-one-out loadings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NullReference {
    /// p×q, row-major.
    pub mean_sd: Vec<Vec<f64>>,
    pub lambda0: Vec<Vec<f64>>,
    /// Variables whose population communality had to be scaled down.
    pub rescaled_rows: Vec<usize>,
    /// Draws that produced a usable sample and fit.
    pub draws_used: usize,
}

impl NullReference {
    pub fn mean_sd_matrix(&self) -> DMatrix<f64> {
        rows_to_matrix(&self.mean_sd)
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.len();
    let q = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(p, q, |i, j| rows[i][j])
}

const MAX_COMMUNALITY: f64 = 0.9801;

fn population_loadings(loo: &LooLoadingSet) -> (DMatrix<f64>, Vec<usize>) {
    let mut lambda0 = loo.means.clone();
    let mut rescaled = Vec::new();
    for i in 0..lambda0.nrows() {
        let h = lambda0.row(i).norm_squared();
        if h > MAX_COMMUNALITY {
            let f = (MAX_COMMUNALITY / h).sqrt();
            for v in lambda0.row_mut(i).iter_mut() {
                *v *= f;
            }
            warn!("null-reference population communality {h:.4} of variable {i} scaled to {MAX_COMMUNALITY}");
            rescaled.push(i);
        }
    }
    (lambda0, rescaled)
}

fn draw_sample(lambda0: &DMatrix<f64>, psi: &[f64], n: usize, seed: u64, d: usize) -> Result<DataMatrix> {
    let (p, q) = lambda0.shape();
    let mut x = DMatrix::zeros(n, p);
    let mut xi = vec![0.0; q];
    for k in 0..n {
        let mut rng = stream(seed, &[TAG_NULL_REFERENCE, d as u64, k as u64]);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            let common: f64 = (0..q).map(|j| lambda0[(i, j)] * xi[j]).sum();
            x[(k, i)] = common + psi[i] * e;
        }
    }
    DataMatrix::from_matrix(x)
}

fn draw_sds(
    lambda0: &DMatrix<f64>,
    psi: &[f64],
    n: usize,
    seed: u64,
    d: usize,
    opts: &LooOptions,
) -> Option<DMatrix<f64>> {
    let (p, q) = lambda0.shape();
    let data = draw_sample(lambda0, psi, n, seed, d).ok()?;
    let s = correlation_from_data(&data).ok()?;
    let fitted = paf_fit_n(&s, q, n, &opts.paf).ok()?;
    let rotated = rotate_toward(fitted.loadings().values(), lambda0).ok()?;
    let total = fitted.with_rotated_loadings(LoadingMatrix::new(rotated));
    let set = LooLoadingSet::from_fits(loo_sweep(&data, &total, &opts.paf, false), p, q);
    if 1.0 - set.converged_fraction() > opts.max_failure_fraction || set.n_converged < 2 {
        return None;
    }
    Some(set.sds)
}

/// Simulates `n_d` homogeneous samples of size `n`, runs the leave-one-out
/// sweep on each and averages the per-entry loading SDs.
///
/// The population loadings are the mean leave-one-out loadings; unique
/// variances complete the unit diagonal. Sample d, individual k draws from
/// its own stream, so the result does not depend on scheduling.
pub fn null_reference_sd(
    loo: &LooLoadingSet,
    n: usize,
    n_d: usize,
    seed: u64,
    opts: &LooOptions,
) -> Result<NullReference> {
    if n_d == 0 {
        return Err(Error::Config("the number of null-reference samples must be at least 1".into()));
    }
    let (lambda0, rescaled_rows) = population_loadings(loo);
    let (p, q) = lambda0.shape();
    if n < p + 2 {
        return Err(Error::Input(format!("null-reference samples need n >= p + 2, got n = {n}")));
    }
    let psi: Vec<f64> = (0..p)
        .map(|i| (1.0 - lambda0.row(i).norm_squared()).max(0.0).sqrt())
        .collect();

    let draws: Vec<Option<DMatrix<f64>>> = (0..n_d)
        .into_par_iter()
        .map(|d| draw_sds(&lambda0, &psi, n, seed, d, opts))
        .collect();
    let mut sum = DMatrix::zeros(p, q);
    let mut used = 0;
    for sds in draws.iter().flatten() {
        sum += sds;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Convergence("no null-reference sample could be fitted".into()));
    }
    if used < n_d {
        warn!("{} of {n_d} null-reference samples failed and were skipped", n_d - used);
    }
    let mean = sum / used as f64;
    Ok(NullReference {
        mean_sd: crate::linalg::to_rows(&mean),
        lambda0: crate::linalg::to_rows(&lambda0),
        rescaled_rows,
        draws_used: used,
    })
}
