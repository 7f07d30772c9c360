use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LooLoadingSet;
use crate::data::{CrossProducts, DataMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::paf::FactorModel;

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed root of the difference of sign-preserving squared loadings:
/// `|a²sgn(a) − b²sgn(b)|^½ · sgn(a²sgn(a) − b²sgn(b))`, with `sgn(0) = 0`.
///
/// `total` is λ̂_ij from the full sample, `loo` is λ̂_ij(−k).
pub fn loading_delta(total: f64, loo: f64) -> f64 {
    let d = total * total * sgn(total) - loo * loo * sgn(loo);
    d.abs().sqrt() * sgn(d)
}

/// `|λ̂_ij| / mean_i |λ̂_ij|` over column j; `None` when the column is all zero.
pub fn loading_weight(total: &DMatrix<f64>, i: usize, j: usize) -> Option<f64> {
    let col = total.column(j);
    let mean = col.iter().map(|v| v.abs()).sum::<f64>() / col.len() as f64;
    (mean > 0.0).then(|| total[(i, j)].abs() / mean)
}

/// `λ̂_ij + w·Δλ̂_ijk`. An all-zero column leaves the weight undefined; it then
/// falls back to 0 and the second element is `false`.
pub fn candidate_loading(total: &DMatrix<f64>, i: usize, j: usize, delta: f64) -> (f64, bool) {
    match loading_weight(total, i, j) {
        Some(w) => (total[(i, j)] + w * delta, true),
        None => (total[(i, j)], false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Accept when the perturbed loadings misfit `S_(-k)` more than the total
    /// loadings misfit `S`.
    MisfitIncreases,
    /// The opposite inequality, available for comparison.
    MisfitDecreases,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndividualOptions {
    pub rule: AcceptanceRule,
    /// Accepted loadings above this magnitude are reset to it.
    pub reset_limit: f64,
}

impl Default for IndividualOptions {
    fn default() -> Self {
        Self {
            rule: AcceptanceRule::MisfitIncreases,
            reset_limit: 0.99,
        }
    }
}

/// Per-individual loading matrices Λ̃_k.
#[derive(Debug, Clone)]
pub struct IndividualLoadingSet {
    pub loadings: Vec<DMatrix<f64>>,
    /// Acceptance mask per individual, p×q.
    pub accepted: Vec<DMatrix<bool>>,
    pub acceptances: usize,
    /// Entries that the other acceptance rule would have accepted.
    pub opposite_rule_acceptances: usize,
    pub heywood_resets: usize,
    pub weight_fallbacks: usize,
}

impl IndividualLoadingSet {
    /// Every individual gets the total-sample loadings.
    pub fn homogeneous(total: &DMatrix<f64>, n: usize) -> Self {
        let (p, q) = total.shape();
        Self {
            loadings: vec![total.clone(); n],
            accepted: vec![DMatrix::from_element(p, q, false); n],
            acceptances: 0,
            opposite_rule_acceptances: 0,
            heywood_resets: 0,
            weight_fallbacks: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.loadings.len()
    }
}

struct RowResult {
    loadings: DMatrix<f64>,
    accepted: DMatrix<bool>,
    acceptances: usize,
    opposite: usize,
    resets: usize,
    fallbacks: usize,
}

/// Estimates individual loadings from the leave-one-out solutions.
///
/// For each individual k and entry (i, j), the candidate `λ̂_ij + w·Δλ̂_ijk`
/// replaces only that entry of Λ̂. Under the default rule the candidate is
/// accepted when the off-diagonal misfit of the perturbed loadings to
/// `S_(-k)` exceeds the off-diagonal misfit of Λ̂ to `S`. Entries are judged
/// independently against Λ̂ and then assembled into Λ̃_k. A candidate equal
/// to λ̂_ij is not an acceptance. Individuals whose leave-one-out fit failed
/// keep Λ̂.
pub fn accept_individual_loadings(
    data: &DataMatrix,
    total_model: &FactorModel,
    loo: &LooLoadingSet,
    opts: &IndividualOptions,
) -> Result<IndividualLoadingSet> {
    let total = total_model.loadings().values();
    let (p, q) = total.shape();
    if loo.n() != data.n() || data.p() != p {
        return Err(Error::Shape(format!(
            "leave-one-out set has {} individuals, data {}x{}, model p = {p}",
            loo.n(),
            data.n(),
            data.p()
        )));
    }
    let cross = CrossProducts::new(data);
    let s = cross.correlation()?;
    let reproduced = total * total.transpose();
    let baseline = linalg::offdiag_ssq_diff(&reproduced, s.values());

    let rows: Vec<RowResult> = (0..data.n())
        .into_par_iter()
        .map(|k| {
            let fit = &loo.fits[k];
            let mut row = RowResult {
                loadings: total.clone(),
                accepted: DMatrix::from_element(p, q, false),
                acceptances: 0,
                opposite: 0,
                resets: 0,
                fallbacks: 0,
            };
            if !fit.converged {
                return Ok(row);
            }
            let s_k = cross.correlation_without(k)?;
            let s_k = s_k.values();
            let base_k = linalg::offdiag_ssq_diff(&reproduced, s_k);
            for j in 0..q {
                for i in 0..p {
                    let delta = loading_delta(total[(i, j)], fit.loadings[(i, j)]);
                    let (candidate, weighted) = candidate_loading(total, i, j, delta);
                    if !weighted {
                        row.fallbacks += 1;
                    }
                    let change = candidate - total[(i, j)];
                    if change == 0.0 {
                        continue;
                    }
                    // Only row/column i of ΛΛ' moves when λ_ij changes.
                    let mut ssq = base_k;
                    for m in 0..p {
                        if m == i {
                            continue;
                        }
                        let old = reproduced[(i, m)] - s_k[(i, m)];
                        let new = old + change * total[(m, j)];
                        ssq += 2.0 * (new * new - old * old);
                    }
                    let increases = ssq > baseline;
                    let decreases = ssq < baseline;
                    let (accept, other) = match opts.rule {
                        AcceptanceRule::MisfitIncreases => (increases, decreases),
                        AcceptanceRule::MisfitDecreases => (decreases, increases),
                    };
                    if other {
                        row.opposite += 1;
                    }
                    if accept {
                        let mut value = candidate;
                        if value.abs() > opts.reset_limit {
                            value = opts.reset_limit.copysign(value);
                            row.resets += 1;
                        }
                        row.loadings[(i, j)] = value;
                        row.accepted[(i, j)] = true;
                        row.acceptances += 1;
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut set = IndividualLoadingSet {
        loadings: Vec::with_capacity(rows.len()),
        accepted: Vec::with_capacity(rows.len()),
        acceptances: 0,
        opposite_rule_acceptances: 0,
        heywood_resets: 0,
        weight_fallbacks: 0,
    };
    for r in rows {
        set.acceptances += r.acceptances;
        set.opposite_rule_acceptances += r.opposite;
        set.heywood_resets += r.resets;
        set.weight_fallbacks += r.fallbacks;
        set.loadings.push(r.loadings);
        set.accepted.push(r.accepted);
    }
    if set.weight_fallbacks > 0 {
        warn!(
            "{} candidate loadings used weight 0 because a loading column was all zero",
            set.weight_fallbacks
        );
    }
    Ok(set)
}
