use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::IndividualLoadingSet;
use crate::data::{CorrelationMatrix, DataMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::paf::FactorModel;
use crate::scoring::{
    determinacy_from_terms, determinacy_terms, rfs_weights, DeterminacyBasis, DeterminacyReport,
    ScoreKind, ScoreMatrix,
};

/// Floor on individual unique variances in Σ̃_k.
pub const UNIQUE_VARIANCE_FLOOR: f64 = 1e-4;

/// Σ̃_k = Λ̃_kΛ̃_k' + Ψ̃²_k with Ψ̃²_k = diag(I − Λ̃_kΛ̃_k') floored at 1e-4.
pub fn individual_implied(loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let mut sigma = loadings * loadings.transpose();
    for i in 0..sigma.nrows() {
        let unique = (1.0 - sigma[(i, i)]).max(UNIQUE_VARIANCE_FLOOR);
        sigma[(i, i)] += unique;
    }
    sigma
}

/// Per-individual weights and the two determinacy diagonals, or `None` when
/// Σ̃_k cannot be inverted.
struct IndividualTerms {
    weights: DMatrix<f64>,
    var: Vec<f64>,
    cov: Vec<f64>,
}

fn individual_terms(loadings: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<IndividualTerms> {
    let sigma = individual_implied(loadings);
    let inv = linalg::spd_inverse(&sigma, "individual implied matrix").ok()?;
    let (var, cov) = determinacy_terms(loadings, &inv, s);
    Some(IndividualTerms {
        weights: loadings.tr_mul(&inv),
        var,
        cov,
    })
}

fn collect_terms(individual: &IndividualLoadingSet, s: &DMatrix<f64>) -> Vec<Option<IndividualTerms>> {
    // Identical matrices share one evaluation.
    let mut cache: Vec<(usize, &DMatrix<f64>)> = Vec::new();
    let mut owner = Vec::with_capacity(individual.n());
    for (k, l) in individual.loadings.iter().enumerate() {
        match cache.iter().find(|(_, m)| *m == l) {
            Some((first, _)) => owner.push(*first),
            None => {
                cache.push((k, l));
                owner.push(k);
            }
        }
    }
    let unique: Vec<(usize, Option<IndividualTerms>)> = cache
        .par_iter()
        .map(|(k, l)| (*k, individual_terms(l, s)))
        .collect();
    let lookup = |k: usize| unique.iter().position(|(u, _)| *u == k).unwrap();
    owner
        .iter()
        .map(|&o| {
            unique[lookup(o)].1.as_ref().map(|t| IndividualTerms {
                weights: t.weights.clone(),
                var: t.var.clone(),
                cov: t.cov.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HrfsScores {
    pub scores: ScoreMatrix,
    /// Individuals whose Σ̃_k was singular; their rows hold the unit-variance
    /// scaled RFS row instead.
    pub fallback_rows: Vec<usize>,
}

/// HRFS for each individual k:
/// `diag(W_k S W_k')^(-1/2) · W_k · x_k` with `W_k = Λ̃_k'Σ̃_k⁻¹`, applied to
/// total-sample z-scores.
pub fn hrfs_scores(
    individual: &IndividualLoadingSet,
    total_model: &FactorModel,
    data: &DataMatrix,
    s: &CorrelationMatrix,
) -> Result<HrfsScores> {
    let n = data.n();
    let q = total_model.q();
    if individual.n() != n || s.p() != data.p() || total_model.p() != data.p() {
        return Err(Error::Shape(
            "individual loadings, data, model and S must agree in size".into(),
        ));
    }
    let z = data.standardized();
    let terms = collect_terms(individual, s.values());

    let rfs_w = rfs_weights(total_model, total_model.implied())?;
    let rfs_scale: Vec<f64> = (0..q)
        .map(|j| {
            let wr = rfs_w.row(j);
            let v = (&wr * s.values()).dot(&wr);
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                0.0
            }
        })
        .collect();

    let mut values = DMatrix::zeros(n, q);
    let mut fallback_rows = Vec::new();
    for k in 0..n {
        let x: DVector<f64> = z.row(k).transpose();
        match &terms[k] {
            Some(t) => {
                let raw = &t.weights * &x;
                for j in 0..q {
                    values[(k, j)] = if t.var[j] > 0.0 {
                        raw[j] / t.var[j].sqrt()
                    } else {
                        0.0
                    };
                }
            }
            None => {
                fallback_rows.push(k);
                let raw = &rfs_w * &x;
                for j in 0..q {
                    values[(k, j)] = raw[j] * rfs_scale[j];
                }
            }
        }
    }
    Ok(HrfsScores {
        scores: ScoreMatrix {
            values,
            kind: ScoreKind::Hrfs,
        },
        fallback_rows,
    })
}

/// Mean over individuals of `diag(W_k S W_k')^(-1/2) · diag(W_k Λ̃_k)`, each
/// term clamped to `[0, 1]` like the sample determinacy. Individuals with a
/// singular Σ̃_k are left out of the mean.
pub fn hrfs_determinacy(
    individual: &IndividualLoadingSet,
    s: &CorrelationMatrix,
) -> Result<DeterminacyReport> {
    let Some(first) = individual.loadings.first() else {
        return Err(Error::Input("no individual loadings".into()));
    };
    if first.nrows() != s.p() {
        return Err(Error::Shape("individual loadings and S differ in size".into()));
    }
    let q = first.ncols();
    let terms = collect_terms(individual, s.values());
    let mut sum = vec![0.0; q];
    let mut count = vec![0usize; q];
    let mut clamped = vec![false; q];
    for t in terms.iter().flatten() {
        let r = determinacy_from_terms(&t.var, &t.cov, DeterminacyBasis::Hrfs);
        for j in 0..q {
            if !r.undefined[j] {
                sum[j] += r.rho[j];
                count[j] += 1;
                clamped[j] |= r.clamped[j];
            }
        }
    }
    let rho = (0..q)
        .map(|j| if count[j] > 0 { sum[j] / count[j] as f64 } else { 0.0 })
        .collect();
    Ok(DeterminacyReport {
        rho,
        basis: DeterminacyBasis::Hrfs,
        clamped,
        undefined: count.iter().map(|&c| c == 0).collect(),
    })
}
