//! Regression factor scores, parameter-based determinacy coefficients and
//! leave-one-out determinacy influence.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CorrelationMatrix, CrossProducts, DataMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::paf::{paf_fit_n, FactorModel, PafOptions};
use crate::rotation::rotate_toward;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Rfs,
    Hrfs,
    /// Column-wise choice between RFS and HRFS after the heterogeneity test.
    Conditional,
}

/// One predictor value per individual (rows) and factor (columns).
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub kind: ScoreKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeterminacyBasis {
    Population,
    Sample,
    Loo,
    Hrfs,
}

/// Per-factor determinacy coefficients.
///
/// Values are clamped to `[0, 1]`; `clamped[j]` records when that happened.
/// A factor whose score variance is not positive is `undefined` and carries 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminacyReport {
    pub rho: Vec<f64>,
    pub basis: DeterminacyBasis,
    pub clamped: Vec<bool>,
    pub undefined: Vec<bool>,
}

impl DeterminacyReport {
    pub fn q(&self) -> usize {
        self.rho.len()
    }

    pub fn squared(&self) -> Vec<f64> {
        self.rho.iter().map(|r| r * r).collect()
    }
}

/// Regression weights `Λ' corr⁻¹` (q×p). Pass the model-implied Σ̂ for the
/// standard predictor.
pub fn rfs_weights(model: &FactorModel, corr: &CorrelationMatrix) -> Result<DMatrix<f64>> {
    if corr.p() != model.p() {
        return Err(Error::Shape(format!(
            "model has {} variables, correlation matrix {}",
            model.p(),
            corr.p()
        )));
    }
    let inv = linalg::spd_inverse(corr.values(), "implied correlation matrix")?;
    Ok(model.loadings().values().tr_mul(&inv))
}

/// RFS values for every individual, applying `Λ'Σ̂⁻¹` to total-sample z-scores.
pub fn rfs_scores(model: &FactorModel, data: &DataMatrix) -> Result<ScoreMatrix> {
    if data.p() != model.p() {
        return Err(Error::Shape(format!(
            "model has {} variables, data {}",
            model.p(),
            data.p()
        )));
    }
    let w = rfs_weights(model, model.implied())?;
    Ok(ScoreMatrix {
        values: data.standardized() * w.transpose(),
        kind: ScoreKind::Rfs,
    })
}

/// `ρ_j = sqrt(diag(Λ'Σ̂⁻¹Λ))_j`.
pub fn determinacy_population(model: &FactorModel) -> Result<DeterminacyReport> {
    let w = rfs_weights(model, model.implied())?;
    let b = &w * model.loadings().values();
    let q = model.q();
    let mut rho = Vec::with_capacity(q);
    let mut clamped = vec![false; q];
    for j in 0..q {
        let d = b[(j, j)];
        if !(-1e-8..=1.0 + 1e-8).contains(&d) {
            return Err(Error::Numerical(format!(
                "squared determinacy of factor {j} is {d}, outside [0, 1]"
            )));
        }
        if !(0.0..=1.0).contains(&d) {
            clamped[j] = true;
        }
        rho.push(d.clamp(0.0, 1.0).sqrt());
    }
    Ok(DeterminacyReport {
        rho,
        basis: DeterminacyBasis::Population,
        clamped,
        undefined: vec![false; q],
    })
}

/// The two diagonals entering the sample determinacy formula for loadings
/// `l` with implied-inverse `sigma_inv` and observed correlations `s`:
/// `(diag(WSW'), diag(WΛ))` with `W = Λ'Σ⁻¹`.
pub(crate) fn determinacy_terms(
    l: &DMatrix<f64>,
    sigma_inv: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let w = l.tr_mul(sigma_inv);
    let ws = &w * s;
    let q = l.ncols();
    let mut var = Vec::with_capacity(q);
    let mut cov = Vec::with_capacity(q);
    for j in 0..q {
        var.push(ws.row(j).dot(&w.row(j)));
        cov.push(w.row(j).transpose().dot(&l.column(j)));
    }
    (var, cov)
}

/// Combines the diagonals into `cov / sqrt(var)`, clamping to `[0, 1]`.
pub(crate) fn determinacy_from_terms(
    var: &[f64],
    cov: &[f64],
    basis: DeterminacyBasis,
) -> DeterminacyReport {
    let q = var.len();
    let mut rho = vec![0.0; q];
    let mut clamped = vec![false; q];
    let mut undefined = vec![false; q];
    for j in 0..q {
        if !(var[j] > 0.0) || !cov[j].is_finite() {
            undefined[j] = true;
            continue;
        }
        let r = cov[j] / var[j].sqrt();
        if !(0.0..=1.0).contains(&r) {
            clamped[j] = true;
        }
        rho[j] = r.clamp(0.0, 1.0);
    }
    DeterminacyReport {
        rho,
        basis,
        clamped,
        undefined,
    }
}

/// Determinacy under sample misfit:
/// `diag(Λ'Σ̂⁻¹SΣ̂⁻¹Λ)^(-1/2) · diag(Λ'Σ̂⁻¹Λ)`.
pub fn determinacy_sample(model: &FactorModel, s: &CorrelationMatrix) -> Result<DeterminacyReport> {
    let report = sample_like(model, s, DeterminacyBasis::Sample)?;
    for (j, c) in report.clamped.iter().enumerate() {
        if *c {
            warn!("sample determinacy of factor {j} clamped to [0, 1]");
        }
    }
    Ok(report)
}

fn sample_like(
    model: &FactorModel,
    s: &CorrelationMatrix,
    basis: DeterminacyBasis,
) -> Result<DeterminacyReport> {
    if s.p() != model.p() {
        return Err(Error::Shape(format!(
            "model has {} variables, S has {}",
            model.p(),
            s.p()
        )));
    }
    let inv = linalg::spd_inverse(model.implied().values(), "implied correlation matrix")?;
    let (var, cov) = determinacy_terms(model.loadings().values(), &inv, s.values());
    Ok(determinacy_from_terms(&var, &cov, basis))
}

/// One leave-one-out refit: loadings rotated toward the total solution and
/// the determinacy of the reduced-sample predictor.
#[derive(Debug, Clone)]
pub struct LooFit {
    pub k: usize,
    /// Λ̂_(-k) after target rotation (q > 1) or sign alignment (q = 1).
    pub loadings: DMatrix<f64>,
    pub converged: bool,
    pub determinacy: Option<DeterminacyReport>,
}

pub(crate) fn loo_fit_from(
    cross: &CrossProducts,
    k: usize,
    n: usize,
    total: &FactorModel,
    opts: &PafOptions,
    with_determinacy: bool,
) -> LooFit {
    let failed = || LooFit {
        k,
        loadings: total.loadings().values().clone(),
        converged: false,
        determinacy: None,
    };
    let Ok(s) = cross.correlation_without(k) else {
        return failed();
    };
    let Ok(model) = paf_fit_n(&s, total.q(), n - 1, opts) else {
        return failed();
    };
    let Ok(rotated) = rotate_toward(model.loadings().values(), total.loadings().values()) else {
        return failed();
    };
    let rotated_model =
        model.with_rotated_loadings(crate::paf::LoadingMatrix::new(rotated.clone()));
    let determinacy = if with_determinacy {
        sample_like(&rotated_model, &s, DeterminacyBasis::Loo).ok()
    } else {
        None
    };
    LooFit {
        k,
        loadings: rotated,
        converged: model.converged(),
        determinacy,
    }
}

/// Refits the model without individual `k` and evaluates the determinacy of
/// the reduced-sample predictor against `S_(-k)`. Non-convergence is reported
/// in the result, not as an error.
pub fn loo_determinacy(
    data: &DataMatrix,
    q: usize,
    k: usize,
    total_model: &FactorModel,
    opts: &PafOptions,
) -> Result<LooFit> {
    if k >= data.n() {
        return Err(Error::Input(format!("row {k} out of range (n = {})", data.n())));
    }
    if q != total_model.q() {
        return Err(Error::Config(format!(
            "q = {q} but the total model has {} factors",
            total_model.q()
        )));
    }
    let cross = CrossProducts::new(data);
    Ok(loo_fit_from(&cross, k, data.n(), total_model, opts, true))
}

/// `ρ_j² − ρ_j(-k)²` for each factor; positive when individual k raises the
/// determinacy.
pub fn determinacy_influence(full: &DeterminacyReport, loo: &DeterminacyReport) -> Result<Vec<f64>> {
    if full.q() != loo.q() {
        return Err(Error::Shape(format!(
            "{} factors vs {} factors",
            full.q(),
            loo.q()
        )));
    }
    Ok(full
        .rho
        .iter()
        .zip(&loo.rho)
        .map(|(a, b)| a * a - b * b)
        .collect())
}

/// Per-individual squared-determinacy influence (n×q). Rows for individuals
/// whose leave-one-out fit failed are `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfluenceTable {
    pub delta_rho_sq: Vec<Option<Vec<f64>>>,
}

impl InfluenceTable {
    pub fn from_loo(full: &DeterminacyReport, fits: &[LooFit]) -> Result<Self> {
        let delta_rho_sq = fits
            .iter()
            .map(|f| match (&f.determinacy, f.converged) {
                (Some(d), true) => determinacy_influence(full, d).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { delta_rho_sq })
    }
}

/// Leave-one-out refits for every individual, in ascending k.
pub fn loo_sweep(
    data: &DataMatrix,
    total_model: &FactorModel,
    opts: &PafOptions,
    with_determinacy: bool,
) -> Vec<LooFit> {
    let cross = CrossProducts::new(data);
    let n = data.n();
    (0..n)
        .into_par_iter()
        .map(|k| loo_fit_from(&cross, k, n, total_model, opts, with_determinacy))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{correlation_from_data, CorrelationKind};
    use crate::paf::{paf_fit, LoadingMatrix};
    use crate::rotation::procrustes_target;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn model(l: &[f64], p: usize, q: usize) -> FactorModel {
        FactorModel::from_loadings(LoadingMatrix::new(DMatrix::from_row_slice(p, q, l)), 100).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, p: usize, q: usize) -> FactorModel {
        let l = DMatrix::from_fn(p, q, |_, _| rng.random_range(-0.5..0.5));
        FactorModel::from_loadings(LoadingMatrix::new(l), 100).unwrap()
    }

    fn simulate(l: &DMatrix<f64>, n: usize, seed: u64) -> (DataMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = l.shape();
        let psi: Vec<f64> = (0..p)
            .map(|i| (1.0 - l.row(i).norm_squared()).sqrt())
            .collect();
        let mut x = DMatrix::zeros(n, p);
        let mut xi = DMatrix::zeros(n, q);
        for k in 0..n {
            for j in 0..q {
                xi[(k, j)] = rng.sample(StandardNormal);
            }
            for i in 0..p {
                let e: f64 = rng.sample(StandardNormal);
                x[(k, i)] = (0..q).map(|j| l[(i, j)] * xi[(k, j)]).sum::<f64>() + psi[i] * e;
            }
        }
        (DataMatrix::from_matrix(x).unwrap(), xi)
    }

    #[test]
    fn identity_model_weights() {
        let m = model(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let w = rfs_weights(&m, m.implied()).unwrap();
        assert!((w - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn identity_model_scores_equal_standardized_data() {
        let m = model(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 2.0, 3.0, 1.0, 4.0, 0.0, 2.0, 2.0, 5.0, 7.0]);
        let d = DataMatrix::from_matrix(x).unwrap();
        let s = rfs_scores(&m, &d).unwrap();
        assert!((s.values - d.standardized()).amax() < 1e-12);
        assert_eq!(s.kind, ScoreKind::Rfs);
    }

    #[test]
    fn scalar_weight() {
        let m = model(&[0.8], 1, 1);
        let sigma = CorrelationMatrix::identity(1);
        let w = rfs_weights(&m, &sigma).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_variable_weights_from_closed_form_inverse() {
        // Σ = [[1, .36], [.36, 1]]; Σ⁻¹ = [[1, -.36], [-.36, 1]] / (1 - .36²).
        let det = 1.0 - 0.36f64 * 0.36;
        let expected = 0.6 * (1.0 - 0.36) / det;
        let m = model(&[0.6, 0.6], 2, 1);
        let w = rfs_weights(&m, m.implied()).unwrap();
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((w[1] - expected).abs() < 1e-12);
        assert!((expected - 0.441176).abs() < 1e-6);
    }

    #[test]
    fn mean_row_scores_zero() {
        let (d, _) = simulate(&DMatrix::from_column_slice(3, 1, &[0.7, 0.6, 0.5]), 50, 1);
        let mut x = d.values().clone();
        for j in 0..3 {
            // The mean of the other rows is also the mean of all rows.
            x[(0, j)] = x.column(j).rows(1, 49).mean();
        }
        let d = DataMatrix::from_matrix(x).unwrap();
        let m = model(&[0.7, 0.6, 0.5], 3, 1);
        let s = rfs_scores(&m, &d).unwrap();
        assert!(s.values[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn population_determinacy_cases() {
        let one = model(&[0.8], 1, 1);
        assert!((determinacy_population(&one).unwrap().rho[0] - 0.8).abs() < 1e-12);

        let two = model(&[0.6, 0.6], 2, 1);
        let expected = (0.4608f64 / 0.8704).sqrt();
        assert!((determinacy_population(&two).unwrap().rho[0] - expected).abs() < 1e-12);
        assert!((expected - 0.7276).abs() < 1e-4);

        let near_det = model(&[0.999999, 0.0, 0.0, 0.999999], 2, 2);
        assert!(determinacy_population(&near_det).unwrap().rho.iter().all(|r| *r > 0.999));
    }

    #[test]
    fn sample_determinacy_cases() {
        let m = model(&[0.6, 0.6], 2, 1);
        let pop = determinacy_population(&m).unwrap().rho[0];
        let at_implied = determinacy_sample(&m, m.implied()).unwrap().rho[0];
        assert!((pop - at_implied).abs() < 1e-12);

        let s = CorrelationMatrix::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.36, 0.36, 1.0]),
            CorrelationKind::Sample,
        )
        .unwrap();
        assert!((determinacy_sample(&m, &s).unwrap().rho[0] - 0.7276).abs() < 1e-4);

        // Direct matrix evaluation for S = I.
        let inv = m.implied().values().clone().try_inverse().unwrap();
        let l = m.loadings().values();
        let a = (l.transpose() * &inv * &inv * l)[0];
        let b = (l.transpose() * &inv * l)[0];
        let direct = b / a.sqrt();
        let got = determinacy_sample(&m, &CorrelationMatrix::identity(2)).unwrap().rho[0];
        assert!((got - direct).abs() < 1e-12);
        // Uncorrelated observations shrink the predictor variance more than
        // its covariance with the factor: .529412 / sqrt(.389273).
        assert!((got - 0.848528).abs() < 1e-6);
        assert!(got > pop);
    }

    #[test]
    fn influence_arithmetic() {
        let full = DeterminacyReport {
            rho: vec![0.9],
            basis: DeterminacyBasis::Sample,
            clamped: vec![false],
            undefined: vec![false],
        };
        let loo = DeterminacyReport {
            rho: vec![0.8],
            basis: DeterminacyBasis::Loo,
            ..full.clone()
        };
        let d = determinacy_influence(&full, &loo).unwrap();
        assert!((d[0] - 0.17).abs() < 1e-12);
        assert_eq!(determinacy_influence(&full, &full).unwrap(), vec![0.0]);
        assert!(determinacy_influence(&loo, &full).unwrap()[0] < 0.0);
    }

    #[test]
    fn deleting_either_copy_of_a_duplicated_row_gives_the_same_refit() {
        let (d, _) = simulate(&DMatrix::from_column_slice(4, 1, &[0.7, 0.6, 0.6, 0.5]), 120, 3);
        let mut x = d.values().clone();
        let dup = x.row(5).clone_owned();
        x = x.insert_row(120, 0.0);
        x.set_row(120, &dup);
        let d = DataMatrix::from_matrix(x).unwrap();
        let opts = PafOptions::default();
        let s = correlation_from_data(&d).unwrap();
        let total = paf_fit_n(&s, 1, d.n(), &opts).unwrap();
        let full = determinacy_sample(&total, &s).unwrap().rho[0];
        let copy = loo_determinacy(&d, 1, 120, &total, &opts).unwrap();
        let original = loo_determinacy(&d, 1, 5, &total, &opts).unwrap();
        assert!(copy.converged && original.converged);
        let a = copy.determinacy.unwrap().rho[0];
        let b = original.determinacy.unwrap().rho[0];
        assert!((a - b).abs() < 1e-10);
        assert!((a - full).abs() < 10.0 / 121.0);
    }

    #[test]
    fn loo_determinacy_is_close_to_full_and_jackknife_mean_agrees() {
        let l = DMatrix::from_column_slice(5, 1, &[0.7, 0.7, 0.6, 0.6, 0.5]);
        let (d, _) = simulate(&l, 200, 5);
        let opts = PafOptions::default();
        let s = correlation_from_data(&d).unwrap();
        let total = paf_fit_n(&s, 1, 200, &opts).unwrap();
        let full = determinacy_sample(&total, &s).unwrap().rho[0];
        let fits = loo_sweep(&d, &total, &opts, true);
        let mut mean_sq = 0.0;
        for f in &fits {
            let r = f.determinacy.as_ref().unwrap().rho[0];
            assert!((r - full).abs() < 10.0 / 200.0);
            mean_sq += r * r;
        }
        mean_sq /= 200.0;
        assert!((mean_sq - full * full).abs() < 1e-3);
        let table = InfluenceTable::from_loo(
            &determinacy_sample(&total, &s).unwrap(),
            &fits,
        )
        .unwrap();
        assert_eq!(table.delta_rho_sq.len(), 200);
    }

    #[test]
    fn rfs_scores_track_true_factor() {
        let l = DMatrix::from_column_slice(6, 1, &[0.7, 0.6, 0.5, 0.7, 0.6, 0.5]);
        let (d, xi) = simulate(&l, 100_000, 17);
        let m = FactorModel::from_loadings(LoadingMatrix::new(l), 100_000).unwrap();
        let s = rfs_scores(&m, &d).unwrap();
        let r = linalg::pearson(s.values.column(0).as_slice(), xi.column(0).as_slice()).unwrap();
        let rho = determinacy_population(&m).unwrap().rho[0];
        assert!((r - rho).abs() < 0.01, "{r} vs {rho}");
    }

    #[test]
    fn refit_population_matrix_is_rotation_equivalent() {
        let l = DMatrix::from_row_slice(6, 2, &[
            0.8, 0.1, 0.7, 0.2, 0.6, 0.0, 0.1, 0.7, 0.0, 0.6, 0.2, 0.8,
        ]);
        let m = FactorModel::from_loadings(LoadingMatrix::new(l.clone()), 500).unwrap();
        let opts = PafOptions {
            tolerance: 1e-12,
            max_iterations: 10_000,
            ..PafOptions::default()
        };
        let refit = paf_fit(m.implied(), 2, &opts).unwrap();
        let r = procrustes_target(refit.loadings().values(), &l).unwrap();
        assert!((r.rotated.values() - &l).amax() < 1e-6);
    }

    proptest! {
        #[test]
        fn sample_formula_reduces_to_population(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 6, 2);
            let a = determinacy_population(&m).unwrap();
            let b = determinacy_sample(&m, m.implied()).unwrap();
            for j in 0..2 {
                prop_assert!((a.rho[j] - b.rho[j]).abs() < 1e-10);
            }
        }

        #[test]
        fn influence_is_antisymmetric(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let mk = |r: f64| DeterminacyReport {
                rho: vec![r],
                basis: DeterminacyBasis::Sample,
                clamped: vec![false],
                undefined: vec![false],
            };
            let x = determinacy_influence(&mk(a), &mk(b)).unwrap()[0];
            let y = determinacy_influence(&mk(b), &mk(a)).unwrap()[0];
            prop_assert_eq!(x, -y);
        }
    }

    #[test]
    fn sample_determinacy_invariant_to_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 6, 2);
        let (st, ct) = 0.7f64.sin_cos();
        let rot = DMatrix::from_row_slice(2, 2, &[ct, -st, st, ct]);
        let rotated = m.with_rotated_loadings(LoadingMatrix::new(m.loadings().values() * rot));
        let s = CorrelationMatrix::identity(6);
        let _ = determinacy_sample(&m, &s).unwrap();
        // Population determinacy of a single factor depends on the axis, but the
        // sum of squared determinacies is invariant under rotation.
        let a: f64 = determinacy_population(&m).unwrap().squared().iter().sum();
        let b: f64 = determinacy_population(&rotated).unwrap().squared().iter().sum();
        assert!((a - b).abs() < 1e-8);
    }
}
