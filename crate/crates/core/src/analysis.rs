//! The two-step dataset analysis: fit, rotate, leave-one-out sweep, null
//! reference, heterogeneity test, then conditional scoring.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{correlation_from_data, DataMatrix};
use crate::error::{Error, Result};
use crate::heterogeneity::{
    accept_individual_loadings, heterogeneity_test, hrfs_determinacy, hrfs_scores,
    loo_loading_sweep, null_reference_sd, conditional_predictor, AcceptanceRule, Counting,
    CutoffRule, HeterogeneityReport, IndividualOptions, LooLoadingSet, LooOptions, Predictor,
    TestOptions,
};
use crate::linalg;
use crate::paf::{paf_fit_n, FactorModel, LoadingMatrix, PafOptions};
use crate::rng::{derive_seed, TAG_NULL_REFERENCE};
use crate::rotation::{align_sign, procrustes_target, varimax, VarimaxOptions};
use crate::scoring::{determinacy_sample, rfs_scores, InfluenceTable};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Rotation {
    Varimax {
        #[serde(default)]
        kaiser: bool,
    },
    /// Orthogonal target rotation toward a p×q pattern.
    Target { pattern: Vec<Vec<f64>> },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub factors: usize,
    pub rotation: Rotation,
    pub alpha: f64,
    /// Replaces the binomial cutoff when set.
    pub g_crit: Option<usize>,
    pub null_draws: usize,
    pub seed: u64,
    pub counting: Counting,
    pub acceptance: AcceptanceRule,
    pub paf: PafOptions,
    pub max_loo_failure_fraction: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            factors: 1,
            rotation: Rotation::Varimax { kaiser: false },
            alpha: 0.25,
            g_crit: None,
            null_draws: 50,
            seed: 0,
            counting: Counting::AllVariables,
            acceptance: AcceptanceRule::MisfitIncreases,
            paf: PafOptions::default(),
            max_loo_failure_fraction: 0.5,
        }
    }
}

impl AnalysisOptions {
    pub fn validate(&self) -> Result<()> {
        if self.factors == 0 {
            return Err(Error::Config("factors must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.null_draws == 0 {
            return Err(Error::Config("null draws must be at least 1".into()));
        }
        Ok(())
    }

    fn test_options(&self) -> TestOptions {
        TestOptions {
            cutoff: match self.g_crit {
                Some(c) => CutoffRule::Fixed(c),
                None => CutoffRule::Alpha(self.alpha),
            },
            counting: self.counting.clone(),
        }
    }

    fn loo_options(&self) -> LooOptions {
        LooOptions {
            paf: self.paf,
            max_failure_fraction: self.max_loo_failure_fraction,
        }
    }

    /// SHA-256 of the options serialized as JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("options serialize");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the column names and the bit patterns of every value.
pub fn data_hash(data: &DataMatrix) -> String {
    let mut h = Sha256::new();
    for name in data.column_names() {
        h.update(name.as_bytes());
        h.update([0u8]);
    }
    for i in 0..data.n() {
        for j in 0..data.p() {
            h.update(data.values()[(i, j)].to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: AnalysisOptions,
    pub config_hash: String,
    pub data_hash: String,
    pub n: usize,
    pub p: usize,
    pub column_names: Vec<String>,
}

impl Provenance {
    fn new(data: &DataMatrix, opts: &AnalysisOptions) -> Self {
        Self {
            tool: "hetfac".into(),
            version: VERSION.into(),
            seed: opts.seed,
            config: opts.clone(),
            config_hash: opts.hash(),
            data_hash: data_hash(data),
            n: data.n(),
            p: data.p(),
            column_names: data.column_names().to_vec(),
        }
    }

    /// True when `config` hashes to the recorded value.
    pub fn verify(&self) -> bool {
        self.config.hash() == self.config_hash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// Rotated loadings, p×q.
    pub loadings: Vec<Vec<f64>>,
    pub unique_variances: Vec<f64>,
    pub heywood_flags: Vec<(usize, usize)>,
    pub converged: bool,
    pub iterations: usize,
    /// Rotation matrix applied to the unrotated loadings.
    pub rotation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterminacySummary {
    /// Sample determinacy of RFS.
    pub rho_r: Vec<f64>,
    /// Mean individual determinacy of HRFS.
    pub rho_rk: Vec<f64>,
    /// HRFS value where the factor tested heterogeneous, RFS value otherwise.
    pub rho_tilde_rk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualSummary {
    pub acceptances: usize,
    pub opposite_rule_acceptances: usize,
    pub heywood_resets: usize,
    pub weight_fallbacks: usize,
    pub hrfs_fallback_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSummary {
    pub lambda0: Vec<Vec<f64>>,
    pub rescaled_rows: Vec<usize>,
    pub draws_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub fit: FitSummary,
    pub loo_converged: usize,
    pub null_reference: NullSummary,
    pub heterogeneity: HeterogeneityReport,
    pub chosen: Vec<Predictor>,
    pub determinacy: DeterminacySummary,
    pub individual: IndividualSummary,
    /// Conditional predictor values, n×q.
    pub scores: Vec<Vec<f64>>,
    /// `ρ_j² − ρ_j(−k)²` per individual; `None` where the refit failed.
    pub influence: Vec<Option<Vec<f64>>>,
}

/// Fitted and rotated total-sample model plus the rotation used.
fn fit_total(data: &DataMatrix, opts: &AnalysisOptions) -> Result<(FactorModel, nalgebra::DMatrix<f64>)> {
    opts.validate()?;
    let q = opts.factors;
    if q >= data.p() {
        return Err(Error::Config(format!("need fewer factors than variables (q = {q}, p = {})", data.p())));
    }
    let s = correlation_from_data(data)?;
    let fitted = paf_fit_n(&s, q, data.n(), &opts.paf)?;
    if !fitted.converged() {
        return Err(Error::Convergence(format!(
            "total-sample fit did not converge in {} iterations",
            fitted.iterations()
        )));
    }
    let raw = fitted.loadings().values();
    let (rotated, t) = match &opts.rotation {
        Rotation::None => (raw.clone(), nalgebra::DMatrix::identity(q, q)),
        Rotation::Varimax { kaiser } => {
            let r = varimax(
                fitted.loadings(),
                &VarimaxOptions {
                    kaiser: *kaiser,
                    ..VarimaxOptions::default()
                },
            );
            (r.rotated.into_values(), r.transform)
        }
        Rotation::Target { pattern } => {
            let target = linalg::from_rows(pattern)?;
            if target.shape() != raw.shape() {
                return Err(Error::Config(format!(
                    "target pattern is {}x{}, the model is {}x{}",
                    target.nrows(),
                    target.ncols(),
                    raw.nrows(),
                    raw.ncols()
                )));
            }
            if q == 1 {
                let sign = if raw.column(0).dot(&target.column(0)) < 0.0 { -1.0 } else { 1.0 };
                (align_sign(raw, &target)?, nalgebra::DMatrix::from_element(1, 1, sign))
            } else {
                let r = procrustes_target(raw, &target)?;
                (r.rotated.into_values(), r.transform)
            }
        }
    };
    let flags = fitted.loadings().heywood_flags().clone();
    Ok((
        fitted.with_rotated_loadings(LoadingMatrix::with_flags(rotated, flags)),
        t,
    ))
}

struct Tested {
    model: FactorModel,
    transform: nalgebra::DMatrix<f64>,
    loo: LooLoadingSet,
    null: NullSummary,
    report: HeterogeneityReport,
}

fn run_test(data: &DataMatrix, opts: &AnalysisOptions) -> Result<Tested> {
    let (model, transform) = fit_total(data, opts)?;
    let loo = loo_loading_sweep(data, &model, &opts.loo_options())?;
    let null = null_reference_sd(
        &loo,
        data.n(),
        opts.null_draws,
        derive_seed(opts.seed, &[TAG_NULL_REFERENCE]),
        &opts.loo_options(),
    )?;
    let report = heterogeneity_test(
        &loo.sds,
        &null.mean_sd_matrix(),
        model.loadings().values(),
        opts.null_draws,
        &opts.test_options(),
    )?;
    Ok(Tested {
        model,
        transform,
        loo,
        null: NullSummary {
            lambda0: null.lambda0,
            rescaled_rows: null.rescaled_rows,
            draws_used: null.draws_used,
        },
        report,
    })
}

fn fit_summary(model: &FactorModel, transform: &nalgebra::DMatrix<f64>) -> FitSummary {
    FitSummary {
        loadings: linalg::to_rows(model.loadings().values()),
        unique_variances: model.unique_variances().iter().copied().collect(),
        heywood_flags: model.loadings().heywood_flags().iter().copied().collect(),
        converged: model.converged(),
        iterations: model.iterations(),
        rotation: linalg::to_rows(transform),
    }
}

/// Runs the whole two-step procedure on one dataset.
pub fn analyze(data: &DataMatrix, opts: &AnalysisOptions) -> Result<AnalysisReport> {
    let tested = run_test(data, opts)?;
    let model = &tested.model;
    let s = correlation_from_data(data)?;
    let individual = accept_individual_loadings(
        data,
        model,
        &tested.loo,
        &IndividualOptions {
            rule: opts.acceptance,
            ..IndividualOptions::default()
        },
    )?;
    let rfs = rfs_scores(model, data)?;
    let hrfs = hrfs_scores(&individual, model, data, &s)?;
    let full = determinacy_sample(model, &s)?;
    let rho_rk = hrfs_determinacy(&individual, &s)?.rho;
    let decisions = tested.report.decisions();
    let conditional = conditional_predictor(&decisions, &rfs, &hrfs.scores, &full.rho, &rho_rk)?;
    let influence = InfluenceTable::from_loo(&full, &tested.loo.fits)?;

    Ok(AnalysisReport {
        provenance: Provenance::new(data, opts),
        fit: fit_summary(model, &tested.transform),
        loo_converged: tested.loo.n_converged,
        null_reference: tested.null,
        heterogeneity: tested.report,
        chosen: conditional.chosen,
        determinacy: DeterminacySummary {
            rho_r: full.rho,
            rho_rk,
            rho_tilde_rk: conditional.rho,
        },
        individual: IndividualSummary {
            acceptances: individual.acceptances,
            opposite_rule_acceptances: individual.opposite_rule_acceptances,
            heywood_resets: individual.heywood_resets,
            weight_fallbacks: individual.weight_fallbacks,
            hrfs_fallback_rows: hrfs.fallback_rows,
        },
        scores: linalg::to_rows(&conditional.scores.values),
        influence: influence.delta_rho_sq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub provenance: Provenance,
    pub fit: FitSummary,
    pub loo_converged: usize,
    pub null_reference: NullSummary,
    pub heterogeneity: HeterogeneityReport,
}

/// The heterogeneity test stage alone.
pub fn test_only(data: &DataMatrix, opts: &AnalysisOptions) -> Result<TestReport> {
    let tested = run_test(data, opts)?;
    Ok(TestReport {
        provenance: Provenance::new(data, opts),
        fit: fit_summary(&tested.model, &tested.transform),
        loo_converged: tested.loo.n_converged,
        null_reference: tested.null,
        heterogeneity: tested.report,
    })
}
