//! Populations with heterogeneous individual loadings, per-individual data
//! generation and the Monte Carlo harness comparing RFS with HRFS.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{correlation_from_data, DataMatrix};
use crate::error::{Error, Result};
use crate::heterogeneity::{
    accept_individual_loadings, binomial_right_tail, check_failures, heterogeneity_test,
    hrfs_determinacy, hrfs_scores, null_reference_sd, Counting, CutoffRule, Decision,
    IndividualOptions, LooLoadingSet, LooOptions, TestOptions,
};
use crate::linalg;
use crate::paf::{paf_fit_n, LoadingMatrix};
use crate::rng::{derive_seed, stream, TAG_LOADINGS, TAG_NULL_REFERENCE, TAG_SAMPLE};
use crate::rotation::{align_sign, rotate_toward, varimax, VarimaxOptions};
use crate::scoring::{determinacy_sample, loo_sweep, rfs_scores, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapPolicy {
    /// Shrink one individual's loadings on one factor.
    PerIndividual,
    /// Shrink the factor's loadings for every individual by one constant.
    PerSample,
}

/// Simple-structure population: variable i is salient on factor
/// `i / p_per_factor` and has zero cross-loadings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub q: usize,
    pub p_per_factor: usize,
    pub mu_loading: f64,
    pub sigma_loading: f64,
    pub n: usize,
    pub cap: f64,
    pub cap_policy: CapPolicy,
}

impl PopulationSpec {
    pub fn new(q: usize, p_per_factor: usize, mu_loading: f64, sigma_loading: f64, n: usize) -> Self {
        Self {
            q,
            p_per_factor,
            mu_loading,
            sigma_loading,
            n,
            cap: 0.98,
            cap_policy: CapPolicy::PerIndividual,
        }
    }

    pub fn p(&self) -> usize {
        self.q * self.p_per_factor
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.p_per_factor < 2 {
            return Err(Error::Config("need q >= 1 and at least 2 variables per factor".into()));
        }
        if !(self.mu_loading > 0.0 && self.mu_loading < 1.0) {
            return Err(Error::Config(format!("mean loading must lie in (0, 1), got {}", self.mu_loading)));
        }
        if !(self.sigma_loading >= 0.0) || !self.sigma_loading.is_finite() {
            return Err(Error::Config(format!("loading SD must be >= 0, got {}", self.sigma_loading)));
        }
        if !(self.cap > 0.0 && self.cap <= 0.99) {
            return Err(Error::Config(format!("loading cap must lie in (0, .99], got {}", self.cap)));
        }
        if self.n < self.p() + 2 {
            return Err(Error::Config(format!("n = {} is below p + 2 = {}", self.n, self.p() + 2)));
        }
        Ok(())
    }

    /// The salient pattern with every salient loading at the mean.
    pub fn salient_pattern(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), self.q, |i, j| {
            if i / self.p_per_factor == j {
                self.mu_loading
            } else {
                0.0
            }
        })
    }

    fn factor_of(&self, i: usize) -> usize {
        i / self.p_per_factor
    }
}

#[derive(Debug, Clone)]
pub struct IndividualLoadings {
    /// Λ_k for each individual, p×q.
    pub loadings: Vec<DMatrix<f64>>,
    pub rescale_events: usize,
}

/// Draws n loadings per salient position and standardizes them to exactly
/// the requested mean and SD (population denominator n), then applies the
/// cap.
pub fn generate_individual_loadings(spec: &PopulationSpec, rng: &mut ChaCha8Rng) -> Result<IndividualLoadings> {
    spec.validate()?;
    let mut loadings = uncapped_loadings(spec, rng);
    let rescale_events = apply_cap(spec, &mut loadings);
    Ok(IndividualLoadings {
        loadings,
        rescale_events,
    })
}

fn uncapped_loadings(spec: &PopulationSpec, rng: &mut ChaCha8Rng) -> Vec<DMatrix<f64>> {
    let (n, p, q) = (spec.n, spec.p(), spec.q);
    let mut loadings = vec![DMatrix::zeros(p, q); n];
    let mut draws = vec![0.0; n];
    for i in 0..p {
        let j = spec.factor_of(i);
        for d in draws.iter_mut() {
            *d = rng.sample(StandardNormal);
        }
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        for (k, l) in loadings.iter_mut().enumerate() {
            l[(i, j)] = if spec.sigma_loading == 0.0 || sd == 0.0 {
                spec.mu_loading
            } else {
                spec.mu_loading + spec.sigma_loading * (draws[k] - mean) / sd
            };
        }
    }
    loadings
}

fn apply_cap(spec: &PopulationSpec, loadings: &mut [DMatrix<f64>]) -> usize {
    let q = spec.q;
    let mut rescale_events = 0;
    let positions = |j: usize| j * spec.p_per_factor..(j + 1) * spec.p_per_factor;
    match spec.cap_policy {
        CapPolicy::PerIndividual => {
            for l in loadings.iter_mut() {
                for j in 0..q {
                    let max = positions(j).map(|i| l[(i, j)].abs()).fold(0.0, f64::max);
                    if max > spec.cap {
                        let f = spec.cap / max;
                        for i in positions(j) {
                            l[(i, j)] *= f;
                        }
                        rescale_events += 1;
                    }
                }
            }
        }
        CapPolicy::PerSample => {
            for j in 0..q {
                let max = loadings
                    .iter()
                    .flat_map(|l| positions(j).map(move |i| l[(i, j)].abs()))
                    .fold(0.0, f64::max);
                if max > spec.cap {
                    let f = spec.cap / max;
                    for l in loadings.iter_mut() {
                        for i in positions(j) {
                            l[(i, j)] *= f;
                        }
                    }
                    rescale_events += 1;
                }
            }
        }
    }
    rescale_events
}

#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub data: DataMatrix,
    /// ξ per individual, n×q.
    pub true_scores: DMatrix<f64>,
    pub individual_loadings: Vec<DMatrix<f64>>,
    pub rescale_events: usize,
}

/// `x_k = Λ_kξ_k + Ψ_kε_k` with `Ψ²_k = 1 − diag(Λ_kΛ_k')`, so every
/// individual's variables have unit variance. Individual k draws from its own
/// stream under `seed`.
pub fn generate_sample(loadings: IndividualLoadings, seed: u64) -> Result<GeneratedSample> {
    let n = loadings.loadings.len();
    let Some(first) = loadings.loadings.first() else {
        return Err(Error::Input("no individuals to generate".into()));
    };
    let (p, q) = first.shape();
    let mut x = DMatrix::zeros(n, p);
    let mut xi = DMatrix::zeros(n, q);
    for (k, l) in loadings.loadings.iter().enumerate() {
        let mut rng = stream(seed, &[TAG_SAMPLE, k as u64]);
        for j in 0..q {
            xi[(k, j)] = rng.sample(StandardNormal);
        }
        for i in 0..p {
            let h = l.row(i).norm_squared();
            assert!(h <= 1.0 + 1e-12, "individual communality {h} above 1");
            let e: f64 = rng.sample(StandardNormal);
            let common: f64 = (0..q).map(|j| l[(i, j)] * xi[(k, j)]).sum();
            x[(k, i)] = common + (1.0 - h).max(0.0).sqrt() * e;
        }
    }
    Ok(GeneratedSample {
        data: DataMatrix::from_matrix(x)?,
        true_scores: xi,
        individual_loadings: loadings.loadings,
        rescale_events: loadings.rescale_events,
    })
}

/// Pearson correlation of each predictor column with the matching true-score
/// column.
pub fn score_based_determinacy(scores: &ScoreMatrix, true_scores: &DMatrix<f64>) -> Result<Vec<f64>> {
    if scores.values.shape() != true_scores.shape() {
        return Err(Error::Shape("scores and true scores differ in shape".into()));
    }
    (0..true_scores.ncols())
        .map(|j| {
            let a: Vec<f64> = scores.values.column(j).iter().copied().collect();
            let b: Vec<f64> = true_scores.column(j).iter().copied().collect();
            linalg::pearson(&a, &b)
                .ok_or_else(|| Error::Numerical(format!("predictor column {j} has zero variance")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRotation {
    /// Orthogonal target rotation toward the salient pattern.
    Target,
    /// Varimax, with columns then matched to the pattern by order and sign.
    Varimax,
}

/// How 𝒢_crit is chosen in the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GCritPolicy {
    /// 5 of 6, 9 of 12, 15 of 18, 30 of 36; otherwise ⌈.83·p⌉.
    Ratio,
    Alpha(f64),
    /// Values above p switch the test off.
    Fixed(usize),
}

impl GCritPolicy {
    pub fn cutoff_rule(&self, p: usize) -> CutoffRule {
        match *self {
            GCritPolicy::Ratio => CutoffRule::Fixed(ratio_g_crit(p)),
            GCritPolicy::Alpha(a) => CutoffRule::Alpha(a),
            GCritPolicy::Fixed(c) => CutoffRule::Fixed(c),
        }
    }
}

pub fn ratio_g_crit(p: usize) -> usize {
    match p {
        6 => 5,
        12 => 9,
        18 => 15,
        36 => 30,
        _ => (0.83 * p as f64).ceil() as usize,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub n_d: usize,
    pub g_crit: GCritPolicy,
    pub rotation: SimRotation,
    pub counting: Counting,
    pub loo: LooOptions,
    pub individual: IndividualOptions,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            n_d: 10,
            g_crit: GCritPolicy::Ratio,
            rotation: SimRotation::Target,
            counting: Counting::AllVariables,
            loo: LooOptions::default(),
            individual: IndividualOptions::default(),
        }
    }
}

/// Everything recorded for one replication. Determinacy vectors are empty
/// when the replication failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub seed: u64,
    pub converged: bool,
    pub failure: Option<String>,
    pub rho_r: Vec<f64>,
    pub rho_rk: Vec<f64>,
    pub rho_tilde_rk: Vec<f64>,
    pub rho_xi_r: Vec<f64>,
    pub rho_xi_rk: Vec<f64>,
    pub rho_tilde_xi_rk: Vec<f64>,
    pub g: Vec<usize>,
    pub g_crit: Vec<usize>,
    pub decisions: Vec<Decision>,
    pub rescale_events: usize,
    pub acceptances: usize,
    pub heywood_resets: usize,
    pub loo_converged_fraction: f64,
}

impl ReplicationRecord {
    fn failed(replication: usize, seed: u64, reason: String, rescale_events: usize) -> Self {
        Self {
            replication,
            seed,
            converged: false,
            failure: Some(reason),
            rho_r: vec![],
            rho_rk: vec![],
            rho_tilde_rk: vec![],
            rho_xi_r: vec![],
            rho_xi_rk: vec![],
            rho_tilde_xi_rk: vec![],
            g: vec![],
            g_crit: vec![],
            decisions: vec![],
            rescale_events,
            acceptances: 0,
            heywood_resets: 0,
            loo_converged_fraction: 0.0,
        }
    }
}

/// Reorders and re-signs columns to line up with the pattern, taking the
/// largest absolute cross-product first.
fn match_columns(l: &DMatrix<f64>, pattern: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = l.ncols();
    let c = l.tr_mul(pattern);
    let mut used_src = vec![false; q];
    let mut used_dst = vec![false; q];
    let mut out = DMatrix::zeros(l.nrows(), q);
    for _ in 0..q {
        let mut best = (0, 0, -1.0);
        for a in 0..q {
            for b in 0..q {
                if !used_src[a] && !used_dst[b] && c[(a, b)].abs() > best.2 {
                    best = (a, b, c[(a, b)].abs());
                }
            }
        }
        used_src[best.0] = true;
        used_dst[best.1] = true;
        out.set_column(best.1, &l.column(best.0));
    }
    align_sign(&out, pattern)
}

fn replicate(spec: &PopulationSpec, opts: &SimulationOptions, seed: u64) -> std::result::Result<ReplicationRecord, (String, usize)> {
    let fail = |e: Error, r: usize| (e.to_string(), r);
    let mut rng = stream(seed, &[TAG_LOADINGS]);
    let loadings = generate_individual_loadings(spec, &mut rng).map_err(|e| fail(e, 0))?;
    let rescale_events = loadings.rescale_events;
    let sample = generate_sample(loadings, seed).map_err(|e| fail(e, rescale_events))?;
    let data = &sample.data;
    let (n, p, q) = (spec.n, spec.p(), spec.q);

    let s = correlation_from_data(data).map_err(|e| fail(e, rescale_events))?;
    let fitted = paf_fit_n(&s, q, n, &opts.loo.paf).map_err(|e| fail(e, rescale_events))?;
    if !fitted.converged() {
        return Err(("total-sample fit did not converge".into(), rescale_events));
    }
    let pattern = spec.salient_pattern();
    let rotated = match opts.rotation {
        SimRotation::Target => rotate_toward(fitted.loadings().values(), &pattern),
        SimRotation::Varimax => {
            let v = varimax(fitted.loadings(), &VarimaxOptions::default());
            match_columns(v.rotated.values(), &pattern)
        }
    }
    .map_err(|e| fail(e, rescale_events))?;
    let model = fitted.with_rotated_loadings(LoadingMatrix::new(rotated));

    let loo = LooLoadingSet::from_fits(loo_sweep(data, &model, &opts.loo.paf, false), p, q);
    check_failures(&loo, &opts.loo).map_err(|e| fail(e, rescale_events))?;
    let null = null_reference_sd(&loo, n, opts.n_d, derive_seed(seed, &[TAG_NULL_REFERENCE]), &opts.loo)
        .map_err(|e| fail(e, rescale_events))?;
    let test_opts = TestOptions {
        cutoff: opts.g_crit.cutoff_rule(p),
        counting: opts.counting.clone(),
    };
    let report = heterogeneity_test(
        &loo.sds,
        &null.mean_sd_matrix(),
        model.loadings().values(),
        opts.n_d,
        &test_opts,
    )
    .map_err(|e| fail(e, rescale_events))?;

    let individual =
        accept_individual_loadings(data, &model, &loo, &opts.individual).map_err(|e| fail(e, rescale_events))?;
    let rfs = rfs_scores(&model, data).map_err(|e| fail(e, rescale_events))?;
    let hrfs = hrfs_scores(&individual, &model, data, &s).map_err(|e| fail(e, rescale_events))?;
    let rho_r = determinacy_sample(&model, &s).map_err(|e| fail(e, rescale_events))?.rho;
    let rho_rk = hrfs_determinacy(&individual, &s).map_err(|e| fail(e, rescale_events))?.rho;
    let rho_xi_r = score_based_determinacy(&rfs, &sample.true_scores).map_err(|e| fail(e, rescale_events))?;
    let rho_xi_rk = score_based_determinacy(&hrfs.scores, &sample.true_scores).map_err(|e| fail(e, rescale_events))?;

    let decisions = report.decisions();
    let pick = |het: &[f64], hom: &[f64]| -> Vec<f64> {
        (0..q)
            .map(|j| if decisions[j] == Decision::Heterogeneous { het[j] } else { hom[j] })
            .collect()
    };
    Ok(ReplicationRecord {
        replication: 0,
        seed,
        converged: true,
        failure: None,
        rho_tilde_rk: pick(&rho_rk, &rho_r),
        rho_tilde_xi_rk: pick(&rho_xi_rk, &rho_xi_r),
        rho_r,
        rho_rk,
        rho_xi_r,
        rho_xi_rk,
        g: report.factors.iter().map(|f| f.g).collect(),
        g_crit: report.factors.iter().map(|f| f.g_crit).collect(),
        decisions,
        rescale_events,
        acceptances: individual.acceptances,
        heywood_resets: individual.heywood_resets,
        loo_converged_fraction: loo.converged_fraction(),
    })
}

/// Generates one sample, fits and rotates the total model, runs the
/// leave-one-out sweep, null reference and test, and evaluates the four
/// determinacy estimates with the conditional choice applied.
pub fn run_replication(spec: &PopulationSpec, opts: &SimulationOptions, seed: u64) -> ReplicationRecord {
    match replicate(spec, opts, seed) {
        Ok(r) => r,
        Err((reason, events)) => ReplicationRecord::failed(0, seed, reason, events),
    }
}

/// Seed of replication r of a condition; keyed by the condition's values so
/// a cell's results do not depend on the rest of the grid.
pub fn replication_seed(master: u64, spec: &PopulationSpec, r: usize) -> u64 {
    derive_seed(
        master,
        &[
            spec.q as u64,
            spec.p_per_factor as u64,
            spec.mu_loading.to_bits(),
            spec.sigma_loading.to_bits(),
            spec.n as u64,
            spec.cap.to_bits(),
            r as u64,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error of the mean; 0 with fewer than two values.
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let m = values.len();
        let mean = values.iter().sum::<f64>() / m as f64;
        let se = if m < 2 {
            0.0
        } else {
            linalg::sample_sd(values) / (m as f64).sqrt()
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub factor: usize,
    pub rho_r: MeanSe,
    pub rho_tilde_rk: MeanSe,
    pub rho_xi_r: MeanSe,
    pub rho_tilde_xi_rk: MeanSe,
    /// Unconditional HRFS values, for reference.
    pub rho_rk: MeanSe,
    pub rho_xi_rk: MeanSe,
    /// `ρ̃_rk − ρ̂_r`.
    pub delta_parameter: MeanSe,
    /// `ρ̃_ξrk − ρ̂_ξr`.
    pub delta_score: MeanSe,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub spec: PopulationSpec,
    pub replications: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    /// False when fewer than a quarter of the replications converged; the
    /// factor summaries are then empty.
    pub summarized: bool,
    pub g_crit: usize,
    pub alpha_exact: f64,
    pub mean_rescale_events: f64,
    pub factors: Vec<FactorSummary>,
}

const MIN_CONVERGENCE_RATE: f64 = 0.25;

/// Folds records (in replication order) into per-factor means and SEs.
pub fn summarize(spec: &PopulationSpec, opts: &SimulationOptions, records: &[ReplicationRecord]) -> ConditionSummary {
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.converged).collect();
    let replications = records.len();
    let convergence_rate = ok.len() as f64 / replications.max(1) as f64;
    let summarized = !ok.is_empty() && convergence_rate >= MIN_CONVERGENCE_RATE;
    let p = spec.p();
    let trials = match &opts.counting {
        Counting::AllVariables => p,
        _ => spec.p_per_factor,
    };
    let (g_crit, alpha_exact) = match opts.g_crit.cutoff_rule(trials) {
        CutoffRule::Fixed(c) => (c, binomial_right_tail(trials, c)),
        CutoffRule::Alpha(a) => crate::heterogeneity::binomial_cutoff(trials, a)
            .map(|c| (c.g_crit, c.alpha_exact))
            .unwrap_or((trials + 1, 0.0)),
    };
    let factors = if summarized {
        (0..spec.q)
            .map(|j| {
                let col = |f: fn(&ReplicationRecord) -> &Vec<f64>| -> Vec<f64> {
                    ok.iter().map(|r| f(r)[j]).collect()
                };
                let diff = |a: &[f64], b: &[f64]| -> Vec<f64> {
                    a.iter().zip(b).map(|(x, y)| x - y).collect()
                };
                let r = col(|r| &r.rho_r);
                let trk = col(|r| &r.rho_tilde_rk);
                let xr = col(|r| &r.rho_xi_r);
                let txrk = col(|r| &r.rho_tilde_xi_rk);
                let rejected = ok
                    .iter()
                    .filter(|r| r.decisions[j] == Decision::Heterogeneous)
                    .count();
                FactorSummary {
                    factor: j,
                    rho_r: MeanSe::of(&r),
                    rho_tilde_rk: MeanSe::of(&trk),
                    rho_xi_r: MeanSe::of(&xr),
                    rho_tilde_xi_rk: MeanSe::of(&txrk),
                    rho_rk: MeanSe::of(&col(|r| &r.rho_rk)),
                    rho_xi_rk: MeanSe::of(&col(|r| &r.rho_xi_rk)),
                    delta_parameter: MeanSe::of(&diff(&trk, &r)),
                    delta_score: MeanSe::of(&diff(&txrk, &xr)),
                    rejection_rate: rejected as f64 / ok.len() as f64,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    ConditionSummary {
        spec: *spec,
        replications,
        converged: ok.len(),
        convergence_rate,
        summarized,
        g_crit,
        alpha_exact,
        mean_rescale_events: records.iter().map(|r| r.rescale_events as f64).sum::<f64>()
            / replications.max(1) as f64,
        factors,
    }
}

/// Runs `replications` seeded replications of one condition in parallel.
pub fn run_condition(
    spec: &PopulationSpec,
    replications: usize,
    opts: &SimulationOptions,
    seed: u64,
) -> Result<(Vec<ReplicationRecord>, ConditionSummary)> {
    spec.validate()?;
    if replications == 0 {
        return Err(Error::Config("replications must be at least 1".into()));
    }
    if opts.n_d == 0 {
        return Err(Error::Config("the number of null-reference samples must be at least 1".into()));
    }
    let records: Vec<ReplicationRecord> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rec = run_replication(spec, opts, replication_seed(seed, spec, r));
            rec.replication = r;
            rec
        })
        .collect();
    let summary = summarize(spec, opts, &records);
    Ok((records, summary))
}

/// Runs every condition of the grid. Work is spread over the current rayon
/// pool; results are folded in grid and replication order.
pub fn run_study(
    grid: &[PopulationSpec],
    replications: usize,
    opts: &SimulationOptions,
    seed: u64,
) -> Result<Vec<ConditionSummary>> {
    if grid.is_empty() {
        return Err(Error::Config("the simulation grid is empty".into()));
    }
    for spec in grid {
        spec.validate()?;
    }
    grid.iter()
        .map(|spec| run_condition(spec, replications, opts, seed).map(|(_, s)| s))
        .collect()
}
