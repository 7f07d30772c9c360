//! TOML configuration files. Every command-line flag has a file counterpart;
//! flags override file values.

use std::path::{Path, PathBuf};

use hetfac::heterogeneity::{AcceptanceRule, Counting};
use hetfac::simulation::{CapPolicy, GCritPolicy, PopulationSpec, SimRotation};
use hetfac::Error;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFile {
    pub input: Option<PathBuf>,
    pub factors: Option<usize>,
    pub rotation: Option<String>,
    pub kaiser: Option<bool>,
    pub pattern: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub g_crit: Option<usize>,
    pub null_draws: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub counting: Option<String>,
    pub assignment: Option<Vec<usize>>,
    pub acceptance: Option<String>,
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_counting(name: &str, assignment: Option<Vec<usize>>) -> Result<Counting, Error> {
    match (name, assignment) {
        (_, Some(map)) if name == "assigned" || name == "all" || name == "largest" => {
            if name != "assigned" {
                log::warn!("an explicit assignment overrides counting = {name}");
            }
            Ok(Counting::Assigned(map))
        }
        ("all", None) => Ok(Counting::AllVariables),
        ("largest", None) => Ok(Counting::LargestLoading),
        ("assigned", None) => Err(Error::Config("counting = assigned needs an assignment".into())),
        (other, _) => Err(Error::Config(format!(
            "unknown counting {other:?} (expected all, largest or assigned)"
        ))),
    }
}

pub fn parse_acceptance(name: &str) -> Result<AcceptanceRule, Error> {
    match name {
        "misfit-increases" | "misfit_increases" => Ok(AcceptanceRule::MisfitIncreases),
        "misfit-decreases" | "misfit_decreases" => Ok(AcceptanceRule::MisfitDecreases),
        other => Err(Error::Config(format!(
            "unknown acceptance rule {other:?} (expected misfit-increases or misfit-decreases)"
        ))),
    }
}

/// Lists of values per grid dimension; the grid is their Cartesian product in
/// the order q, p_per_factor, mu, sigma, n.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub q: Vec<usize>,
    pub p_per_factor: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub n: Vec<usize>,
    pub cap: Option<f64>,
    pub cap_policy: Option<CapPolicy>,
}

impl GridAxes {
    pub fn conditions(&self) -> Result<Vec<PopulationSpec>, Error> {
        let mut out = Vec::new();
        for &q in &self.q {
            for &ppf in &self.p_per_factor {
                for &mu in &self.mu {
                    for &sigma in &self.sigma {
                        for &n in &self.n {
                            let mut spec = PopulationSpec::new(q, ppf, mu, sigma, n);
                            if let Some(cap) = self.cap {
                                spec.cap = cap;
                            }
                            if let Some(policy) = self.cap_policy {
                                spec.cap_policy = policy;
                            }
                            spec.validate()?;
                            out.push(spec);
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("the grid has no conditions".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationTable {
    pub replications: Option<usize>,
    pub null_draws: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// "ratio", or an integer.
    pub g_crit: Option<toml::Value>,
    pub alpha: Option<f64>,
    pub rotation: Option<SimRotation>,
    pub counting: Option<String>,
    pub full_scale: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub grid: GridAxes,
    #[serde(default)]
    pub simulation: SimulationTable,
}

pub fn parse_g_crit(value: &toml::Value) -> Result<GCritPolicy, Error> {
    match value {
        toml::Value::String(s) if s == "ratio" => Ok(GCritPolicy::Ratio),
        toml::Value::String(s) => s
            .parse::<usize>()
            .map(GCritPolicy::Fixed)
            .map_err(|_| Error::Config(format!("g_crit must be \"ratio\" or an integer, got {s:?}"))),
        toml::Value::Integer(i) if *i >= 0 => Ok(GCritPolicy::Fixed(*i as usize)),
        other => Err(Error::Config(format!("g_crit must be \"ratio\" or an integer, got {other}"))),
    }
}
