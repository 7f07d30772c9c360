use std::fs;
use std::path::Path;

use hetfac::analysis::{AnalysisReport, FitSummary};
use hetfac::simulation::{ConditionSummary, MeanSe, ReplicationRecord};
use hetfac::Error;
use serde::Serialize;

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    csv::Writer::from_path(path).map_err(|e| io(path, e))
}

fn factor_names(q: usize) -> Vec<String> {
    (1..=q).map(|j| format!("F{j}")).collect()
}

fn rows<W: std::io::Write>(w: &mut csv::Writer<W>, path: &Path, rows: &[Vec<String>]) -> Result<(), Error> {
    for r in rows {
        w.write_record(r).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

pub fn write_loadings(path: &Path, fit: &FitSummary, names: &[String]) -> Result<(), Error> {
    let q = fit.loadings.first().map_or(0, |r| r.len());
    let mut header = vec!["variable".to_string()];
    header.extend(factor_names(q));
    header.push("communality".into());
    header.push("unique_variance".into());
    let mut out = vec![header];
    for (i, row) in fit.loadings.iter().enumerate() {
        let mut r = vec![names[i].clone()];
        r.extend(row.iter().map(|v| v.to_string()));
        r.push(row.iter().map(|v| v * v).sum::<f64>().to_string());
        r.push(fit.unique_variances[i].to_string());
        out.push(r);
    }
    rows(&mut csv_writer(path)?, path, &out)
}

pub fn write_scores(path: &Path, report: &AnalysisReport) -> Result<(), Error> {
    let q = report.chosen.len();
    let mut header = vec!["id".to_string()];
    header.extend(factor_names(q));
    let mut out = vec![header];
    for (k, row) in report.scores.iter().enumerate() {
        let mut r = vec![(k + 1).to_string()];
        r.extend(row.iter().map(|v| v.to_string()));
        out.push(r);
    }
    rows(&mut csv_writer(path)?, path, &out)
}

/// Long format: one row per factor and estimator.
pub fn write_determinacy(path: &Path, report: &AnalysisReport) -> Result<(), Error> {
    let d = &report.determinacy;
    let mut out = vec![vec![
        "factor".to_string(),
        "estimator".into(),
        "value".into(),
        "g".into(),
        "g_crit".into(),
        "decision".into(),
    ]];
    for (j, f) in report.heterogeneity.factors.iter().enumerate() {
        let decision = serde_json::to_value(f.decision)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        for (name, v) in [("rho_r", d.rho_r[j]), ("rho_rk", d.rho_rk[j]), ("rho_tilde_rk", d.rho_tilde_rk[j])] {
            out.push(vec![
                format!("F{}", j + 1),
                name.into(),
                v.to_string(),
                f.g.to_string(),
                f.g_crit.to_string(),
                decision.clone(),
            ]);
        }
    }
    rows(&mut csv_writer(path)?, path, &out)
}

pub fn write_influence(path: &Path, report: &AnalysisReport) -> Result<(), Error> {
    let q = report.chosen.len();
    let mut header = vec!["id".to_string()];
    header.extend((1..=q).map(|j| format!("delta_rho_sq_F{j}")));
    let mut out = vec![header];
    for (k, row) in report.influence.iter().enumerate() {
        let mut r = vec![(k + 1).to_string()];
        match row {
            Some(v) => r.extend(v.iter().map(|x| x.to_string())),
            None => r.extend(std::iter::repeat_n(String::new(), q)),
        }
        out.push(r);
    }
    rows(&mut csv_writer(path)?, path, &out)
}

fn condition_cells(c: &ConditionSummary) -> Vec<String> {
    let s = &c.spec;
    vec![
        s.q.to_string(),
        s.p_per_factor.to_string(),
        s.mu_loading.to_string(),
        s.sigma_loading.to_string(),
        s.n.to_string(),
    ]
}

const CONDITION_HEADER: [&str; 5] = ["q", "p_per_factor", "mu", "sigma", "n"];

/// One row per condition and factor; conditions that were not summarized get
/// a single row with empty estimates.
pub fn write_summary_csv(path: &Path, summaries: &[ConditionSummary]) -> Result<(), Error> {
    let estimators = [
        "rho_r",
        "rho_tilde_rk",
        "rho_xi_r",
        "rho_tilde_xi_rk",
        "rho_rk",
        "rho_xi_rk",
        "delta_parameter",
        "delta_score",
    ];
    let mut header: Vec<String> = CONDITION_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(
        ["replications", "converged", "convergence_rate", "summarized", "g_crit", "alpha_exact", "factor"]
            .map(String::from),
    );
    for e in estimators {
        header.push(format!("{e}_mean"));
        header.push(format!("{e}_se"));
    }
    header.push("rejection_rate".into());
    let width = header.len();
    let mut out = vec![header];
    for c in summaries {
        let mut base = condition_cells(c);
        base.extend([
            c.replications.to_string(),
            c.converged.to_string(),
            c.convergence_rate.to_string(),
            c.summarized.to_string(),
            c.g_crit.to_string(),
            c.alpha_exact.to_string(),
        ]);
        if c.factors.is_empty() {
            let mut r = base.clone();
            r.resize(width, String::new());
            out.push(r);
        }
        for f in &c.factors {
            let mut r = base.clone();
            r.push(format!("F{}", f.factor + 1));
            let cells: [&MeanSe; 8] = [
                &f.rho_r,
                &f.rho_tilde_rk,
                &f.rho_xi_r,
                &f.rho_tilde_xi_rk,
                &f.rho_rk,
                &f.rho_xi_rk,
                &f.delta_parameter,
                &f.delta_score,
            ];
            for m in cells {
                r.push(m.mean.to_string());
                r.push(m.se.to_string());
            }
            r.push(f.rejection_rate.to_string());
            out.push(r);
        }
    }
    rows(&mut csv_writer(path)?, path, &out)
}

/// Long format keyed by condition, factor and estimator.
pub fn write_figure_csv(path: &Path, summaries: &[ConditionSummary]) -> Result<(), Error> {
    let mut header: Vec<String> = CONDITION_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(["factor", "estimator", "mean", "se"].map(String::from));
    let mut out = vec![header];
    for c in summaries {
        for f in &c.factors {
            for (name, m) in [
                ("rho_r", &f.rho_r),
                ("rho_tilde_rk", &f.rho_tilde_rk),
                ("rho_xi_r", &f.rho_xi_r),
                ("rho_tilde_xi_rk", &f.rho_tilde_xi_rk),
                ("delta_parameter", &f.delta_parameter),
                ("delta_score", &f.delta_score),
            ] {
                let mut r = condition_cells(c);
                r.extend([format!("F{}", f.factor + 1), name.into(), m.mean.to_string(), m.se.to_string()]);
                out.push(r);
            }
        }
    }
    rows(&mut csv_writer(path)?, path, &out)
}

pub fn write_records_csv(path: &Path, conditions: &[(ConditionSummary, Vec<ReplicationRecord>)]) -> Result<(), Error> {
    let mut header: Vec<String> = CONDITION_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(
        [
            "replication",
            "converged",
            "factor",
            "rho_r",
            "rho_rk",
            "rho_tilde_rk",
            "rho_xi_r",
            "rho_xi_rk",
            "rho_tilde_xi_rk",
            "g",
            "g_crit",
            "heterogeneous",
            "rescale_events",
            "failure",
        ]
        .map(String::from),
    );
    let mut out = vec![header];
    for (c, records) in conditions {
        for rec in records {
            let q = if rec.converged { rec.rho_r.len() } else { 1 };
            for j in 0..q {
                let mut r = condition_cells(c);
                r.push(rec.replication.to_string());
                r.push(rec.converged.to_string());
                if rec.converged {
                    r.push(format!("F{}", j + 1));
                    for v in [
                        rec.rho_r[j],
                        rec.rho_rk[j],
                        rec.rho_tilde_rk[j],
                        rec.rho_xi_r[j],
                        rec.rho_xi_rk[j],
                        rec.rho_tilde_xi_rk[j],
                    ] {
                        r.push(v.to_string());
                    }
                    r.push(rec.g[j].to_string());
                    r.push(rec.g_crit[j].to_string());
                    r.push((rec.decisions[j] == hetfac::heterogeneity::Decision::Heterogeneous).to_string());
                } else {
                    r.extend(std::iter::repeat_n(String::new(), 10));
                }
                r.push(rec.rescale_events.to_string());
                r.push(rec.failure.clone().unwrap_or_default());
                out.push(r);
            }
        }
    }
    rows(&mut csv_writer(path)?, path, &out)
}
