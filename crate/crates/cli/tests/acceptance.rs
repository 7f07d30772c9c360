//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use hetfac::heterogeneity::{
    accept_individual_loadings, binomial_cutoff, binomial_right_tail, candidate_loading,
    hrfs_determinacy, hrfs_scores, loading_delta, loading_weight, IndividualLoadingSet,
    IndividualOptions, LooLoadingSet,
};
use hetfac::linalg::pearson;
use hetfac::rng::stream;
use hetfac::rotation::varimax_criterion;
use hetfac::scoring::LooFit;
use hetfac::simulation::{run_condition, PopulationSpec, ReplicationRecord, SimulationOptions};
use hetfac::{
    correlation_from_data, determinacy_population, determinacy_sample, paf_fit, procrustes_target,
    rfs_scores, varimax, CorrelationKind, CorrelationMatrix, DataMatrix, FactorModel,
    LoadingMatrix, PafOptions, VarimaxOptions,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn normal_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_orthogonal(rng: &mut impl Rng, q: usize) -> DMatrix<f64> {
    normal_matrix(rng, q, q).qr().q()
}

/// Data from orthogonal factors: x = Λξ + ψε, columns of `xi` are the true scores.
fn sample_model(rng: &mut impl Rng, loadings: &DMatrix<f64>, n: usize) -> (DataMatrix, DMatrix<f64>) {
    let (p, q) = loadings.shape();
    let xi = normal_matrix(rng, n, q);
    let psi: Vec<f64> = (0..p)
        .map(|i| (1.0 - loadings.row(i).norm_squared()).max(0.0).sqrt())
        .collect();
    let mut x = &xi * loadings.transpose();
    for k in 0..n {
        for i in 0..p {
            let e: f64 = rng.sample(StandardNormal);
            x[(k, i)] += psi[i] * e;
        }
    }
    (DataMatrix::from_matrix(x).expect("finite data"), xi)
}

fn simple_structure(rng: &mut impl Rng, q: usize, per: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q * per, q);
    for j in 0..q {
        for i in 0..per {
            l[(j * per + i, j)] = rng.random_range(0.4..0.85);
        }
    }
    l
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

fn c1_table() -> Outcome {
    const ROWS: [(usize, usize, f64); 13] = [
        (2, 2, 0.2500),
        (3, 3, 0.1250),
        (4, 3, 0.2500),
        (4, 4, 0.0625),
        (5, 4, 0.1875),
        (6, 5, 0.1094),
        (7, 5, 0.2266),
        (8, 6, 0.1445),
        (9, 7, 0.0898),
        (10, 7, 0.1719),
        (11, 8, 0.1133),
        (12, 8, 0.1938),
        (12, 9, 0.0730),
    ];
    let start = Instant::now();
    let mut bad = Vec::new();
    for (p, g, a) in ROWS {
        // the printed level is rounded, so allow half a unit in the 4th place
        let got = binomial_cutoff(p, a + 0.00005).map(|c| (c.g_crit, round4(c.alpha_exact)));
        let tail = round4(binomial_right_tail(p, g));
        if got.as_ref().ok() != Some(&(g, a)) || tail != a {
            bad.push(format!("p={p} G={g} a={a:.4}: cutoff {got:?}, P(X>={g})={tail:.4}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        bad.push(format!("took {secs:.3}s"));
    }
    if bad.is_empty() {
        Ok(format!("13/13 rows in {secs:.4}s"))
    } else {
        Err(format!("{}/13 rows match; {}", 13 - bad.len(), bad.join("; ")))
    }
}

fn c2_determinacy_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for m in 0..50u64 {
        let mut rng = stream(2, &[m]);
        let p = rng.random_range(3..=8);
        let l = DMatrix::from_fn(p, 1, |_, _| rng.random_range(0.3..0.9));
        let model = FactorModel::from_loadings(LoadingMatrix::new(l.clone()), 100_000).map_err(|e| e.to_string())?;
        let rho = determinacy_population(&model).map_err(|e| e.to_string())?.rho[0];
        let (data, xi) = sample_model(&mut rng, &l, 100_000);
        let scores = rfs_scores(&model, &data).map_err(|e| e.to_string())?;
        let r = pearson(scores.values.column(0).as_slice(), xi.column(0).as_slice())
            .ok_or("degenerate scores")?;
        worst = worst.max((r - rho).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!("max |MC - closed form| = {worst:.5} over 50 models in {secs:.1}s");
    if worst <= 0.01 && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c3_homogeneous_collapse() -> Outcome {
    let mut worst_corr: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    for m in 0..20u64 {
        let mut rng = stream(3, &[m]);
        let q = rng.random_range(1..=3);
        let per = rng.random_range(3..=6);
        let l = simple_structure(&mut rng, q, per);
        let n = 300;
        let (data, _) = sample_model(&mut rng, &l, n);
        let s = correlation_from_data(&data).map_err(|e| e.to_string())?;
        let fit = paf_fit(&s, q, &PafOptions::default()).map_err(|e| e.to_string())?;
        let total = fit.loadings().values().clone();
        let set = IndividualLoadingSet::homogeneous(&total, n);
        let rfs = rfs_scores(&fit, &data).map_err(|e| e.to_string())?;
        let hrfs = hrfs_scores(&set, &fit, &data, &s).map_err(|e| e.to_string())?;
        for j in 0..q {
            let r = pearson(rfs.values.column(j).as_slice(), hrfs.scores.values.column(j).as_slice())
                .ok_or("degenerate scores")?;
            worst_corr = worst_corr.max((r - 1.0).abs());
        }
        let d16 = hrfs_determinacy(&set, &s).map_err(|e| e.to_string())?;
        let d8 = determinacy_sample(&fit, &s).map_err(|e| e.to_string())?;
        for j in 0..q {
            worst_det = worst_det.max((d16.rho[j] - d8.rho[j]).abs());
        }
    }
    let msg = format!("max |corr - 1| = {worst_corr:.2e}, max |HRFS det - sample det| = {worst_det:.2e}");
    if worst_corr <= 1e-10 && worst_det <= 1e-10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn converged(records: &[ReplicationRecord]) -> Vec<&ReplicationRecord> {
    records.iter().filter(|r| r.converged).collect()
}

fn c4_null_calibration() -> Outcome {
    let start = Instant::now();
    let spec = PopulationSpec::new(1, 6, 0.7, 0.0, 150);
    let (records, summary) =
        run_condition(&spec, 500, &SimulationOptions::default(), 4).map_err(|e| e.to_string())?;
    let ok = converged(&records);
    let rejected = ok.iter().filter(|r| r.g[0] >= r.g_crit[0]).count();
    let rate = rejected as f64 / ok.len() as f64;
    let alpha = summary.alpha_exact;
    // SE of a proportion at the nominal level
    let bound = alpha + 3.0 * (alpha * (1.0 - alpha) / ok.len() as f64).sqrt();
    let observed_se = (rate * (1.0 - rate) / ok.len() as f64).sqrt();
    let msg = format!(
        "rejection rate {rate:.4} ({rejected}/{}, SE {observed_se:.4}) vs bound {bound:.4} (alpha_exact {alpha:.4}, G_crit {}) in {:.0}s",
        ok.len(),
        summary.g_crit,
        start.elapsed().as_secs_f64()
    );
    if rate <= bound {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Desk grid shared by criteria 5 to 7, keyed by sigma in hundredths.
fn desk_grid() -> Result<BTreeMap<u32, Vec<ReplicationRecord>>, String> {
    let mut out = BTreeMap::new();
    for sigma in [0.0, 0.25, 0.5] {
        let spec = PopulationSpec::new(1, 6, 0.7, sigma, 150);
        let (records, _) =
            run_condition(&spec, 100, &SimulationOptions::default(), 5).map_err(|e| e.to_string())?;
        out.insert((sigma * 100.0).round() as u32, records);
    }
    Ok(out)
}

fn c5_direction(grid: &BTreeMap<u32, Vec<ReplicationRecord>>) -> Outcome {
    let ok = converged(&grid[&50]);
    let diffs: Vec<f64> = ok.iter().map(|r| r.rho_tilde_xi_rk[0] - r.rho_xi_r[0]).collect();
    let (mean, se) = mean_se(&diffs);
    let pos = diffs.iter().filter(|&&d| d > 0.0).count();
    let neg = diffs.iter().filter(|&&d| d < 0.0).count();
    let p_value = binomial_right_tail(pos + neg, pos);
    let msg = format!(
        "mean HRFS - RFS score determinacy {mean:.5} (SE {se:.5}); sign test {pos}+ / {neg}- , one-sided p = {p_value:.4}"
    );
    if mean > 0.0 && p_value < 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c6_monotonicity(grid: &BTreeMap<u32, Vec<ReplicationRecord>>) -> Outcome {
    let stats: Vec<(u32, f64, f64)> = grid
        .iter()
        .map(|(s, recs)| {
            let xs: Vec<f64> = converged(recs).iter().map(|r| r.rho_xi_r[0]).collect();
            let (m, se) = mean_se(&xs);
            (*s, m, se)
        })
        .collect();
    let mut msg = stats
        .iter()
        .map(|(s, m, se)| format!("sigma .{s:02}: {m:.4} ({se:.4})"))
        .collect::<Vec<_>>()
        .join(", ");
    let mut pass = true;
    for w in stats.windows(2) {
        let gap = w[0].1 - w[1].1;
        let pooled = (w[0].2 * w[0].2 + w[1].2 * w[1].2).sqrt();
        msg.push_str(&format!("; gap {gap:.4} vs 2SE {:.4}", 2.0 * pooled));
        pass &= gap > 2.0 * pooled;
    }
    if pass {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c7_lower_bound(grid: &BTreeMap<u32, Vec<ReplicationRecord>>) -> Outcome {
    let ok = converged(&grid[&50]);
    let par: Vec<f64> = ok.iter().map(|r| r.rho_tilde_rk[0] - r.rho_r[0]).collect();
    let sco: Vec<f64> = ok.iter().map(|r| r.rho_tilde_xi_rk[0] - r.rho_xi_r[0]).collect();
    let paired: Vec<f64> = par.iter().zip(&sco).map(|(a, b)| a - b).collect();
    let (mp, _) = mean_se(&par);
    let (ms, _) = mean_se(&sco);
    let (_, se) = mean_se(&paired);
    let msg = format!("parameter delta {mp:.5} vs score delta {ms:.5} + 2SE {:.5}", 2.0 * se);
    if mp <= ms + 2.0 * se {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_rotation() -> Outcome {
    let mut worst_residual: f64 = 0.0;
    for m in 0..100u64 {
        let mut rng = stream(8, &[m]);
        let a = normal_matrix(&mut rng, 12, 3);
        let t = random_orthogonal(&mut rng, 3);
        let target = &a * &t;
        let r = procrustes_target(&a, &target).map_err(|e| e.to_string())?;
        worst_residual = worst_residual.max((r.rotated.values() - &target).amax());
    }
    let mut worst_gap = f64::INFINITY;
    for m in 0..20u64 {
        let mut rng = stream(8, &[1_000 + m]);
        let a = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-0.9..0.9));
        let rotated = varimax(&LoadingMatrix::new(a.clone()), &VarimaxOptions::default());
        let got = varimax_criterion(rotated.rotated.values());
        let mut best = f64::NEG_INFINITY;
        for step in 0..360 {
            let th = (step as f64 * 0.5).to_radians();
            let (s, c) = th.sin_cos();
            let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
            best = best.max(varimax_criterion(&(&a * rot)));
        }
        worst_gap = worst_gap.min(got - best);
    }
    let msg = format!(
        "Procrustes max residual {worst_residual:.2e}; min varimax - grid criterion {worst_gap:.2e}"
    );
    if worst_residual < 1e-10 && worst_gap >= -1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_simulate(dir: &Path, workers: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let out = dir.join(format!("w{workers}"));
    let status = Command::new(env!("CARGO_BIN_EXE_hetfac"))
        .args(["simulate", "--grid"])
        .arg(dir.join("grid.toml"))
        .args(["--seed", "99", "--records", "--out"])
        .arg(&out)
        .env("HETFAC_WORKERS", workers.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(&out).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(
        dir.path().join("grid.toml"),
        "[grid]\nq = [1, 2]\np_per_factor = [4]\nmu = [0.7]\nsigma = [0.3]\nn = [60]\n\n\
         [simulation]\nreplications = 6\nnull_draws = 3\n",
    )
    .map_err(|e| e.to_string())?;
    let reference = run_simulate(dir.path(), 1)?;
    for workers in [4, 16] {
        let other = run_simulate(dir.path(), workers)?;
        if other != reference {
            let differing: Vec<_> = reference
                .iter()
                .filter(|(k, v)| other.get(*k) != Some(*v))
                .map(|(k, _)| k.clone())
                .collect();
            return Err(format!("{workers} workers differ from 1 worker in {differing:?}"));
        }
    }
    Ok(format!("{} output files byte-identical at 1, 4 and 16 workers", reference.len()))
}

fn close(got: f64, want: f64, tol: f64, what: &str, bad: &mut Vec<String>) {
    if (got - want).abs() > tol {
        bad.push(format!("{what}: got {got}, want {want}"));
    }
}

fn c10_toy_cases() -> Outcome {
    let mut bad = Vec::new();
    close(loading_delta(0.6, 0.6), 0.0, 1e-12, "delta(.6,.6)", &mut bad);
    close(loading_delta(0.8, 0.6), 0.28f64.sqrt(), 1e-12, "delta(.8,.6)", &mut bad);
    close(loading_delta(0.3, -0.3), 0.18f64.sqrt(), 1e-12, "delta(.3,-.3)", &mut bad);
    close(loading_delta(0.3, -0.3), 0.424264, 1e-6, "delta(.3,-.3) printed", &mut bad);

    let equal = DMatrix::from_column_slice(3, 1, &[0.5, -0.5, 0.5]);
    close(loading_weight(&equal, 1, 0).unwrap_or(f64::NAN), 1.0, 1e-12, "w equal column", &mut bad);
    let half = DMatrix::from_column_slice(4, 1, &[0.8, 0.4, 0.2, 0.2]);
    close(loading_weight(&half, 0, 0).unwrap_or(f64::NAN), 2.0, 1e-12, "w = .8/.4", &mut bad);
    close(candidate_loading(&half, 0, 0, 0.0).0, 0.8, 1e-12, "candidate at delta 0", &mut bad);
    close(candidate_loading(&half, 0, 0, 0.1).0, 1.0, 1e-12, "candidate .8 + 2(.1)", &mut bad);

    // Acceptance on a 3-variable, 1-factor toy: both misfit sides by hand.
    let mut rng = stream(10, &[0]);
    let truth = DMatrix::from_column_slice(3, 1, &[0.8, 0.7, 0.6]);
    let (data, _) = sample_model(&mut rng, &truth, 10);
    let s = correlation_from_data(&data).map_err(|e| e.to_string())?;
    let total_l = DMatrix::from_column_slice(3, 1, &[0.9, 0.8, 0.7]);
    let total = FactorModel::from_loadings(LoadingMatrix::new(total_l.clone()), 10).map_err(|e| e.to_string())?;
    let mut loo_l = vec![total_l.clone(); 10];
    loo_l[0][(0, 0)] = 0.2;
    loo_l[1][(2, 0)] = 0.75;
    let fits = loo_l
        .iter()
        .enumerate()
        .map(|(k, l)| LooFit {
            k,
            loadings: l.clone(),
            converged: true,
            determinacy: None,
        })
        .collect();
    let loo = LooLoadingSet::from_fits(fits, 3, 1);
    let set = accept_individual_loadings(&data, &total, &loo, &IndividualOptions::default())
        .map_err(|e| e.to_string())?;
    let ssq = |m: &DMatrix<f64>, t: &DMatrix<f64>| {
        let r = m * m.transpose();
        (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (r[(a, b)] - t[(a, b)]).powi(2))
            .sum::<f64>()
    };
    let baseline = ssq(&total_l, s.values());
    let mean_abs = 0.8;
    let mut resets = 0;
    for k in 0..10 {
        let mut keep = data.values().clone();
        keep = keep.remove_row(k);
        let s_k = correlation_from_data(&DataMatrix::from_matrix(keep).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        for i in 0..3 {
            let a = total_l[(i, 0)];
            let b = loo_l[k][(i, 0)];
            let d = a * a * a.signum() - b * b * b.signum();
            let cand = a + a.abs() / mean_abs * d.abs().sqrt() * d.signum();
            let mut perturbed = total_l.clone();
            perturbed[(i, 0)] = cand;
            let accept = cand != a && ssq(&perturbed, s_k.values()) > baseline;
            let want = if accept {
                if cand.abs() > 0.99 {
                    resets += 1;
                    0.99f64.copysign(cand)
                } else {
                    cand
                }
            } else {
                a
            };
            if set.accepted[k][(i, 0)] != accept {
                bad.push(format!("acceptance mask k={k} i={i}"));
            }
            close(set.loadings[k][(i, 0)], want, 1e-12, &format!("loading k={k} i={i}"), &mut bad);
        }
    }
    // .9 + 1.125·sqrt(.77) > .99 must take the reset path
    if !set.accepted[0][(0, 0)] || set.loadings[0][(0, 0)] != 0.99 {
        bad.push("candidate above .99 not reset".into());
    }
    if set.heywood_resets != resets || resets == 0 {
        bad.push(format!("heywood resets {} vs {resets} by hand", set.heywood_resets));
    }

    // Factor-fit Heywood path: one factor cannot reproduce r01 = r02 = .8, r12 = .4.
    let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.8, 0.8, 1.0, 0.4, 0.8, 0.4, 1.0]);
    let c = CorrelationMatrix::new(r, CorrelationKind::Sample).map_err(|e| e.to_string())?;
    let fit = paf_fit(&c, 1, &PafOptions::default()).map_err(|e| e.to_string())?;
    close(fit.loadings().values()[(0, 0)].abs(), 0.99, 1e-12, "PAF Heywood row", &mut bad);
    if !fit.loadings().heywood_flags().contains(&(0, 0)) {
        bad.push("PAF Heywood row not flagged".into());
    }

    if bad.is_empty() {
        Ok(format!("all toy cases within 1e-12 ({resets} reset(s) on the acceptance path)"))
    } else {
        Err(bad.join("; "))
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "binomial cutoff table", c1_table()),
        (2, "closed-form determinacy oracle", c2_determinacy_oracle()),
        (3, "homogeneous collapse", c3_homogeneous_collapse()),
        (4, "null calibration", c4_null_calibration()),
    ];
    match desk_grid() {
        Ok(grid) => {
            results.push((5, "direction of HRFS gain", c5_direction(&grid)));
            results.push((6, "monotone RFS score determinacy", c6_monotonicity(&grid)));
            results.push((7, "parameter delta as lower bound", c7_lower_bound(&grid)));
        }
        Err(e) => {
            for (id, name) in [(5, "direction of HRFS gain"), (6, "monotone RFS score determinacy"), (7, "parameter delta as lower bound")] {
                results.push((id, name, Err(e.clone())));
            }
        }
    }
    results.push((8, "rotation correctness", c8_rotation()));
    results.push((9, "determinism across workers", c9_determinism()));
    results.push((10, "delta, candidate and reset toy cases", c10_toy_cases()));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {detail}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
