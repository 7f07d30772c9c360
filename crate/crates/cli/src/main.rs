mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetfac::analysis::{analyze, test_only, AnalysisOptions, Rotation};
use hetfac::simulation::{run_condition, GCritPolicy, SimRotation, SimulationOptions};
use hetfac::{DataMatrix, Error, ErrorKind};

use config::{AnalysisFile, GridFile};

#[derive(Parser)]
#[command(name = "hetfac", version, about = "Factor analysis with loading heterogeneity diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit, test for heterogeneity and score.
    Analyze(AnalysisArgs),
    /// Fit and run the heterogeneity test only.
    Test(AnalysisArgs),
    /// Run a Monte Carlo grid.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct AnalysisArgs {
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric CSV with a header row.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    factors: Option<usize>,
    /// varimax, target or none.
    #[arg(long)]
    rotation: Option<String>,
    /// Kaiser row normalization for varimax.
    #[arg(long)]
    kaiser: bool,
    /// p×q target pattern as a headerless CSV.
    #[arg(long)]
    pattern: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    g_crit: Option<usize>,
    #[arg(long)]
    null_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// all, largest or assigned.
    #[arg(long)]
    counting: Option<String>,
    /// Comma separated factor index (0-based) per variable; implies assigned counting.
    #[arg(long, value_delimiter = ',')]
    assign: Option<Vec<usize>>,
    /// misfit-increases or misfit-decreases.
    #[arg(long)]
    acceptance: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML file with a [grid] table and an optional [simulation] table.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    replications: Option<usize>,
    /// Null-reference samples per replication.
    #[arg(long)]
    null_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// "ratio" or an integer.
    #[arg(long)]
    g_crit: Option<String>,
    /// Use the binomial cutoff at this level instead of the g_crit policy.
    #[arg(long)]
    alpha: Option<f64>,
    /// 1000 replications and 50 null-reference samples per replication.
    #[arg(long)]
    full_scale: bool,
    /// Also write one row per replication and factor.
    #[arg(long)]
    records: bool,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Input => 2,
        ErrorKind::Convergence => 3,
        ErrorKind::Singularity => 4,
        ErrorKind::Config => 5,
        ErrorKind::Numerical => 6,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Input => "input",
        ErrorKind::Convergence => "convergence",
        ErrorKind::Singularity => "singularity",
        ErrorKind::Config => "config",
        ErrorKind::Numerical => "numerical",
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as Ck;
            if matches!(e.kind(), Ck::DisplayHelp | Ck::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            report_error("config", &e.kind().to_string());
            return ExitCode::from(5);
        }
    };

    let result = worker_pool().and_then(|pool| {
        pool.install(|| match cli.command {
            Command::Analyze(args) => run_analysis(args, false),
            Command::Test(args) => run_analysis(args, true),
            Command::Simulate(args) => run_simulation(args),
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            report_error(kind_name(kind), &e.to_string());
            ExitCode::from(exit_code(kind))
        }
    }
}

/// Honors HETFAC_WORKERS; results never depend on the value.
fn worker_pool() -> Result<rayon::ThreadPool, Error> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HETFAC_WORKERS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("HETFAC_WORKERS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

fn read_pattern(path: &Path) -> Result<Vec<Vec<f64>>, Error> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let row: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match row {
            Ok(r) => rows.push(r),
            // tolerate a header line
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Input(format!("{}: row {}: {e}", path.display(), i + 1)));
            }
        }
    }
    Ok(rows)
}

struct ResolvedAnalysis {
    input: PathBuf,
    out: PathBuf,
    opts: AnalysisOptions,
}

fn resolve_analysis(args: AnalysisArgs) -> Result<ResolvedAnalysis, Error> {
    let file: AnalysisFile = match &args.config {
        Some(path) => config::read_toml(path)?,
        None => AnalysisFile::default(),
    };
    let input = args
        .input
        .or(file.input)
        .ok_or_else(|| Error::Config("no input file given (--input)".into()))?;
    let out = args.out.or(file.out).unwrap_or_else(|| PathBuf::from("."));
    let mut opts = AnalysisOptions::default();
    opts.factors = args.factors.or(file.factors).unwrap_or(1);
    let kaiser = args.kaiser || file.kaiser.unwrap_or(false);
    let pattern = args.pattern.or(file.pattern);
    let rotation = args.rotation.or(file.rotation).unwrap_or_else(|| {
        if pattern.is_some() { "target" } else { "varimax" }.to_string()
    });
    opts.rotation = match rotation.as_str() {
        "varimax" => Rotation::Varimax { kaiser },
        "none" => Rotation::None,
        "target" => {
            let path = pattern.ok_or_else(|| Error::Config("target rotation needs --pattern".into()))?;
            Rotation::Target { pattern: read_pattern(&path)? }
        }
        other => {
            return Err(Error::Config(format!(
                "unknown rotation {other:?} (expected varimax, target or none)"
            )))
        }
    };
    if let Some(a) = args.alpha.or(file.alpha) {
        opts.alpha = a;
    }
    opts.g_crit = args.g_crit.or(file.g_crit);
    if let Some(d) = args.null_draws.or(file.null_draws) {
        opts.null_draws = d;
    }
    opts.seed = args.seed.or(file.seed).unwrap_or(0);
    let assignment = args.assign.or(file.assignment);
    let counting = args.counting.or(file.counting);
    opts.counting = match (counting, assignment) {
        (None, None) => opts.counting,
        (None, Some(map)) => config::parse_counting("assigned", Some(map))?,
        (Some(name), map) => config::parse_counting(&name, map)?,
    };
    if let Some(rule) = args.acceptance.or(file.acceptance) {
        opts.acceptance = config::parse_acceptance(&rule)?;
    }
    opts.validate()?;
    Ok(ResolvedAnalysis { input, out, opts })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

fn run_analysis(args: AnalysisArgs, test: bool) -> Result<(), Error> {
    let ResolvedAnalysis { input, out, opts } = resolve_analysis(args)?;
    let data = DataMatrix::from_csv_path(&input)?;
    log::info!("read {} rows and {} columns from {}", data.n(), data.p(), input.display());
    if test {
        let report = test_only(&data, &opts)?;
        create_dir(&out)?;
        output::write_json(&out.join("heterogeneity.json"), &report)?;
        output::write_loadings(&out.join("loadings.csv"), &report.fit, data.column_names())?;
    } else {
        let report = analyze(&data, &opts)?;
        create_dir(&out)?;
        output::write_json(&out.join("report.json"), &report)?;
        output::write_loadings(&out.join("loadings.csv"), &report.fit, data.column_names())?;
        output::write_scores(&out.join("scores.csv"), &report)?;
        output::write_determinacy(&out.join("determinacy.csv"), &report)?;
        output::write_influence(&out.join("influence.csv"), &report)?;
    }
    Ok(())
}

fn run_simulation(args: SimulateArgs) -> Result<(), Error> {
    let file: GridFile = config::read_toml(&args.grid)?;
    let conditions = file.grid.conditions()?;
    let sim = file.simulation;
    let full_scale = args.full_scale || sim.full_scale.unwrap_or(false);

    let mut opts = SimulationOptions::default();
    let mut replications = 100;
    if full_scale {
        log::warn!("full-scale run: 1000 replications and 50 null-reference samples per condition");
        replications = 1000;
        opts.n_d = 50;
    }
    if let Some(r) = args.replications.or(sim.replications) {
        replications = r;
    }
    if let Some(d) = args.null_draws.or(sim.null_draws) {
        opts.n_d = d;
    }
    let seed = args.seed.or(sim.seed).unwrap_or(0);
    let out = args.out.or(sim.out).unwrap_or_else(|| PathBuf::from("."));

    let g_crit = match (args.alpha.or(sim.alpha), args.g_crit, sim.g_crit) {
        (Some(a), None, _) => GCritPolicy::Alpha(a),
        (Some(_), Some(_), _) => return Err(Error::Config("give either --alpha or --g-crit, not both".into())),
        (None, Some(s), _) => config::parse_g_crit(&toml::Value::String(s))?,
        (None, None, Some(v)) => config::parse_g_crit(&v)?,
        (None, None, None) => GCritPolicy::Ratio,
    };
    if let GCritPolicy::Alpha(a) = g_crit {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {a}")));
        }
    }
    opts.g_crit = g_crit;
    opts.rotation = sim.rotation.unwrap_or(SimRotation::Target);
    if let Some(name) = sim.counting {
        opts.counting = config::parse_counting(&name, None)?;
    }

    let mut results = Vec::with_capacity(conditions.len());
    for (i, spec) in conditions.iter().enumerate() {
        log::info!("condition {}/{}: {spec:?}", i + 1, conditions.len());
        let (records, summary) = run_condition(spec, replications, &opts, seed)?;
        if !summary.summarized {
            log::warn!(
                "condition {spec:?} converged in only {:.1}% of replications; estimates are not summarized",
                100.0 * summary.convergence_rate
            );
        }
        results.push((summary, records));
    }

    create_dir(&out)?;
    let summaries: Vec<_> = results.iter().map(|(s, _)| s.clone()).collect();
    output::write_json(&out.join("summary.json"), &summaries)?;
    output::write_summary_csv(&out.join("summary.csv"), &summaries)?;
    output::write_figure_csv(&out.join("figure.csv"), &summaries)?;
    if args.records {
        output::write_records_csv(&out.join("replications.csv"), &results)?;
    }
    Ok(())
}
