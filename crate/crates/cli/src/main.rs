//! `margex` command-line interface.
//!
//! Exit status: 0 success, 1 failed self-check, 2 usage error or invalid
//! parameter value, 3 data error, 4 convergence or study failure.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use margex::estimation::{fit_with_level, FitMode, SolverConfig};
use margex::frailty::{preset_scenario, simulate_dataset, Scenario};
use margex::io::{
    read_csv, sha256_file, write_csv_to, write_report_to, Provenance, ReadOptions, Report,
    ReportFormat,
};
use margex::mc::{run_study, write_summary_csv, Method, StudySpec};
use margex::mle::{fit_mle, MleConfig};
use margex::model::StructureKind;
use margex::verify::run_verify;
use margex::Error;

#[derive(Parser, Debug)]
#[command(
    name = "margex",
    version,
    about = "Marginal logistic regression for clustered binary data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a marginal model to a CSV dataset.
    Fit(FitArgs),
    /// Simulate a dataset from one of the preset designs.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo study and write the summary table.
    McStudy(StudyArgs),
    /// Run the built-in consistency checks.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FitMethod {
    Proposed,
    Mle,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    FourStep,
    Alternate,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// indep, exch, ar1, nested-exch or nested-ar1.
    #[arg(long, default_value = "exch", value_parser = parse_structure)]
    structure: StructureKind,
    #[arg(long, value_enum, default_value = "proposed")]
    method: FitMethod,
    #[arg(long, value_enum, default_value = "four-step")]
    mode: ModeArg,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    ci: f64,
    /// Report path; `.csv` gives the coefficient table, anything else JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Recorded in the report for provenance.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// table1a, table1b, table2 or table3.
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Correlation parameters, comma separated (none for table3).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    rho: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of clusters (preset: 200).
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StudyArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    rho: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma separated: proposed, mle.
    #[arg(long, value_delimiter = ',', default_value = "proposed", value_parser = parse_method)]
    methods: Vec<Method>,
    /// Worker threads; 0 uses MARGEX_THREADS or all cores.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 0.95, value_parser = parse_level)]
    ci: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 20240101)]
    seed: u64,
}

fn parse_structure(s: &str) -> Result<StructureKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_level(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("confidence level {v} not in (0, 1)"))
    }
}

enum Failure {
    Lib(Error),
    Verify(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Domain(_) => 2,
        Error::Convergence { .. } | Error::Study(_) => 4,
        _ => 3,
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_fit(args: FitArgs) -> Result<(), Failure> {
    let dataset = read_csv(
        &args.data,
        ReadOptions {
            intercept: !args.no_intercept,
        },
    )?;
    let provenance = Provenance {
        seed: args.seed,
        input_sha256: sha256_file(&args.data)?,
    };
    let report = match args.method {
        FitMethod::Proposed => {
            let config = SolverConfig {
                mode: match args.mode {
                    ModeArg::FourStep => FitMode::FourStep,
                    ModeArg::Alternate => FitMode::AlternateToConvergence,
                },
                ..SolverConfig::default()
            };
            let fit = fit_with_level(&dataset, args.structure, &config, args.ci)?;
            Report::from_fit(&dataset, &fit, args.ci, provenance)?
        }
        FitMethod::Mle => {
            let fit = fit_mle(&dataset, args.structure, &MleConfig::default())?;
            Report::from_mle(&dataset, &fit, args.ci, provenance)?
        }
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let format = match (args.format, &args.out) {
        (Some(FormatArg::Json), _) => ReportFormat::Json,
        (Some(FormatArg::Csv), _) => ReportFormat::Csv,
        (None, Some(p)) => ReportFormat::from_path(p),
        (None, None) => ReportFormat::Json,
    };
    write_report_to(&report, format, output(&args.out)?)?;
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = preset_scenario(args.scenario, &args.rho)?.with_seed(args.seed);
    if let Some(m) = args.clusters {
        config = config.with_cluster_count(m);
    }
    let dataset = simulate_dataset(&config)?;
    write_csv_to(&dataset, output(&args.out)?)?;
    Ok(())
}

fn run_mc(args: StudyArgs) -> Result<(), Failure> {
    let spec = StudySpec {
        methods: args.methods,
        ci_level: args.ci,
        workers: args.threads,
        cluster_count: args.clusters,
        ..StudySpec::new(args.scenario, args.rho, args.reps, args.seed)
    };
    let summary = run_study(&spec)?;
    for s in &summary.methods {
        eprintln!(
            "{}: {} failed, {} on the correlation boundary, {:.4} s per fit",
            s.method, s.n_failed, s.n_boundary, s.mean_seconds
        );
        for (rep, msg) in s.failures.iter().take(5) {
            eprintln!("  replicate {rep}: {msg}");
        }
    }
    write_summary_csv(&summary, output(&args.out)?)?;
    Ok(())
}

fn run_checks(args: VerifyArgs) -> Result<(), Failure> {
    let results = run_verify(args.seed);
    let failed = results.iter().filter(|c| !c.passed).count();
    for c in &results {
        println!(
            "{} {}{}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            if c.detail.is_empty() {
                String::new()
            } else {
                format!(": {}", c.detail)
            }
        );
    }
    if failed > 0 {
        return Err(Failure::Verify(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::McStudy(a) => run_mc(a),
        Command::Verify(a) => run_checks(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verify(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(1)
        }
    }
}
