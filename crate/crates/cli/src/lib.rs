//! Batch command-line front end for mfswitch studies.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfswitch::harness::{
    run_study, sha256_hex, simulate_replica, write_atomic, Provenance, StudyReport, StudySpec, CODE_VERSION,
};
use mfswitch::measure::{bl_distance_approx, bl_distance_exact, wasserstein1_1d, EmpiricalMeasure, MeasureError};

pub use config::{parse_config, parse_config_file, ConfigError, SchemaViolation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Ridge functions tried when the exact BL solver refuses a support.
const APPROX_BUDGET: usize = 4096;

#[derive(Debug, Parser)]
#[command(name = "mfswitch", version, about = "Mean-field particle systems with Markovian switching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one particle system per replica.
    Simulate(StudyArgs),
    /// Coupled distance-to-reference curve over N.
    Lln(StudyArgs),
    /// Martingale-problem residual and its quadratic variation.
    Martingale(StudyArgs),
    /// Fast-switching system against its averaged limit.
    Twoscale(StudyArgs),
    /// Empirical chain marginals against exp(Qt).
    ChainCheck(StudyArgs),
    /// BL and W1 distance between two measure CSV files.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides study.master_seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides output.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides study.replicas.
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Machine-readable summary instead of the text table.
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    /// Seed for the approximate BL fallback on large supports.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory to write metrics.json into.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let (kind, args) = match cli.command {
        Command::Metrics(args) => return metrics(&args, stdout, stderr),
        Command::Simulate(a) => ("simulate", a),
        Command::Lln(a) => ("lln", a),
        Command::Martingale(a) => ("martingale", a),
        Command::Twoscale(a) => ("twoscale", a),
        Command::ChainCheck(a) => ("chain-check", a),
    };
    study(kind, &args, stdout, stderr)
}

/// Parses the config for `kind` and applies the command-line overrides.
pub fn load_spec(kind: &str, args: &StudyArgs) -> Result<StudySpec, ConfigError> {
    let mut spec = parse_config_file(&args.config, kind)?;
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    if let Some(r) = args.replicas {
        spec.replicas = r;
    }
    if let Some(out) = &args.out {
        spec.output = Some(out.clone());
    }
    let mut problems = config::validate(&spec);
    if args.threads == Some(0) {
        problems.push(SchemaViolation {
            key: "--threads".into(),
            reason: "must be at least 1".into(),
        });
    }
    if problems.is_empty() {
        Ok(spec)
    } else {
        Err(ConfigError::Schema(problems))
    }
}

fn study(kind: &str, args: &StudyArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let spec = match load_spec(kind, args) {
        Ok(spec) => spec,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = with_threads(args.threads, || {
        let report = run_study(&spec)?;
        if kind == "simulate" {
            if let Some(dir) = &spec.output {
                write_trajectory(&spec, &dir.join(&spec.id))?;
            }
        }
        Ok::<_, Box<dyn std::error::Error + Send + Sync>>(report)
    });
    let report = match outcome {
        Ok(report) => report,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(
            stderr,
            "warning: replica {} failed: {}",
            r.replica,
            r.error.as_deref().unwrap_or_default()
        );
    }
    let _ = write_summary(&report, args.format, stdout);
    if report.passed() {
        EXIT_OK
    } else {
        EXIT_ASSERTION
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool builds")
            .install(f),
        None => f(),
    }
}

/// Replica 0 of a simulate study in full: `trajectory.csv` and `path.csv`.
fn write_trajectory(spec: &StudySpec, dir: &Path) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let (path, traj) = simulate_replica(spec, 0)?;
    write_atomic(&dir.join("trajectory.csv"), traj.to_csv().as_bytes())?;
    write_atomic(&dir.join("path.csv"), path.to_csv().as_bytes())?;
    Ok(())
}

fn write_summary(report: &StudyReport, format: Option<Format>, out: &mut dyn Write) -> std::io::Result<()> {
    match format {
        None => write!(out, "{}", report.to_text()),
        Some(Format::Json) => writeln!(out, "{:#}", report.summary_json()),
        Some(Format::Csv) => {
            writeln!(out, "quantity,value,se,count")?;
            for a in &report.summary.aggregates {
                writeln!(out, "{},{:?},{:?},{}", csv_field(&a.name), a.value, a.se, a.count)?;
            }
            Ok(())
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Distances between two serialized measures.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub bl: f64,
    /// False when the support was too large and `bl` is a lower bound.
    pub bl_exact: bool,
    /// Only defined on the line.
    pub w1: Option<f64>,
    pub provenance: Provenance,
}

pub fn compute_metrics(first: &[u8], second: &[u8], seed: u64) -> Result<Metrics, MeasureError> {
    let parse = |bytes: &[u8]| EmpiricalMeasure::from_csv(&String::from_utf8_lossy(bytes));
    let (mu, eta) = (parse(first)?, parse(second)?);
    let (bl, bl_exact) = match bl_distance_exact(&mu, &eta) {
        Ok(d) => (d, true),
        Err(MeasureError::SupportTooLarge { .. }) => (bl_distance_approx(&mu, &eta, APPROX_BUDGET, seed)?.value, false),
        Err(e) => return Err(e),
    };
    let w1 = if mu.dim() == 1 { Some(wasserstein1_1d(&mu, &eta)?) } else { None };
    let mut both = first.to_vec();
    both.push(0);
    both.extend_from_slice(second);
    Ok(Metrics {
        bl,
        bl_exact,
        w1,
        provenance: Provenance {
            config_hash: sha256_hex(&both),
            master_seed: seed,
            version: CODE_VERSION.to_owned(),
        },
    })
}

fn metrics(args: &MetricsArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("cannot read {}: {e}", p.display()));
    let result = read(&args.first)
        .and_then(|a| read(&args.second).map(|b| (a, b)))
        .and_then(|(a, b)| compute_metrics(&a, &b, args.seed).map_err(|e| format!("MeasureError: {e}")));
    let m = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    };
    let json = serde_json::to_value(&m).expect("metrics serialize");
    if let Some(dir) = &args.out {
        let text = format!("{json:#}\n");
        if let Err(e) = write_atomic(&dir.join("metrics.json"), text.as_bytes()) {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_CONFIG;
        }
    }
    if !m.bl_exact {
        let _ = writeln!(stderr, "warning: support exceeds the exact solver cap; bl is a lower bound");
    }
    let _ = match args.format {
        None => {
            let w1 = m.w1.map_or("n/a (d > 1)".to_owned(), |w| w.to_string());
            writeln!(
                stdout,
                "bl {}\nw1 {w1}\nconfig {}  seed {}  {}",
                m.bl, m.provenance.config_hash, m.provenance.master_seed, m.provenance.version
            )
        }
        Some(Format::Json) => writeln!(stdout, "{json:#}"),
        Some(Format::Csv) => writeln!(
            stdout,
            "metric,value\nbl,{:?}\nw1,{}",
            m.bl,
            m.w1.map_or(String::new(), |w| format!("{w:?}"))
        ),
    };
    EXIT_OK
}
