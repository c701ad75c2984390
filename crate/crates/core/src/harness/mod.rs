//! Study orchestration: replica management, seeding, summaries and the
//! on-disk output layout.
//!
//! A study writes `<outdir>/<study-id>/replica-<k>.csv`, `summary.json` and
//! `report.txt`. Every aggregate in the summary is recomputed from the
//! per-replica records by [`summarize`], so a stored study can be checked
//! against its own records.

mod stats;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{sample_path, transition_matrix, GeneratorMatrix, SwitchingPath, TwoScaleSpec};
use crate::dynamics::{simulate, BuiltinModel, Checkpoints, CoefficientModel, SimConfig, TrajectoryRecord};
use crate::limit::{
    chain_seed, lln_replica, martingale_residual_series, particle_seed, LlnStudy,
};
use crate::measure::TestFunction;
use crate::twoscale::{two_scale_replica, TwoScaleExperiment, TwoScaleReplica};

pub use stats::{
    covariance, derive_seed, fit_rate, mean_se, student_t_975, variance, FitError, MeanSe, RateFit,
};

/// Version string written into every provenance block.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid study: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed replica record {path}: {reason}")]
    Record { path: PathBuf, reason: String },
}

/// Switching chain shared by the single-chain study kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSetup {
    pub generator: GeneratorMatrix,
    pub initial_state: usize,
}

/// Two-scale chain as nested rows, with the `ε` values to sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleSetup {
    pub blocks: Vec<Vec<Vec<f64>>>,
    pub slow: Vec<Vec<f64>>,
    pub initial_state: usize,
    pub eps_list: Vec<f64>,
}

impl TwoScaleSetup {
    pub fn spec(&self) -> Result<TwoScaleSpec, String> {
        let eps = *self.eps_list.first().ok_or("eps_list is empty")?;
        TwoScaleSpec::from_rows(&self.blocks, &self.slow, eps).map_err(|e| e.to_string())
    }
}

/// What a study runs, with its kind-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StudyKind {
    /// One trajectory per replica.
    Simulate {
        chain: ChainSetup,
        test_functions: Vec<TestFunction>,
    },
    /// Coupled distance curve against a large reference.
    Lln {
        chain: ChainSetup,
        n_list: Vec<usize>,
        reference_size: usize,
        checkpoint: f64,
        slope_window: Option<(f64, f64)>,
    },
    /// Martingale-problem residual and its quadratic variation.
    Martingale {
        chain: ChainSetup,
        test_functions: Vec<TestFunction>,
        /// Evaluation times; the horizon is always included.
        times: Vec<f64>,
        ratio_window: (f64, f64),
    },
    /// Fast-switching against averaged system.
    Twoscale {
        twoscale: TwoScaleSetup,
        test_functions: Vec<TestFunction>,
        sigma_control: bool,
        residual_function: Option<TestFunction>,
    },
    /// Empirical marginals of the chain against `exp(Qt)`.
    ChainCheck {
        chain: ChainSetup,
        times: Vec<f64>,
        paths: usize,
        tv_threshold: f64,
    },
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate { .. } => "simulate",
            Self::Lln { .. } => "lln",
            Self::Martingale { .. } => "martingale",
            Self::Twoscale { .. } => "twoscale",
            Self::ChainCheck { .. } => "chain-check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub id: String,
    pub kind: StudyKind,
    pub model: BuiltinModel,
    pub sim: SimConfig,
    pub replicas: usize,
    pub master_seed: u64,
    /// Width of the statistical windows, in standard errors.
    pub se_window: f64,
    pub output: Option<PathBuf>,
}

impl StudySpec {
    /// Every problem with the spec; empty when it can run.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.replicas == 0 {
            out.push("replicas must be at least 1".into());
        }
        if self.id.is_empty() || self.id.contains(['/', '\\']) || self.id.starts_with('.') {
            out.push(format!("study id {:?} is not a plain directory name", self.id));
        }
        if !(self.se_window > 0.0) {
            out.push("se_window must be positive".into());
        }
        out.extend(self.model.violations().into_iter().map(|v| format!("model: {v}")));
        let dim = self.model.dim();
        out.extend(self.sim.violations(dim).into_iter().map(|v| format!("sim: {v}")));
        let regimes = self.model.num_regimes();
        let check_chain = |c: &ChainSetup, out: &mut Vec<String>| {
            if c.generator.size() != regimes {
                out.push(format!(
                    "chain: generator has {} states but the model has {regimes} regimes",
                    c.generator.size()
                ));
            }
            if c.initial_state >= c.generator.size() {
                out.push(format!("chain: initial state {} out of range", c.initial_state));
            }
        };
        match &self.kind {
            StudyKind::Simulate { chain, .. } => check_chain(chain, &mut out),
            StudyKind::Lln {
                chain,
                n_list,
                reference_size,
                checkpoint,
                ..
            } => {
                check_chain(chain, &mut out);
                if n_list.is_empty() || n_list.windows(2).any(|w| w[0] >= w[1]) {
                    out.push("study: n_list must be nonempty and strictly increasing".into());
                }
                if n_list.iter().any(|&n| n == 0 || n > *reference_size) {
                    out.push("study: every N must be in 1..=reference_size".into());
                }
                if !(*checkpoint > 0.0 && *checkpoint <= self.sim.horizon) {
                    out.push("study: checkpoint must lie in (0, horizon]".into());
                }
            }
            StudyKind::Martingale {
                chain,
                test_functions,
                times,
                ratio_window,
            } => {
                check_chain(chain, &mut out);
                if test_functions.is_empty() {
                    out.push("study: at least one test function is required".into());
                }
                if times.iter().any(|&t| !(t >= 0.0 && t <= self.sim.horizon)) {
                    out.push("study: times must lie in [0, horizon]".into());
                }
                if !(ratio_window.0 < ratio_window.1) {
                    out.push("study: ratio_window must be an increasing pair".into());
                }
            }
            StudyKind::Twoscale {
                twoscale,
                test_functions,
                ..
            } => {
                match twoscale.spec() {
                    Ok(spec) => {
                        if spec.num_states() != regimes {
                            out.push(format!(
                                "twoscale: {} states but the model has {regimes} regimes",
                                spec.num_states()
                            ));
                        }
                        if twoscale.initial_state >= spec.num_states() {
                            out.push("twoscale: initial state out of range".into());
                        }
                    }
                    Err(e) => out.push(format!("twoscale: {e}")),
                }
                let eps = &twoscale.eps_list;
                if eps.iter().any(|&e| !(e > 0.0)) || eps.windows(2).any(|w| w[1] >= w[0]) {
                    out.push("twoscale: eps_list must be positive and strictly decreasing".into());
                }
                if let Some(&min) = eps.last() {
                    if self.sim.dt > min / 10.0 * (1.0 + 1e-12) {
                        out.push(format!(
                            "sim: dt = {} must not exceed epsilon/10 = {}",
                            self.sim.dt,
                            min / 10.0
                        ));
                    }
                }
                if test_functions.is_empty() {
                    out.push("study: at least one test function is required".into());
                }
            }
            StudyKind::ChainCheck {
                chain,
                times,
                paths,
                tv_threshold,
            } => {
                check_chain(chain, &mut out);
                if times.is_empty() || times.iter().any(|&t| !(t > 0.0 && t <= self.sim.horizon)) {
                    out.push("study: times must be nonempty and lie in (0, horizon]".into());
                }
                if *paths == 0 {
                    out.push("study: paths must be at least 1".into());
                }
                if !(*tv_threshold > 0.0) {
                    out.push("study: tv_threshold must be positive".into());
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = None;
        let text = serde_json::to_string(&canonical).expect("spec serializes");
        sha256_hex(text.as_bytes())
    }
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Numeric table produced by one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica: usize,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub error: Option<String>,
}

impl ReplicaRecord {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// RFC-4180 CSV with round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(replica: usize, text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines
            .next()
            .ok_or("empty file")?
            .split(',')
            .map(str::to_owned)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(k, l)| {
                let row: Vec<f64> = l
                    .split(',')
                    .map(|c| c.parse::<f64>().map_err(|e| format!("row {k}: {e}")))
                    .collect::<Result<_, _>>()?;
                if row.len() != columns.len() {
                    return Err(format!("row {k} has {} cells", row.len()));
                }
                Ok(row)
            })
            .collect::<Result<_, String>>()?;
        Ok(Self {
            replica,
            columns,
            rows,
            error: None,
        })
    }
}

/// Named mean with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub value: f64,
    pub se: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub name: String,
    pub fit: RateFit,
}

/// Outcome of one configured statistical assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub master_seed: u64,
    pub version: String,
}

/// Everything derived from the per-replica records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub aggregates: Vec<Aggregate>,
    pub fits: Vec<NamedFit>,
    pub assertions: Vec<Assertion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study_id: String,
    pub kind: String,
    pub records: Vec<ReplicaRecord>,
    pub summary: Summary,
    /// Some replicas failed; their errors are in `records`.
    pub degraded: bool,
    pub provenance: Provenance,
}

impl StudyReport {
    pub fn passed(&self) -> bool {
        !self.degraded && self.summary.assertions.iter().all(|a| a.passed)
    }

    pub fn aggregate(&self, name: &str) -> Option<&Aggregate> {
        self.summary.aggregates.iter().find(|a| a.name == name)
    }

    pub fn fit(&self, name: &str) -> Option<&RateFit> {
        self.summary.fits.iter().find(|f| f.name == name).map(|f| &f.fit)
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.summary.assertions.iter().find(|a| a.name == name)
    }

    /// JSON document without the per-replica rows.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "study_id": self.study_id,
            "kind": self.kind,
            "replicas": self.records.len(),
            "failed_replicas": self
                .records
                .iter()
                .filter_map(|r| r.error.as_ref().map(|e| serde_json::json!({"replica": r.replica, "error": e})))
                .collect::<Vec<_>>(),
            "degraded": self.degraded,
            "aggregates": self.summary.aggregates,
            "fits": self.summary.fits,
            "assertions": self.summary.assertions,
            "provenance": self.provenance,
        })
    }

    /// Plain-text table for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "study {} ({})", self.study_id, self.kind).unwrap();
        writeln!(
            out,
            "replicas {}  failed {}  {}",
            self.records.len(),
            self.records.iter().filter(|r| r.error.is_some()).count(),
            if self.degraded { "DEGRADED" } else { "ok" }
        )
        .unwrap();
        writeln!(
            out,
            "seed {}  config {}  {}",
            self.provenance.master_seed, self.provenance.config_hash, self.provenance.version
        )
        .unwrap();
        if !self.summary.aggregates.is_empty() {
            writeln!(out, "\n{:<40} {:>16} {:>14} {:>8}", "quantity", "value", "se", "n").unwrap();
            for a in &self.summary.aggregates {
                writeln!(out, "{:<40} {:>16.8e} {:>14.4e} {:>8}", a.name, a.value, a.se, a.count)
                    .unwrap();
            }
        }
        for f in &self.summary.fits {
            writeln!(
                out,
                "\nfit {}: slope {:.4} (95% CI [{:.4}, {:.4}]), intercept {:.4}",
                f.name, f.fit.slope, f.fit.slope_ci.0, f.fit.slope_ci.1, f.fit.intercept
            )
            .unwrap();
        }
        if !self.summary.assertions.is_empty() {
            out.push('\n');
            for a in &self.summary.assertions {
                let mark = if a.passed { "PASS" } else { "FAIL" };
                writeln!(out, "{mark} {}: {}", a.name, a.detail).unwrap();
            }
        }
        for r in self.records.iter().filter(|r| r.error.is_some()) {
            writeln!(out, "replica {} failed: {}", r.replica, r.error.as_deref().unwrap()).unwrap();
        }
        out
    }
}

fn model_seed(spec: &StudySpec, replica: u64, role: &str) -> u64 {
    derive_seed(spec.master_seed, replica, role)
}

fn chain_path(
    spec: &StudySpec,
    chain: &ChainSetup,
    replica: u64,
) -> Result<SwitchingPath, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(spec.master_seed, replica));
    sample_path(&chain.generator, chain.initial_state, spec.sim.horizon, &mut rng)
        .map_err(|e| e.to_string())
}

/// Switching path and trajectory of one replica of a `simulate` study,
/// drawn from the same streams as [`run_replica`].
pub fn simulate_replica(
    spec: &StudySpec,
    replica: usize,
) -> Result<(SwitchingPath, TrajectoryRecord), String> {
    let StudyKind::Simulate { chain, .. } = &spec.kind else {
        return Err(format!("{} study has no single trajectory", spec.kind.name()));
    };
    let r = replica as u64;
    let path = chain_path(spec, chain, r)?;
    let traj = simulate(&spec.model, &spec.sim, &path, particle_seed(spec.master_seed, r, spec.sim.num_particles))
        .map_err(|e| e.to_string())?;
    Ok((path, traj))
}

/// Times at which martingale studies report, sorted, horizon included.
fn evaluation_times(times: &[f64], horizon: f64) -> Vec<f64> {
    let mut out: Vec<f64> = times.iter().copied().filter(|&t| t <= horizon).collect();
    out.push(horizon);
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Runs one replica and returns its table.
pub fn run_replica(spec: &StudySpec, replica: usize) -> Result<ReplicaRecord, String> {
    let r = replica as u64;
    let model = &spec.model;
    let (columns, rows): (Vec<String>, Vec<Vec<f64>>) = match &spec.kind {
        StudyKind::Simulate { test_functions, .. } => {
            let (_, traj) = simulate_replica(spec, replica)?;
            let mut columns = vec!["time".to_owned(), "regime".into(), "phi".into(), "psi".into()];
            columns.extend(test_functions.iter().map(|f| format!("f:{}", f.id())));
            let rows = traj
                .summary(test_functions)
                .into_iter()
                .map(|s| {
                    let mut row = vec![s.time, s.regime as f64, s.phi, s.psi];
                    row.extend(s.integrals.iter().map(|i| i.1));
                    row
                })
                .collect();
            (columns, rows)
        }
        StudyKind::Lln {
            chain,
            n_list,
            reference_size,
            checkpoint,
            ..
        } => {
            let study = LlnStudy {
                config: &spec.sim,
                q: &chain.generator,
                initial_regime: chain.initial_state,
                n_list,
                reference_size: *reference_size,
                checkpoint: *checkpoint,
                replicas: spec.replicas,
                master_seed: spec.master_seed,
            };
            let d = lln_replica(model, &study, r).map_err(|e| e.to_string())?;
            let rows = n_list
                .iter()
                .zip(d)
                .map(|(&n, (dist, approx))| vec![n as f64, dist, if approx { 1.0 } else { 0.0 }])
                .collect();
            (vec!["n".into(), "distance".into(), "approximate".into()], rows)
        }
        StudyKind::Martingale {
            chain,
            test_functions,
            times,
            ..
        } => {
            let path = chain_path(spec, chain, r)?;
            let cfg = SimConfig {
                checkpoints: Checkpoints::EveryNode,
                ..spec.sim.clone()
            };
            let traj = simulate(model, &cfg, &path, particle_seed(spec.master_seed, r, cfg.num_particles))
                .map_err(|e| e.to_string())?;
            let eval = evaluation_times(times, spec.sim.horizon);
            let mut rows = Vec::new();
            for (k, f) in test_functions.iter().enumerate() {
                let series = martingale_residual_series(
                    &traj,
                    &path,
                    &chain.generator,
                    model,
                    f,
                    spec.sim.horizon,
                )
                .map_err(|e| e.to_string())?;
                for &t in &eval {
                    // the series holds every node, so the lookup is exact when t is one
                    let p = series
                        .iter()
                        .find(|p| p.time == t)
                        .ok_or_else(|| format!("time {t} is not an integrator node"))?;
                    rows.push(vec![k as f64, t, p.value, p.quadratic_variation]);
                }
            }
            (
                vec!["function".into(), "time".into(), "residual".into(), "quadratic_variation".into()],
                rows,
            )
        }
        StudyKind::Twoscale {
            twoscale,
            test_functions,
            sigma_control,
            residual_function,
        } => {
            let ts_spec = twoscale.spec()?;
            let exp = TwoScaleExperiment {
                spec: &ts_spec,
                config: &spec.sim,
                initial_state: twoscale.initial_state,
                eps_list: &twoscale.eps_list,
                replicas: spec.replicas,
                test_functions,
                master_seed: spec.master_seed,
                sigma_control: *sigma_control,
                residual_function: residual_function.as_ref(),
            };
            let mut rows = Vec::new();
            for &eps in &twoscale.eps_list {
                let rec = two_scale_replica(model, &exp, eps, r).map_err(|e| e.to_string())?;
                for k in 0..test_functions.len() {
                    rows.push(vec![
                        eps,
                        k as f64,
                        rec.fast[k],
                        rec.averaged[k],
                        rec.control.as_ref().map_or(f64::NAN, |c| c[k]),
                        rec.operator_residual.unwrap_or(f64::NAN),
                        rec.fast_psi_initial,
                        rec.fast_psi_sup,
                    ]);
                }
            }
            let columns = [
                "epsilon",
                "function",
                "fast",
                "averaged",
                "control",
                "operator_residual",
                "fast_psi_initial",
                "fast_psi_sup",
            ];
            (columns.iter().map(|c| c.to_string()).collect(), rows)
        }
        StudyKind::ChainCheck {
            chain, times, paths, ..
        } => {
            let m = chain.generator.size();
            let mut counts = vec![0usize; times.len() * m];
            let mut rng = ChaCha8Rng::seed_from_u64(model_seed(spec, r, "chain-check"));
            for _ in 0..*paths {
                let path = sample_path(&chain.generator, chain.initial_state, spec.sim.horizon, &mut rng)
                    .map_err(|e| e.to_string())?;
                for (k, &t) in times.iter().enumerate() {
                    counts[k * m + path.state_at(t)] += 1;
                }
            }
            let rows = times
                .iter()
                .enumerate()
                .flat_map(|(k, &t)| {
                    let counts = &counts;
                    (0..m).map(move |s| vec![t, s as f64, counts[k * m + s] as f64])
                })
                .collect();
            (vec!["time".into(), "state".into(), "count".into()], rows)
        }
    };
    Ok(ReplicaRecord {
        replica,
        columns,
        rows,
        error: None,
    })
}

fn assertion(name: &str, passed: bool, detail: String) -> Assertion {
    Assertion {
        name: name.to_owned(),
        passed,
        detail,
    }
}

fn agg(name: String, m: MeanSe) -> Aggregate {
    Aggregate {
        name,
        value: m.mean,
        se: m.se,
        count: m.count,
    }
}

/// Aggregates, fits and assertions from the successful records.
pub fn summarize(spec: &StudySpec, records: &[ReplicaRecord]) -> Summary {
    let ok: Vec<&ReplicaRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let mut aggregates = Vec::new();
    let mut fits = Vec::new();
    let mut assertions = Vec::new();
    let k_se = spec.se_window;
    if ok.is_empty() {
        assertions.push(assertion("replicas", false, "no replica succeeded".into()));
        return Summary {
            aggregates,
            fits,
            assertions,
        };
    }
    match &spec.kind {
        StudyKind::Simulate { .. } => {
            // Jump times add replica-specific nodes; compare on the shared ones.
            let index: Vec<HashMap<u64, usize>> = ok
                .iter()
                .map(|r| r.rows.iter().enumerate().map(|(k, row)| (row[0].to_bits(), k)).collect())
                .collect();
            let shared: Vec<u64> = ok[0]
                .rows
                .iter()
                .map(|row| row[0].to_bits())
                .filter(|t| index.iter().all(|m| m.contains_key(t)))
                .collect();
            let psi: Vec<MeanSe> = shared
                .iter()
                .map(|t| mean_se(&ok.iter().zip(&index).map(|(r, m)| r.rows[m[t]][3]).collect::<Vec<_>>()))
                .collect();
            aggregates.push(agg("psi(0)".into(), psi[0]));
            aggregates.push(agg("psi(T)".into(), psi[psi.len() - 1]));
            let sup = psi.iter().map(|m| m.mean).fold(f64::NEG_INFINITY, f64::max);
            aggregates.push(Aggregate {
                name: "sup psi".into(),
                value: sup,
                se: f64::NAN,
                count: ok.len(),
            });
            if psi[0].mean > 0.0 && shared[0] == 0f64.to_bits() {
                assertions.push(assertion(
                    "moment-stability",
                    sup <= 10.0 * psi[0].mean,
                    format!("sup mean psi {sup:.6} vs 10 x initial {:.6}", 10.0 * psi[0].mean),
                ));
            }
        }
        StudyKind::Lln {
            n_list,
            slope_window,
            ..
        } => {
            let stats: Vec<MeanSe> = (0..n_list.len())
                .map(|k| mean_se(&ok.iter().map(|r| r.rows[k][1]).collect::<Vec<_>>()))
                .collect();
            for (n, s) in n_list.iter().zip(&stats) {
                aggregates.push(agg(format!("distance[N={n}]"), *s));
            }
            let approx = ok.iter().any(|r| r.rows.iter().any(|row| row[2] != 0.0));
            let monotone = stats
                .windows(2)
                .all(|w| w[1].mean <= w[0].mean + 1.645 * w[0].se.hypot(w[1].se));
            assertions.push(assertion(
                "distance-nonincreasing",
                monotone,
                format!(
                    "means {:?} (95% one-sided){}",
                    stats.iter().map(|s| s.mean).collect::<Vec<_>>(),
                    if approx { "; some distances are approximate lower bounds" } else { "" }
                ),
            ));
            let points: Vec<(f64, f64)> =
                n_list.iter().zip(&stats).map(|(&n, s)| (n as f64, s.mean)).collect();
            match fit_rate(&points) {
                Ok(fit) => {
                    if let Some((lo, hi)) = slope_window {
                        assertions.push(assertion(
                            "slope-window",
                            *lo <= fit.slope && fit.slope <= *hi,
                            format!("slope {:.4} vs [{lo}, {hi}]", fit.slope),
                        ));
                    }
                    fits.push(NamedFit {
                        name: "distance-vs-N".into(),
                        fit,
                    });
                }
                Err(e) => {
                    if slope_window.is_some() {
                        assertions.push(assertion("slope-window", false, e.to_string()));
                    }
                }
            }
        }
        StudyKind::Martingale {
            test_functions,
            ratio_window,
            ..
        } => {
            let horizon = spec.sim.horizon;
            for (k, f) in test_functions.iter().enumerate() {
                let pick = |col: usize| -> Vec<f64> {
                    ok.iter()
                        .filter_map(|r| {
                            r.rows
                                .iter()
                                .find(|row| row[0] == k as f64 && row[1] == horizon)
                                .map(|row| row[col])
                        })
                        .collect()
                };
                let m = pick(2);
                let qv = pick(3);
                let ms = mean_se(&m);
                let qs = mean_se(&qv);
                let id = f.id();
                aggregates.push(agg(format!("M_f(T)[{id}]"), ms));
                aggregates.push(agg(format!("[M_f](T)[{id}]"), qs));
                assertions.push(assertion(
                    &format!("mean-zero[{id}]"),
                    ms.mean.abs() <= k_se * ms.se,
                    format!("|{:.4e}| vs {k_se} x SE {:.4e}", ms.mean, ms.se),
                ));
                if m.len() > 1 {
                    let var = variance(&m);
                    let ratio = var / qs.mean;
                    aggregates.push(Aggregate {
                        name: format!("Var M_f(T)[{id}]"),
                        value: var,
                        se: f64::NAN,
                        count: m.len(),
                    });
                    aggregates.push(Aggregate {
                        name: format!("variance/QV[{id}]"),
                        value: ratio,
                        se: f64::NAN,
                        count: m.len(),
                    });
                    assertions.push(assertion(
                        &format!("variance-ratio[{id}]"),
                        ratio_window.0 <= ratio && ratio <= ratio_window.1,
                        format!("{ratio:.4} vs [{}, {}]", ratio_window.0, ratio_window.1),
                    ));
                }
            }
        }
        StudyKind::Twoscale {
            twoscale,
            test_functions,
            sigma_control,
            residual_function,
        } => {
            let records: Vec<Vec<TwoScaleReplica>> = twoscale
                .eps_list
                .iter()
                .map(|&eps| {
                    ok.iter()
                        .map(|r| {
                            let rows: Vec<&Vec<f64>> =
                                r.rows.iter().filter(|row| row[0] == eps).collect();
                            let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
                            TwoScaleReplica {
                                epsilon: eps,
                                fast: rows.iter().map(|row| row[2]).collect(),
                                averaged: rows.iter().map(|row| row[3]).collect(),
                                control: rows.iter().map(|row| opt(row[4])).collect(),
                                operator_residual: opt(rows[0][5]),
                                fast_psi_initial: rows[0][6],
                                fast_psi_sup: rows[0][7],
                            }
                        })
                        .collect()
                })
                .collect();
            let table = crate::twoscale::summarize(&twoscale.eps_list, test_functions, records);
            for row in &table.rows {
                let tag = format!("eps={:e},{}", row.epsilon, row.function);
                aggregates.push(agg(format!("fast[{tag}]"), row.fast));
                aggregates.push(agg(format!("averaged[{tag}]"), row.averaged));
                aggregates.push(Aggregate {
                    name: format!("|diff|[{tag}]"),
                    value: row.difference,
                    se: row.difference_se,
                    count: row.fast.count,
                });
                if let Some(c) = row.control {
                    aggregates.push(agg(format!("control[{tag}]"), c));
                }
            }
            for f in test_functions {
                let id = f.id();
                let rows = table.rows_for(&id);
                let diffs: Vec<f64> = rows.iter().map(|r| r.difference).collect();
                assertions.push(assertion(
                    &format!("difference-nonincreasing[{id}]"),
                    diffs.windows(2).all(|w| w[1] <= w[0]),
                    format!("{diffs:?}"),
                ));
                let last = rows.last().unwrap();
                assertions.push(assertion(
                    &format!("difference-small[{id}]"),
                    last.difference <= k_se * last.difference_se,
                    format!(
                        "{:.4e} vs {k_se} x SE {:.4e} at eps = {:e}",
                        last.difference, last.difference_se, last.epsilon
                    ),
                ));
                if *sigma_control {
                    let c = last.control.unwrap();
                    let gap = (c.mean - last.fast.mean).abs();
                    let se = c.se.hypot(last.fast.se);
                    assertions.push(assertion(
                        &format!("sigma-control-detected[{id}]"),
                        gap > k_se * se,
                        format!("|control - fast| = {gap:.4e} vs {k_se} x SE {se:.4e}"),
                    ));
                }
            }
            if residual_function.is_some() {
                for (eps, m) in &table.residual {
                    aggregates.push(agg(format!("|operator residual|[eps={eps:e}]"), *m));
                }
                let means: Vec<f64> = table.residual.iter().map(|r| r.1.mean).collect();
                assertions.push(assertion(
                    "operator-residual-decreasing",
                    means.windows(2).all(|w| w[1] < w[0]),
                    format!("{means:?}"),
                ));
            }
        }
        StudyKind::ChainCheck {
            chain,
            times,
            tv_threshold,
            ..
        } => {
            let m = chain.generator.size();
            for (k, &t) in times.iter().enumerate() {
                let counts: Vec<f64> = (0..m)
                    .map(|s| ok.iter().map(|r| r.rows[k * m + s][2]).sum())
                    .collect();
                let total: f64 = counts.iter().sum();
                let tv = match transition_matrix(&chain.generator, t) {
                    Ok(p) => {
                        0.5 * (0..m)
                            .map(|s| (counts[s] / total - p[(chain.initial_state, s)]).abs())
                            .sum::<f64>()
                    }
                    Err(_) => f64::NAN,
                };
                aggregates.push(Aggregate {
                    name: format!("tv[t={t}]"),
                    value: tv,
                    se: f64::NAN,
                    count: total as usize,
                });
                assertions.push(assertion(
                    &format!("tv[t={t}]"),
                    tv <= *tv_threshold,
                    format!("{tv:.5} vs threshold {tv_threshold}"),
                ));
            }
        }
    }
    Summary {
        aggregates,
        fits,
        assertions,
    }
}

/// Runs every replica in parallel, then assembles and (if `spec.output` is
/// set) writes the report. Failed replicas are kept and mark the report
/// degraded; they are never retried.
pub fn run_study(spec: &StudySpec) -> Result<StudyReport, HarnessError> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(HarnessError::Invalid(problems.join("; ")));
    }
    let records: Vec<ReplicaRecord> = (0..spec.replicas)
        .into_par_iter()
        .map(|r| {
            run_replica(spec, r).unwrap_or_else(|e| ReplicaRecord {
                replica: r,
                columns: Vec::new(),
                rows: Vec::new(),
                error: Some(e),
            })
        })
        .collect();
    let summary = summarize(spec, &records);
    let report = StudyReport {
        study_id: spec.id.clone(),
        kind: spec.kind.name().to_owned(),
        degraded: records.iter().any(|r| r.error.is_some()),
        records,
        summary,
        provenance: Provenance {
            config_hash: spec.config_hash(),
            master_seed: spec.master_seed,
            version: CODE_VERSION.to_owned(),
        },
    };
    if let Some(dir) = &spec.output {
        write_report(&report, dir)?;
    }
    Ok(report)
}

/// Writes `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

/// Writes the report under `<dir>/<study-id>/`; returns that directory.
pub fn write_report(report: &StudyReport, dir: &Path) -> Result<PathBuf, HarnessError> {
    let root = dir.join(&report.study_id);
    fs::create_dir_all(&root).map_err(|source| HarnessError::Io {
        path: root.clone(),
        source,
    })?;
    for r in &report.records {
        if r.error.is_none() {
            write_atomic(&root.join(format!("replica-{}.csv", r.replica)), r.to_csv().as_bytes())?;
        }
    }
    let json = serde_json::to_string_pretty(&report.summary_json()).expect("summary serializes");
    write_atomic(&root.join("summary.json"), json.as_bytes())?;
    write_atomic(&root.join("report.txt"), report.to_text().as_bytes())?;
    Ok(root)
}

/// Loads the per-replica records written for `spec`.
pub fn read_records(spec: &StudySpec, dir: &Path) -> Result<Vec<ReplicaRecord>, HarnessError> {
    let root = dir.join(&spec.id);
    (0..spec.replicas)
        .map(|k| {
            let path = root.join(format!("replica-{k}.csv"));
            let text = fs::read_to_string(&path).map_err(|source| HarnessError::Io {
                path: path.clone(),
                source,
            })?;
            ReplicaRecord::from_csv(k, &text).map_err(|reason| HarnessError::Record { path, reason })
        })
        .collect()
}
