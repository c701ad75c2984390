//! Two-time-scale experiments: averaged coefficients, the operator-averaging
//! residual, and fast-versus-averaged comparisons in distribution.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    aggregate, build_fast_generator, project_path, sample_path, AggregationResult, ChainError,
    GeneratorMatrix, Partition, SwitchingPath, TwoScaleSpec,
};
use crate::dynamics::{
    diffusion_generator_split, simulate, Checkpoints, CoefficientModel, DynamicsError,
    GeneratorScratch, MeasureContext, SimConfig, TrajectoryRecord,
};
use crate::harness::{derive_seed, mean_se, MeanSe};
use crate::measure::TestFunction;

/// Relative asymmetry accepted by [`matrix_sqrt_spd`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues above `-EIGEN_TOL` are clipped to zero.
pub const EIGEN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TwoScaleError {
    #[error("model has {model} regimes but the partition has {states} states")]
    DimensionMismatch { model: usize, states: usize },
    #[error("matrix is not symmetric (entry ({0}, {1}))")]
    NotSymmetric(usize, usize),
    #[error("matrix has eigenvalue {0:e} below tolerance")]
    IndefiniteBeyondTolerance(f64),
    #[error("aggregated path is not the projection of the fast path")]
    PathMismatch,
    #[error("time {0} is not a recorded checkpoint")]
    TimeNotOnGrid(f64),
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Factor `σ̄` with `σ̄σ̄' = a`: lower Cholesky factor when `a` is positive
/// definite, symmetric square root otherwise.
pub fn matrix_sqrt_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, TwoScaleError> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(TwoScaleError::NotSymmetric(0, 0));
    }
    let scale = a.amax().max(1.0);
    for i in 0..d {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(TwoScaleError::NotSymmetric(i, j));
            }
        }
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.min();
    if min < -EIGEN_TOL {
        return Err(TwoScaleError::IndefiniteBeyondTolerance(min));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// How the diffusion is averaged within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionAveraging {
    /// `ā = Σ ν a`, `σ̄ = sqrt(ā)`.
    SquaredDiffusion,
    /// `Σ ν σ`. Not the averaged model; a control that should disagree
    /// with the fast system whenever the block's `σ` differ.
    Sigma,
}

const STACK_DIM: usize = 8;

/// Block-averaged coefficients over the aggregated state space.
#[derive(Debug, Clone)]
pub struct AveragedModel<M> {
    base: M,
    partition: Partition,
    nus: Vec<Vec<f64>>,
    mode: DiffusionAveraging,
}

/// Averages `b` and `a = σσ'` by the stationary weights of each block.
pub fn average_coefficients<M: CoefficientModel>(
    model: M,
    agg: &AggregationResult,
) -> Result<AveragedModel<M>, TwoScaleError> {
    with_mode(model, agg, DiffusionAveraging::SquaredDiffusion)
}

/// The `σ`-averaged control; see [`DiffusionAveraging::Sigma`].
pub fn average_sigma_control<M: CoefficientModel>(
    model: M,
    agg: &AggregationResult,
) -> Result<AveragedModel<M>, TwoScaleError> {
    with_mode(model, agg, DiffusionAveraging::Sigma)
}

fn with_mode<M: CoefficientModel>(
    model: M,
    agg: &AggregationResult,
    mode: DiffusionAveraging,
) -> Result<AveragedModel<M>, TwoScaleError> {
    let states = agg.partition.num_states();
    if model.num_regimes() != states {
        return Err(TwoScaleError::DimensionMismatch {
            model: model.num_regimes(),
            states,
        });
    }
    Ok(AveragedModel {
        base: model,
        partition: agg.partition.clone(),
        nus: agg.nus.clone(),
        mode,
    })
}

impl<M: CoefficientModel> AveragedModel<M> {
    pub fn base(&self) -> &M {
        &self.base
    }

    pub fn mode(&self) -> DiffusionAveraging {
        self.mode
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    /// Weighted sum over the block's states of a `len`-vector quantity.
    fn blend(
        &self,
        block: usize,
        len: usize,
        out: &mut [f64],
        mut eval: impl FnMut(usize, &mut [f64]),
    ) {
        let mut stack = [0.0; STACK_DIM * STACK_DIM];
        let mut heap;
        let tmp: &mut [f64] = if len <= stack.len() {
            &mut stack[..len]
        } else {
            heap = vec![0.0; len];
            &mut heap
        };
        out[..len].fill(0.0);
        for (j, s) in self.partition.block_states(block).enumerate() {
            let w = self.nus[block][j];
            if w == 0.0 {
                continue;
            }
            eval(s, tmp);
            for (o, v) in out.iter_mut().zip(tmp.iter()) {
                *o += w * v;
            }
        }
    }

    /// `ā(x, μ, i)` in row-major order.
    pub fn averaged_a(&self, x: &[f64], mu: &MeasureContext<'_>, block: usize, out: &mut [f64]) {
        let d = self.base.dim();
        self.blend(block, d * d, out, |s, t| self.base.diffusion_squared(x, mu, s, t));
    }
}

impl<M: CoefficientModel> CoefficientModel for AveragedModel<M> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn num_regimes(&self) -> usize {
        self.partition.num_blocks()
    }

    fn drift(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.base.dim();
        self.blend(regime, d, out, |s, t| self.base.drift(x, mu, s, t));
    }

    fn diffusion(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.base.dim();
        match self.mode {
            DiffusionAveraging::Sigma => {
                self.blend(regime, d * d, out, |s, t| self.base.diffusion(x, mu, s, t));
            }
            DiffusionAveraging::SquaredDiffusion => {
                if d == 1 {
                    let mut a = [0.0];
                    self.averaged_a(x, mu, regime, &mut a);
                    out[0] = a[0].max(0.0).sqrt();
                    return;
                }
                let mut a = vec![0.0; d * d];
                self.averaged_a(x, mu, regime, &mut a);
                let factor = matrix_sqrt_spd(&DMatrix::from_row_slice(d, d, &a))
                    .expect("a convex combination of σσ' is positive semidefinite");
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = factor[(i, j)];
                    }
                }
            }
        }
    }

    fn diffusion_squared(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.base.dim();
        match self.mode {
            DiffusionAveraging::SquaredDiffusion => self.averaged_a(x, mu, regime, out),
            DiffusionAveraging::Sigma => {
                let mut s = vec![0.0; d * d];
                self.diffusion(x, mu, regime, &mut s);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
                    }
                }
            }
        }
    }

    fn lipschitz_constant(&self) -> f64 {
        self.base.lipschitz_constant()
    }

    fn growth_constant(&self) -> f64 {
        self.base.growth_constant()
    }

    fn diffusion_bound(&self) -> f64 {
        self.base.diffusion_bound()
    }
}

/// `∫_0^t ⟨μ, 𝓛^ε f(·, α^ε)⟩ ds - ∫_0^t ⟨μ, 𝓛̄ f(·, ᾱ^ε)⟩ ds`.
///
/// `f` is indexed by block: on the fast side it is evaluated at the block of
/// the current state, so `Q^ε f` reduces to the slow part. Integrals are
/// left-endpoint sums over the snapshot grid, which must start at 0.
#[allow(clippy::too_many_arguments)]
pub fn operator_residual<M: CoefficientModel>(
    traj: &TrajectoryRecord,
    fast: &SwitchingPath,
    agg_path: &SwitchingPath,
    model: &M,
    avg: &AveragedModel<M>,
    q_eps: &GeneratorMatrix,
    q_bar: &GeneratorMatrix,
    f: &TestFunction,
    t: f64,
) -> Result<f64, TwoScaleError> {
    let partition = avg.partition();
    if project_path(fast, partition)? != *agg_path {
        return Err(TwoScaleError::PathMismatch);
    }
    let snaps = &traj.snapshots;
    let last = snaps.partition_point(|s| s.time <= t);
    if last == 0 || snaps[last - 1].time != t || snaps[0].time != 0.0 {
        return Err(TwoScaleError::TimeNotOnGrid(t));
    }
    let dim = traj.dim;
    let mut scratch = GeneratorScratch::new(dim);
    let mut total = 0.0;
    for k in 0..last - 1 {
        let h = snaps[k + 1].time - snaps[k].time;
        let ctx = MeasureContext::uniform(dim, &snaps[k].positions);
        let state = fast.state_at(snaps[k].time);
        let block = agg_path.state_at(snaps[k].time);
        let mut acc = 0.0;
        for p in 0..ctx.len() {
            let x = ctx.atom(p);
            let here = f.value(x, block);
            let fast_jump: f64 = (0..q_eps.size())
                .filter(|&j| j != state)
                .map(|j| {
                    let target = partition.block_of(j).expect("state in partition");
                    q_eps.rate(state, j) * (f.value(x, target) - here)
                })
                .sum();
            let slow_jump: f64 = (0..q_bar.size())
                .filter(|&l| l != block)
                .map(|l| q_bar.rate(block, l) * (f.value(x, l) - here))
                .sum();
            let fast_diff = diffusion_generator_split(model, f, &ctx, x, state, block, &mut scratch);
            let avg_diff = diffusion_generator_split(avg, f, &ctx, x, block, block, &mut scratch);
            acc += (fast_diff - avg_diff) + (fast_jump - slow_jump);
        }
        total += h * acc / ctx.len() as f64;
    }
    Ok(total)
}

/// Inputs of a fast-versus-averaged study.
#[derive(Debug, Clone)]
pub struct TwoScaleExperiment<'a> {
    pub spec: &'a TwoScaleSpec,
    /// Particle count, horizon, step, initial law; checkpoints are ignored.
    pub config: &'a SimConfig,
    /// Flat initial state of the fast chain; the averaged chain starts in its block.
    pub initial_state: usize,
    pub eps_list: &'a [f64],
    pub replicas: usize,
    pub test_functions: &'a [TestFunction],
    pub master_seed: u64,
    /// Also run the `σ`-averaged control.
    pub sigma_control: bool,
    /// Also compute the operator residual with this function.
    pub residual_function: Option<&'a TestFunction>,
}

/// One replica of the experiment at one `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoScaleReplica {
    pub epsilon: f64,
    /// `⟨μ^ε_N(T), f⟩` per test function.
    pub fast: Vec<f64>,
    pub averaged: Vec<f64>,
    pub control: Option<Vec<f64>>,
    pub operator_residual: Option<f64>,
    /// `sup_t ⟨μ^ε_N(t), ψ⟩` over the fast run's checkpoints.
    pub fast_psi_sup: f64,
    pub fast_psi_initial: f64,
}

/// Summary row: one `(ε, f)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    pub function: String,
    pub fast: MeanSe,
    pub averaged: MeanSe,
    pub control: Option<MeanSe>,
    /// `|mean fast - mean averaged|`
    pub difference: f64,
    /// `sqrt(se_fast² + se_averaged²)`
    pub difference_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Mean of `|operator_residual(T)|` per `ε`, when requested.
    pub residual: Vec<(f64, MeanSe)>,
    /// `records[e][r]` for `eps_list[e]`, replica `r`.
    pub records: Vec<Vec<TwoScaleReplica>>,
}

impl ConvergenceTable {
    pub fn rows_for(&self, function: &str) -> Vec<&ConvergenceRow> {
        self.rows.iter().filter(|r| r.function == function).collect()
    }

    /// Long-format CSV: `epsilon,function,fast_mean,averaged_mean,abs_diff,se`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,function,fast_mean,averaged_mean,abs_diff,se\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:?},{},{:?},{:?},{:?},{:?}\n",
                r.epsilon, r.function, r.fast.mean, r.averaged.mean, r.difference, r.difference_se
            ));
        }
        out
    }
}

/// Seed roles: the chain and particle seeds of each system are shared across
/// `ε`, so the runs at different `ε` use common random numbers.
pub fn seed_for(master: u64, replica: u64, system: &str, part: &str) -> u64 {
    derive_seed(master, replica, &format!("{part}/{system}"))
}

fn integrals(traj: &TrajectoryRecord, functions: &[TestFunction], regime: usize) -> Vec<f64> {
    let snap = traj.last().expect("terminal snapshot");
    let n = traj.num_particles as f64;
    functions
        .iter()
        .map(|f| {
            snap.positions
                .chunks_exact(traj.dim)
                .map(|x| f.value(x, regime))
                .sum::<f64>()
                / n
        })
        .collect()
}

fn psi(positions: &[f64], n: usize) -> f64 {
    positions.iter().map(|v| v * v).sum::<f64>() / n as f64
}

/// Validates the experiment; `dt ≤ ε/10` must hold for every `ε`.
pub fn validate_experiment(exp: &TwoScaleExperiment<'_>) -> Result<(), TwoScaleError> {
    if exp.eps_list.is_empty() {
        return Err(TwoScaleError::Invalid("eps_list is empty".into()));
    }
    if exp.eps_list.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
        return Err(TwoScaleError::Invalid("every epsilon must be positive".into()));
    }
    if exp.eps_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(TwoScaleError::Invalid("eps_list must be strictly decreasing".into()));
    }
    if exp.replicas == 0 {
        return Err(TwoScaleError::Invalid("need at least one replica".into()));
    }
    let eps_min = *exp.eps_list.last().unwrap();
    if exp.config.dt > eps_min / 10.0 * (1.0 + 1e-12) {
        return Err(TwoScaleError::Invalid(format!(
            "dt = {} exceeds epsilon/10 = {} (fast jumps would be under-resolved)",
            exp.config.dt,
            eps_min / 10.0
        )));
    }
    if exp.initial_state >= exp.spec.num_states() {
        return Err(TwoScaleError::Invalid(format!(
            "initial state {} outside {} states",
            exp.initial_state,
            exp.spec.num_states()
        )));
    }
    Ok(())
}

/// One replica at one `ε`.
pub fn two_scale_replica<M: CoefficientModel + Clone>(
    model: &M,
    exp: &TwoScaleExperiment<'_>,
    epsilon: f64,
    replica: u64,
) -> Result<TwoScaleReplica, TwoScaleError> {
    let spec = exp.spec.with_epsilon(epsilon)?;
    let q_eps = build_fast_generator(&spec)?;
    let agg = aggregate(&spec)?;
    let avg = average_coefficients(model.clone(), &agg)?;
    let horizon = exp.config.horizon;
    let block0 = agg.partition.block_of(exp.initial_state)?;
    let seed = |system: &str, part: &str| seed_for(exp.master_seed, replica, system, part);

    let fast_path = sample_path(
        &q_eps,
        exp.initial_state,
        horizon,
        &mut ChaCha8Rng::seed_from_u64(seed("fast", "chain")),
    )?;
    let fast_agg = project_path(&fast_path, &agg.partition)?;
    let checkpoints = if exp.residual_function.is_some() {
        Checkpoints::EveryNode
    } else {
        Checkpoints::Terminal
    };
    let cfg = SimConfig {
        checkpoints: checkpoints.clone(),
        ..exp.config.clone()
    };
    let fast = simulate(model, &cfg, &fast_path, seed("fast", "particles"))?;
    let fast_block = fast_agg.state_at(horizon);
    let fast_values = integrals(&fast, exp.test_functions, fast_block);
    let operator = match exp.residual_function {
        Some(f) => Some(operator_residual(
            &fast, &fast_path, &fast_agg, model, &avg, &q_eps, &agg.q_bar, f, horizon,
        )?),
        None => None,
    };
    let n = exp.config.num_particles;
    let fast_psi_initial = match fast.snapshots.first() {
        Some(s) if s.time == 0.0 => psi(&s.positions, n),
        _ => f64::NAN,
    };
    let fast_psi_sup = fast
        .snapshots
        .iter()
        .map(|s| psi(&s.positions, n))
        .fold(f64::NEG_INFINITY, f64::max);

    let terminal = SimConfig {
        checkpoints: Checkpoints::Terminal,
        ..exp.config.clone()
    };
    let avg_path = sample_path(
        &agg.q_bar,
        block0,
        horizon,
        &mut ChaCha8Rng::seed_from_u64(seed("averaged", "chain")),
    )?;
    let averaged = simulate(&avg, &terminal, &avg_path, seed("averaged", "particles"))?;
    let averaged_values = integrals(&averaged, exp.test_functions, avg_path.state_at(horizon));

    let control = if exp.sigma_control {
        let ctl = average_sigma_control(model.clone(), &agg)?;
        let path = sample_path(
            &agg.q_bar,
            block0,
            horizon,
            &mut ChaCha8Rng::seed_from_u64(seed("control", "chain")),
        )?;
        let traj = simulate(&ctl, &terminal, &path, seed("control", "particles"))?;
        Some(integrals(&traj, exp.test_functions, path.state_at(horizon)))
    } else {
        None
    };

    Ok(TwoScaleReplica {
        epsilon,
        fast: fast_values,
        averaged: averaged_values,
        control,
        operator_residual: operator,
        fast_psi_sup,
        fast_psi_initial,
    })
}

/// Fast system (chain from `Q^ε`) against the averaged system (chain from
/// `Q̄`, coefficients from [`average_coefficients`]) for every `ε`.
pub fn two_scale_experiment<M: CoefficientModel + Clone>(
    model: &M,
    exp: &TwoScaleExperiment<'_>,
) -> Result<ConvergenceTable, TwoScaleError> {
    validate_experiment(exp)?;
    let mut records = Vec::with_capacity(exp.eps_list.len());
    for &eps in exp.eps_list {
        let runs: Vec<TwoScaleReplica> = (0..exp.replicas as u64)
            .into_par_iter()
            .map(|r| two_scale_replica(model, exp, eps, r))
            .collect::<Result<_, _>>()?;
        records.push(runs);
    }
    Ok(summarize(exp.eps_list, exp.test_functions, records))
}

/// Aggregates stored replica records into a table.
pub fn summarize(
    eps_list: &[f64],
    functions: &[TestFunction],
    records: Vec<Vec<TwoScaleReplica>>,
) -> ConvergenceTable {
    let mut rows = Vec::new();
    let mut residual = Vec::new();
    for (e, runs) in records.iter().enumerate() {
        for (k, f) in functions.iter().enumerate() {
            let fast = mean_se(&runs.iter().map(|r| r.fast[k]).collect::<Vec<_>>());
            let averaged = mean_se(&runs.iter().map(|r| r.averaged[k]).collect::<Vec<_>>());
            let control = runs
                .iter()
                .map(|r| r.control.as_ref().map(|c| c[k]))
                .collect::<Option<Vec<_>>>()
                .map(|v| mean_se(&v));
            rows.push(ConvergenceRow {
                epsilon: eps_list[e],
                function: f.id(),
                difference: (fast.mean - averaged.mean).abs(),
                difference_se: fast.se.hypot(averaged.se),
                fast,
                averaged,
                control,
            });
        }
        if let Some(v) = runs
            .iter()
            .map(|r| r.operator_residual.map(f64::abs))
            .collect::<Option<Vec<_>>>()
        {
            residual.push((eps_list[e], mean_se(&v)));
        }
    }
    ConvergenceTable {
        rows,
        residual,
        records,
    }
}
