//! Particle approximation of the conditional McKean–Vlasov limit, the
//! martingale-problem residual `M_f`, and coupled LLN distance curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{GeneratorMatrix, SwitchingPath};
use crate::dynamics::{
    simulate, CoefficientModel, Checkpoints, DynamicsError, MeasureContext, SimConfig,
    TrajectoryRecord,
};
use crate::harness::{derive_seed, fit_rate, mean_se, RateFit};
use crate::measure::{bl_distance_approx, bl_distance_exact, MeasureError, TestFunction};

/// Smallest reference ensemble accepted by [`conditional_law_reference`].
pub const DEFAULT_REFERENCE_FLOOR: usize = 1024;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitError {
    #[error("time {0} is not a recorded checkpoint")]
    TimeNotOnGrid(f64),
    #[error("no snapshot at {0}, which the quadrature needs")]
    CheckpointMissing(f64),
    #[error("reference size {reference} is too small (need at least {required})")]
    RefTooSmall { reference: usize, required: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("invalid study: {0}")]
    Invalid(String),
}

/// Runs the same integrator at reference size `M` on a given path; the
/// result approximates the conditional law given that path.
pub fn conditional_law_reference<M: CoefficientModel + ?Sized>(
    model: &M,
    config: &SimConfig,
    path: &SwitchingPath,
    seed: u64,
    floor: usize,
) -> Result<TrajectoryRecord, LimitError> {
    if config.num_particles < floor {
        return Err(LimitError::RefTooSmall {
            reference: config.num_particles,
            required: floor,
        });
    }
    Ok(simulate(model, config, path, seed)?)
}

/// No-switching McKean–Vlasov particle system with the regime frozen at `regime`.
pub fn frozen_regime_mckean_vlasov<M: CoefficientModel + ?Sized>(
    model: &M,
    config: &SimConfig,
    regime: usize,
    seed: u64,
) -> Result<TrajectoryRecord, LimitError> {
    Ok(simulate(
        model,
        config,
        &SwitchingPath::constant(config.horizon, regime),
        seed,
    )?)
}

/// `M_f` and its quadrature pieces at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub time: f64,
    /// `⟨η(t), f(·, ς(t))⟩ - ⟨η(0), f(·, ς(0))⟩`
    pub increment: f64,
    /// `∫ ⟨η, 𝓛(η) f(·, ς(s-))⟩ ds`, switching term included.
    pub drift_integral: f64,
    /// `Σ_{jumps ≤ t} ⟨η(τ), f(·, ι_n) - f(·, ι_{n-1})⟩`
    pub jump_sum: f64,
    /// `∫ Σ_j q_{ς(s-) j} ⟨η, f(·, j) - f(·, ς(s-))⟩ ds`
    pub compensator: f64,
    /// `M_f(t)`
    pub value: f64,
    /// `(1/N) ∫ ⟨η, (a∇f, ∇f)⟩ ds`
    pub quadratic_variation: f64,
}

fn mean_value(positions: &[f64], dim: usize, f: &TestFunction, regime: usize) -> f64 {
    let n = positions.len() / dim;
    positions.chunks_exact(dim).map(|x| f.value(x, regime)).sum::<f64>() / n as f64
}

/// Integrals against the empirical measure at one node.
struct NodeIntegrals {
    /// `⟨η, f(·, j)⟩` for every regime flagged as needed, 0 otherwise.
    means: Vec<f64>,
    /// `⟨η, b'∇f + ½ tr(a∇²f)⟩` in the current regime.
    diffusion_generator: f64,
    /// `⟨η, (a∇f, ∇f)⟩` in the current regime.
    energy: f64,
}

fn node_integrals<M: CoefficientModel + ?Sized>(
    model: &M,
    f: &TestFunction,
    dim: usize,
    positions: &[f64],
    regime: usize,
    needed: &[bool],
) -> NodeIntegrals {
    let ctx = MeasureContext::uniform(dim, positions);
    let n = ctx.len() as f64;
    let (mut b, mut a) = (vec![0.0; dim], vec![0.0; dim * dim]);
    let (mut g, mut hess) = (vec![0.0; dim], vec![0.0; dim * dim]);
    let mut means = vec![0.0; needed.len()];
    let mut generator = 0.0;
    let mut energy = 0.0;
    for x in positions.chunks_exact(dim) {
        means[regime] += f.jet(x, regime, &mut g, &mut hess);
        for (j, _) in needed.iter().enumerate().filter(|(j, &w)| w && *j != regime) {
            means[j] += f.value(x, j);
        }
        model.drift(x, &ctx, regime, &mut b);
        model.diffusion_squared(x, &ctx, regime, &mut a);
        let mut second = 0.0;
        let mut quad = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                second += a[i * dim + j] * hess[i * dim + j];
                quad += g[i] * a[i * dim + j] * g[j];
            }
        }
        generator += b.iter().zip(&g).map(|(b, g)| b * g).sum::<f64>() + 0.5 * second;
        energy += quad;
    }
    means.iter_mut().for_each(|v| *v /= n);
    NodeIntegrals {
        means,
        diffusion_generator: generator / n,
        energy: energy / n,
    }
}

/// `M_f` along every recorded snapshot up to `t_end`.
///
/// Time integrals use left endpoints on the snapshot grid with the regime
/// `ς(t_k)`, which is `ς(s-)` on `(t_k, t_{k+1}]`. The snapshots must start
/// at 0 and include every jump time of `path` up to `t_end`.
pub fn martingale_residual_series<M: CoefficientModel + ?Sized>(
    traj: &TrajectoryRecord,
    path: &SwitchingPath,
    q: &GeneratorMatrix,
    model: &M,
    f: &TestFunction,
    t_end: f64,
) -> Result<Vec<ResidualPoint>, LimitError> {
    let snaps = &traj.snapshots;
    if snaps.first().map(|s| s.time) != Some(0.0) {
        return Err(LimitError::CheckpointMissing(0.0));
    }
    let last = snaps.partition_point(|s| s.time <= t_end);
    if snaps[last - 1].time != t_end {
        return Err(LimitError::TimeNotOnGrid(t_end));
    }
    for &tau in path.jump_times().iter().take_while(|&&tau| tau <= t_end) {
        if traj.at(tau).is_none() {
            return Err(LimitError::CheckpointMissing(tau));
        }
    }

    let dim = traj.dim;
    let m = q.size().max(model.num_regimes());
    let mut out = Vec::with_capacity(last);
    let mut drift_integral = 0.0;
    let mut compensator = 0.0;
    let mut jump_sum = 0.0;
    let mut qv = 0.0;
    let mut start = 0.0;
    let mut jumps = path.jumps().peekable();
    for k in 0..last {
        let t = snaps[k].time;
        let regime = path.state_at(t);
        let mut needed = vec![false; m];
        needed[regime] = true;
        for j in 0..q.size() {
            needed[j] |= j != regime && q.rate(regime, j) > 0.0;
        }
        let mut jumping = Vec::new();
        while let Some(&(tau, from, to)) = jumps.peek() {
            if tau > t {
                break;
            }
            // jump times were checked against the snapshots above, so tau == t
            needed[from] = true;
            needed[to] = true;
            jumping.push((from, to));
            jumps.next();
        }
        let node = node_integrals(model, f, dim, &snaps[k].positions, regime, &needed);
        for (from, to) in jumping {
            jump_sum += node.means[to] - node.means[from];
        }
        let value_now = node.means[regime];
        if k == 0 {
            start = value_now;
        }
        let increment = value_now - start;
        out.push(ResidualPoint {
            time: t,
            increment,
            drift_integral,
            jump_sum,
            compensator,
            value: increment - drift_integral - (jump_sum - compensator),
            quadratic_variation: qv / traj.num_particles as f64,
        });
        if k + 1 < last {
            let h = snaps[k + 1].time - t;
            let switching: f64 = (0..q.size())
                .filter(|&j| j != regime && q.rate(regime, j) > 0.0)
                .map(|j| q.rate(regime, j) * (node.means[j] - value_now))
                .sum();
            drift_integral += h * (node.diffusion_generator + switching);
            compensator += h * switching;
            qv += h * node.energy;
        }
    }
    Ok(out)
}

/// `M_f(t)` for a recorded trajectory.
pub fn martingale_residual<M: CoefficientModel + ?Sized>(
    traj: &TrajectoryRecord,
    path: &SwitchingPath,
    q: &GeneratorMatrix,
    model: &M,
    f: &TestFunction,
    t: f64,
) -> Result<f64, LimitError> {
    let series = martingale_residual_series(traj, path, q, model, f, t)?;
    Ok(series.last().expect("series reaches t").value)
}

/// `[M_f]_N(t) = (1/N) ∫_0^t ⟨η(s), (a∇f, ∇f)⟩ ds`.
pub fn quadratic_variation_estimate<M: CoefficientModel + ?Sized>(
    traj: &TrajectoryRecord,
    path: &SwitchingPath,
    model: &M,
    f: &TestFunction,
    t: f64,
) -> Result<f64, LimitError> {
    // the switching rates do not enter the quadratic variation
    let q = GeneratorMatrix::zero(model.num_regimes());
    let series = martingale_residual_series(traj, path, &q, model, f, t)?;
    Ok(series.last().expect("series reaches t").quadratic_variation)
}

/// `∫_0^t ⟨η(s-), f(·, j) - f(·, i)⟩ dM_ij(s)` for every ordered pair `i ≠ j`.
pub fn compensated_jump_integrals(
    traj: &TrajectoryRecord,
    path: &SwitchingPath,
    q: &GeneratorMatrix,
    f: &TestFunction,
    t: f64,
) -> Result<Vec<((usize, usize), f64)>, LimitError> {
    let snaps = &traj.snapshots;
    let last = snaps.partition_point(|s| s.time <= t);
    if last == 0 || snaps[last - 1].time != t {
        return Err(LimitError::TimeNotOnGrid(t));
    }
    let m = q.size();
    let dim = traj.dim;
    let mut acc = vec![0.0; m * m];
    for (tau, from, to) in path.jumps().take_while(|j| j.0 <= t) {
        let snap = traj.at(tau).ok_or(LimitError::CheckpointMissing(tau))?;
        acc[from * m + to] += mean_value(&snap.positions, dim, f, to)
            - mean_value(&snap.positions, dim, f, from);
    }
    for k in 0..last.saturating_sub(1) {
        let h = snaps[k + 1].time - snaps[k].time;
        let i = path.state_at(snaps[k].time);
        let here = mean_value(&snaps[k].positions, dim, f, i);
        for j in (0..m).filter(|&j| j != i) {
            acc[i * m + j] -=
                h * q.rate(i, j) * (mean_value(&snaps[k].positions, dim, f, j) - here);
        }
    }
    Ok((0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| ((i, j), acc[i * m + j]))
        .collect())
}

/// Residual statistics over replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleResidualReport {
    pub test_function: String,
    pub times: Vec<f64>,
    /// `values[r][k]` is `M_f(times[k])` in replica `r`.
    pub values: Vec<Vec<f64>>,
    pub quadratic_variation: Vec<Vec<f64>>,
    pub replicas: usize,
}

impl MartingaleResidualReport {
    pub fn terminal_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v.last().unwrap()).collect()
    }

    pub fn terminal_quadratic_variation(&self) -> Vec<f64> {
        self.quadratic_variation.iter().map(|v| *v.last().unwrap()).collect()
    }
}

/// One point of an LLN curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnPoint {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    /// Some distances came from the approximate lower bound.
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnCurve {
    pub reference_size: usize,
    pub checkpoint: f64,
    pub points: Vec<LlnPoint>,
    /// `distances[r][k]`: replica `r`, system size `n_list[k]`.
    pub distances: Vec<Vec<f64>>,
    pub slope: Option<RateFit>,
}

/// Inputs of a coupled LLN study.
#[derive(Debug, Clone)]
pub struct LlnStudy<'a> {
    pub config: &'a SimConfig,
    pub q: &'a GeneratorMatrix,
    pub initial_regime: usize,
    pub n_list: &'a [usize],
    pub reference_size: usize,
    pub checkpoint: f64,
    pub replicas: usize,
    pub master_seed: u64,
}

/// Chain seed of replica `r`; shared by every system size in that replica.
pub fn chain_seed(master: u64, replica: u64) -> u64 {
    derive_seed(master, replica, "chain")
}

/// Particle seed of the size-`n` system in replica `r`.
pub fn particle_seed(master: u64, replica: u64, n: usize) -> u64 {
    derive_seed(master, replica, &format!("particles/{n}"))
}

/// BL distance between the terminal measures of one coupled replica.
pub fn lln_replica<M: CoefficientModel + ?Sized>(
    model: &M,
    study: &LlnStudy<'_>,
    replica: u64,
) -> Result<Vec<(f64, bool)>, LimitError> {
    use rand::SeedableRng;
    let horizon = study.checkpoint;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(chain_seed(study.master_seed, replica));
    let path = crate::chain::sample_path(study.q, study.initial_regime, horizon, &mut rng)
        .map_err(DynamicsError::from)?;
    let run = |n: usize| -> Result<TrajectoryRecord, LimitError> {
        let cfg = SimConfig {
            num_particles: n,
            horizon,
            checkpoints: Checkpoints::Terminal,
            ..study.config.clone()
        };
        Ok(simulate(model, &cfg, &path, particle_seed(study.master_seed, replica, n))?)
    };
    let reference = run(study.reference_size)?.terminal_measure();
    study
        .n_list
        .iter()
        .map(|&n| {
            let mu = run(n)?.terminal_measure();
            match bl_distance_exact(&mu, &reference) {
                Ok(d) => Ok((d, false)),
                Err(MeasureError::SupportTooLarge { .. }) => {
                    let seed = derive_seed(study.master_seed, replica, "bl-approx");
                    Ok((bl_distance_approx(&mu, &reference, 2000, seed)?.value, true))
                }
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

/// Coupled two-resolution LLN curve: each replica samples one chain path and
/// runs the reference and every system size on it with independent noise.
pub fn lln_distance_curve<M: CoefficientModel + ?Sized>(
    model: &M,
    study: &LlnStudy<'_>,
) -> Result<LlnCurve, LimitError> {
    if study.n_list.is_empty() || study.replicas == 0 {
        return Err(LimitError::Invalid("need system sizes and replicas".into()));
    }
    if study.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LimitError::Invalid("system sizes must be strictly increasing".into()));
    }
    if let Some(&n) = study.n_list.iter().find(|&&n| n > study.reference_size) {
        return Err(LimitError::RefTooSmall {
            reference: study.reference_size,
            required: n,
        });
    }
    let per_replica: Vec<Vec<(f64, bool)>> = (0..study.replicas as u64)
        .into_par_iter()
        .map(|r| lln_replica(model, study, r))
        .collect::<Result<_, _>>()?;
    Ok(assemble_curve(study, &per_replica))
}

pub(crate) fn assemble_curve(study: &LlnStudy<'_>, per_replica: &[Vec<(f64, bool)>]) -> LlnCurve {
    let distances: Vec<Vec<f64>> = per_replica
        .iter()
        .map(|r| r.iter().map(|p| p.0).collect())
        .collect();
    let points: Vec<LlnPoint> = study
        .n_list
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let col: Vec<f64> = distances.iter().map(|r| r[k]).collect();
            let s = mean_se(&col);
            LlnPoint {
                n,
                mean: s.mean,
                se: s.se,
                approximate: per_replica.iter().any(|r| r[k].1),
            }
        })
        .collect();
    let slope = fit_rate(&points.iter().map(|p| (p.n as f64, p.mean)).collect::<Vec<_>>()).ok();
    LlnCurve {
        reference_size: study.reference_size,
        checkpoint: study.checkpoint,
        points,
        distances,
        slope,
    }
}
