//! N-particle mean-field SDE with a common switching regime, integrated by
//! explicit Euler–Maruyama on a fixed grid that is split at chain jumps.

mod model;
mod record;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{sample_path, ChainError, GeneratorMatrix, SwitchingPath};
use crate::measure::{EmpiricalMeasure, TestFunction};

pub use model::{BuiltinModel, CoefficientModel, MeasureContext};
pub use record::{CheckpointSummary, Snapshot, TrajectoryRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("non-finite state for particle {particle} at t = {time}")]
    NonFiniteState { time: f64, particle: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Positions of `N` particles in `R^d` with the current time and regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub dim: usize,
    pub positions: Vec<f64>,
    pub time: f64,
    pub regime: usize,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, positions: Vec<f64>, regime: usize) -> Result<Self, DynamicsError> {
        if dim == 0 || positions.is_empty() || positions.len() % dim != 0 {
            return Err(DynamicsError::ConfigInvalid(format!(
                "{} coordinates do not form particles in dimension {dim}",
                positions.len()
            )));
        }
        if let Some(k) = positions.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState {
                time: 0.0,
                particle: k / dim,
            });
        }
        Ok(Self {
            dim,
            positions,
            time: 0.0,
            regime,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.positions.clone())
            .expect("ensemble positions are finite and nonempty")
    }
}

/// How the initial positions are produced. Random variants draw each
/// particle from that particle's own stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// Every particle at the same point.
    Constant { point: Vec<f64> },
    /// One point per particle.
    Points { points: Vec<Vec<f64>> },
    /// Independent `N(mean_k, std²)` coordinates.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Independent `U[low, high)` coordinates.
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Checkpoints {
    /// Only `t = T`.
    Terminal,
    /// Every integrator node, including `t = 0` and all jump times.
    EveryNode,
    /// The listed times (each in `[0, T]`).
    Times(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub num_particles: usize,
    pub horizon: f64,
    pub dt: f64,
    pub initial: InitialCondition,
    pub checkpoints: Checkpoints,
}

impl SimConfig {
    /// Every problem with the configuration for a model of dimension `dim`.
    pub fn violations(&self, dim: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_particles == 0 {
            out.push("num_particles must be at least 1".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            out.push(format!("horizon {} must be positive", self.horizon));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            out.push(format!("dt {} must be positive", self.dt));
        }
        match &self.initial {
            InitialCondition::Constant { point } if point.len() != dim => {
                out.push(format!("initial point has {} coordinates, model has {dim}", point.len()))
            }
            InitialCondition::Points { points } => {
                if points.len() != self.num_particles {
                    out.push(format!(
                        "{} initial points for {} particles",
                        points.len(),
                        self.num_particles
                    ));
                }
                if points.iter().any(|p| p.len() != dim) {
                    out.push(format!("initial points must have {dim} coordinates"));
                }
            }
            InitialCondition::Gaussian { mean, std } => {
                if mean.len() != dim {
                    out.push(format!("gaussian mean has {} coordinates, model has {dim}", mean.len()));
                }
                if !(*std >= 0.0) {
                    out.push(format!("gaussian std {std} must be nonnegative"));
                }
            }
            InitialCondition::Uniform { low, high } if !(low < high) => {
                out.push(format!("uniform range [{low}, {high}) is empty"))
            }
            _ => {}
        }
        if let Checkpoints::Times(times) = &self.checkpoints {
            if times.windows(2).any(|w| !(w[0] < w[1])) {
                out.push("checkpoint times must be strictly increasing".into());
            }
            if times.iter().any(|&t| !(0.0..=self.horizon).contains(&t)) {
                out.push(format!("checkpoint times must lie in [0, {}]", self.horizon));
            }
        }
        out
    }

    pub fn validate(&self, dim: usize) -> Result<(), DynamicsError> {
        let v = self.violations(dim);
        if v.is_empty() {
            Ok(())
        } else {
            Err(DynamicsError::ConfigInvalid(v.join("; ")))
        }
    }
}

/// Particle `i` draws from stream `i` of the ChaCha8 generator keyed by `seed`.
pub fn particle_streams(seed: u64, ids: impl IntoIterator<Item = u64>) -> Vec<ChaCha8Rng> {
    ids.into_iter()
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        })
        .collect()
}

fn initial_positions(
    initial: &InitialCondition,
    dim: usize,
    rngs: &mut [ChaCha8Rng],
) -> Vec<f64> {
    let n = rngs.len();
    let mut out = Vec::with_capacity(n * dim);
    match initial {
        InitialCondition::Constant { point } => {
            for _ in 0..n {
                out.extend_from_slice(point);
            }
        }
        InitialCondition::Points { points } => {
            for p in points {
                out.extend_from_slice(p);
            }
        }
        InitialCondition::Gaussian { mean, std } => {
            for rng in rngs.iter_mut() {
                for m in mean {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(m + std * z);
                }
            }
        }
        InitialCondition::Uniform { low, high } => {
            let dist = rand_distr::Uniform::new(*low, *high).expect("validated range");
            for rng in rngs.iter_mut() {
                for _ in 0..dim {
                    out.push(dist.sample(rng));
                }
            }
        }
    }
    out
}

/// Particle counts at or above this are stepped in parallel.
const PARALLEL_MIN_COORDS: usize = 4096;

/// One explicit Euler–Maruyama step of length `h` in a fixed regime.
///
/// The measure argument is the ensemble's empirical measure at the start of
/// the step; particle `i` draws its noise from `rngs[i]`.
pub fn em_step<M: CoefficientModel + ?Sized>(
    model: &M,
    ens: &mut ParticleEnsemble,
    regime: usize,
    h: f64,
    rngs: &mut [ChaCha8Rng],
) -> Result<(), DynamicsError> {
    let d = ens.dim;
    let n = ens.len();
    if rngs.len() != n {
        return Err(DynamicsError::ConfigInvalid(format!(
            "{} noise streams for {n} particles",
            rngs.len()
        )));
    }
    if regime >= model.num_regimes() {
        return Err(DynamicsError::ConfigInvalid(format!(
            "regime {regime} but model has {} regimes",
            model.num_regimes()
        )));
    }
    let mut next = vec![0.0; n * d];
    let root_h = h.sqrt();
    {
        let ctx = MeasureContext::uniform(d, &ens.positions);
        let positions = &ens.positions;
        let step = |scratch: &mut (Vec<f64>, Vec<f64>, Vec<f64>),
                    i: usize,
                    out: &mut [f64],
                    rng: &mut ChaCha8Rng| {
            let (b, s, xi) = scratch;
            let x = &positions[i * d..(i + 1) * d];
            model.drift(x, &ctx, regime, b);
            model.diffusion(x, &ctx, regime, s);
            for z in xi.iter_mut() {
                *z = StandardNormal.sample(rng);
            }
            for k in 0..d {
                let noise: f64 = (0..d).map(|l| s[k * d + l] * xi[l]).sum();
                out[k] = x[k] + b[k] * h + noise * root_h;
            }
        };
        let init = || (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);
        if n * d >= PARALLEL_MIN_COORDS {
            next.par_chunks_mut(d)
                .zip(rngs.par_iter_mut())
                .enumerate()
                .for_each_init(init, |scratch, (i, (out, rng))| step(scratch, i, out, rng));
        } else {
            let mut scratch = init();
            for (i, (out, rng)) in next.chunks_mut(d).zip(rngs.iter_mut()).enumerate() {
                step(&mut scratch, i, out, rng);
            }
        }
    }
    if let Some(k) = next.iter().position(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFiniteState {
            time: ens.time + h,
            particle: k / d,
        });
    }
    ens.positions = next;
    ens.time += h;
    ens.regime = regime;
    Ok(())
}

/// Resolved checkpoint schedule.
#[derive(Debug, Clone, PartialEq)]
enum Plan {
    EveryNode,
    Times(Vec<f64>),
}

impl Plan {
    fn new(checkpoints: &Checkpoints, horizon: f64) -> Self {
        match checkpoints {
            Checkpoints::Terminal => Plan::Times(vec![horizon]),
            Checkpoints::EveryNode => Plan::EveryNode,
            Checkpoints::Times(t) => Plan::Times(t.clone()),
        }
    }

    fn records(&self, t: f64) -> bool {
        match self {
            Plan::EveryNode => true,
            Plan::Times(times) => times.binary_search_by(|c| c.total_cmp(&t)).is_ok(),
        }
    }

    fn next_after(&self, t: f64) -> Option<f64> {
        match self {
            Plan::EveryNode => None,
            Plan::Times(times) => times.get(times.partition_point(|&c| c <= t)).copied(),
        }
    }
}

/// Stateful integrator: an ensemble together with its per-particle streams.
///
/// The step grid is anchored at multiples of `dt` from time 0, so advancing
/// in several calls visits the same nodes as a single call.
#[derive(Debug)]
pub struct ParticleIntegrator<'m, M: CoefficientModel + ?Sized> {
    model: &'m M,
    dt: f64,
    horizon: f64,
    plan: Plan,
    ensemble: ParticleEnsemble,
    rngs: Vec<ChaCha8Rng>,
    record: TrajectoryRecord,
}

impl<'m, M: CoefficientModel + ?Sized> ParticleIntegrator<'m, M> {
    /// Draws the initial ensemble; particle `i` uses stream `stream_ids[i]`.
    pub fn new(
        model: &'m M,
        config: &SimConfig,
        initial_regime: usize,
        seed: u64,
        stream_ids: &[u64],
    ) -> Result<Self, DynamicsError> {
        config.validate(model.dim())?;
        if stream_ids.len() != config.num_particles {
            return Err(DynamicsError::ConfigInvalid(format!(
                "{} stream ids for {} particles",
                stream_ids.len(),
                config.num_particles
            )));
        }
        let mut rngs = particle_streams(seed, stream_ids.iter().copied());
        let positions = initial_positions(&config.initial, model.dim(), &mut rngs);
        let ensemble = ParticleEnsemble::new(model.dim(), positions, initial_regime)?;
        let plan = Plan::new(&config.checkpoints, config.horizon);
        let mut record = TrajectoryRecord::new(model.dim(), config.num_particles);
        if plan.records(0.0) {
            record.snapshots.push(Snapshot {
                time: 0.0,
                regime: initial_regime,
                positions: ensemble.positions.clone(),
            });
        }
        Ok(Self {
            model,
            dt: config.dt,
            horizon: config.horizon,
            plan,
            ensemble,
            rngs,
            record,
        })
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn time(&self) -> f64 {
        self.ensemble.time
    }

    pub fn record(&self) -> &TrajectoryRecord {
        &self.record
    }

    pub fn into_record(self) -> TrajectoryRecord {
        self.record
    }

    /// Advances to `target` following the regimes of `path`, splitting steps
    /// at its jump times.
    pub fn advance(&mut self, target: f64, path: &SwitchingPath) -> Result<(), DynamicsError> {
        if target > path.horizon() {
            return Err(DynamicsError::ConfigInvalid(format!(
                "target {target} beyond path horizon {}",
                path.horizon()
            )));
        }
        self.run(target, path.jump_times(), |t| path.state_at(t))
    }

    /// Advances to `target` with the regime frozen.
    pub fn advance_frozen(&mut self, target: f64, regime: usize) -> Result<(), DynamicsError> {
        self.run(target, &[], |_| regime)
    }

    fn run(
        &mut self,
        target: f64,
        breaks: &[f64],
        regime_at: impl Fn(f64) -> usize,
    ) -> Result<(), DynamicsError> {
        if target > self.horizon {
            return Err(DynamicsError::ConfigInvalid(format!(
                "target {target} beyond horizon {}",
                self.horizon
            )));
        }
        while self.ensemble.time < target {
            let t = self.ensemble.time;
            let grid = ((t / self.dt + 1e-9).floor() + 1.0) * self.dt;
            let mut node = grid.min(target);
            if let Some(&b) = breaks.get(breaks.partition_point(|&b| b <= t)) {
                node = node.min(b);
            }
            if let Some(c) = self.plan.next_after(t) {
                node = node.min(c);
            }
            let regime = regime_at(t);
            em_step(self.model, &mut self.ensemble, regime, node - t, &mut self.rngs)?;
            // land exactly on the node rather than on t + (node - t)
            self.ensemble.time = node;
            self.ensemble.regime = regime_at(node);
            if self.plan.records(node) {
                self.record.snapshots.push(Snapshot {
                    time: node,
                    regime: self.ensemble.regime,
                    positions: self.ensemble.positions.clone(),
                });
            }
        }
        Ok(())
    }
}

fn identity_streams(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// Integrates on `[0, T]` along a given switching path.
pub fn simulate<M: CoefficientModel + ?Sized>(
    model: &M,
    config: &SimConfig,
    path: &SwitchingPath,
    seed: u64,
) -> Result<TrajectoryRecord, DynamicsError> {
    simulate_with_streams(model, config, path, seed, &identity_streams(config.num_particles))
}

/// As [`simulate`], with an explicit noise stream per particle.
pub fn simulate_with_streams<M: CoefficientModel + ?Sized>(
    model: &M,
    config: &SimConfig,
    path: &SwitchingPath,
    seed: u64,
    stream_ids: &[u64],
) -> Result<TrajectoryRecord, DynamicsError> {
    if path.horizon() < config.horizon {
        return Err(DynamicsError::ConfigInvalid(format!(
            "path horizon {} shorter than simulation horizon {}",
            path.horizon(),
            config.horizon
        )));
    }
    let mut integrator =
        ParticleIntegrator::new(model, config, path.initial_state(), seed, stream_ids)?;
    integrator.advance(config.horizon, path)?;
    Ok(integrator.into_record())
}

/// Samples the chain from `chain_seed`, then integrates with `particle_seed`.
pub fn simulate_with_chain<M: CoefficientModel + ?Sized>(
    model: &M,
    config: &SimConfig,
    q: &GeneratorMatrix,
    initial_regime: usize,
    chain_seed: u64,
    particle_seed: u64,
) -> Result<(TrajectoryRecord, SwitchingPath), DynamicsError> {
    config.validate(model.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
    let path = sample_path(q, initial_regime, config.horizon, &mut rng)?;
    let record = simulate(model, config, &path, particle_seed)?;
    Ok((record, path))
}

/// Scratch buffers for evaluating the generator at many points.
#[derive(Debug, Clone)]
pub struct GeneratorScratch {
    b: Vec<f64>,
    a: Vec<f64>,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl GeneratorScratch {
    pub fn new(d: usize) -> Self {
        Self {
            b: vec![0.0; d],
            a: vec![0.0; d * d],
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
        }
    }
}

/// Diffusion part `b'∇f + ½ tr(a ∇²f)` of the generator at `(x, i)`.
pub fn diffusion_generator<M: CoefficientModel + ?Sized>(
    model: &M,
    f: &TestFunction,
    mu: &MeasureContext<'_>,
    x: &[f64],
    regime: usize,
    s: &mut GeneratorScratch,
) -> f64 {
    diffusion_generator_split(model, f, mu, x, regime, regime, s)
}

/// As [`diffusion_generator`], with coefficients in regime `coeff_regime` and
/// `f` evaluated in regime `f_regime`.
pub fn diffusion_generator_split<M: CoefficientModel + ?Sized>(
    model: &M,
    f: &TestFunction,
    mu: &MeasureContext<'_>,
    x: &[f64],
    coeff_regime: usize,
    f_regime: usize,
    s: &mut GeneratorScratch,
) -> f64 {
    let d = x.len();
    model.drift(x, mu, coeff_regime, &mut s.b);
    model.diffusion_squared(x, mu, coeff_regime, &mut s.a);
    f.gradient(x, f_regime, &mut s.grad);
    f.hessian(x, f_regime, &mut s.hess);
    let first: f64 = s.b.iter().zip(&s.grad).map(|(b, g)| b * g).sum();
    let second: f64 = (0..d * d).map(|k| s.a[k] * s.hess[k]).sum();
    first + 0.5 * second
}

/// `Σ_j q_ij (f(x, j) - f(x, i))`
pub fn switching_generator(q: &GeneratorMatrix, f: &TestFunction, x: &[f64], regime: usize) -> f64 {
    let here = f.value(x, regime);
    (0..q.size())
        .filter(|&j| j != regime)
        .map(|j| q.rate(regime, j) * (f.value(x, j) - here))
        .sum()
}

/// `𝓛(μ)f(x, i) = b'∇f + ½ tr(a∇²f) + Σ_j q_ij (f(x,j) - f(x,i))` with `a = σσ'`.
pub fn generator_apply<M: CoefficientModel + ?Sized>(
    model: &M,
    q: &GeneratorMatrix,
    f: &TestFunction,
    mu: &EmpiricalMeasure,
    x: &[f64],
    regime: usize,
) -> f64 {
    let ctx = MeasureContext::from_measure(mu);
    let mut scratch = GeneratorScratch::new(x.len());
    diffusion_generator(model, f, &ctx, x, regime, &mut scratch) + switching_generator(q, f, x, regime)
}

/// `⟨μ, b'∇f + ½ tr(a∇²f)⟩` in regime `i`.
pub fn integrated_diffusion_generator<M: CoefficientModel + ?Sized>(
    model: &M,
    f: &TestFunction,
    mu: &MeasureContext<'_>,
    regime: usize,
) -> f64 {
    let mut s = GeneratorScratch::new(mu.dim());
    (0..mu.len())
        .map(|k| mu.weight(k) * diffusion_generator(model, f, mu, mu.atom(k), regime, &mut s))
        .sum()
}

/// `⟨μ, (a∇f, ∇f)⟩` in regime `i`.
pub fn integrated_energy<M: CoefficientModel + ?Sized>(
    model: &M,
    f: &TestFunction,
    mu: &MeasureContext<'_>,
    regime: usize,
) -> f64 {
    let d = mu.dim();
    let mut s = GeneratorScratch::new(d);
    (0..mu.len())
        .map(|k| {
            let x = mu.atom(k);
            model.diffusion_squared(x, mu, regime, &mut s.a);
            f.gradient(x, regime, &mut s.grad);
            let mut e = 0.0;
            for i in 0..d {
                for j in 0..d {
                    e += s.grad[i] * s.a[i * d + j] * s.grad[j];
                }
            }
            mu.weight(k) * e
        })
        .sum()
}

/// `V = (⟨μ_N, ψ⟩ + 1)^p`
pub fn lyapunov_moment(ens: &ParticleEnsemble, p: f64) -> Result<f64, DynamicsError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DynamicsError::ConfigInvalid(format!("exponent {p} not in (0, 1]")));
    }
    let psi = ens.positions.iter().map(|v| v * v).sum::<f64>() / ens.len() as f64;
    Ok((psi + 1.0).powf(p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// `b = β`, `σ = s I`; regime-independent.
    #[derive(Debug)]
    struct ConstantDrift {
        beta: Vec<f64>,
        s: f64,
    }

    impl CoefficientModel for ConstantDrift {
        fn dim(&self) -> usize {
            self.beta.len()
        }
        fn num_regimes(&self) -> usize {
            2
        }
        fn drift(&self, _: &[f64], _: &MeasureContext<'_>, _: usize, out: &mut [f64]) {
            out.copy_from_slice(&self.beta);
        }
        fn diffusion(&self, _: &[f64], _: &MeasureContext<'_>, _: usize, out: &mut [f64]) {
            let d = self.dim();
            out.fill(0.0);
            for i in 0..d {
                out[i * d + i] = self.s;
            }
        }
        fn lipschitz_constant(&self) -> f64 {
            0.0
        }
        fn growth_constant(&self) -> f64 {
            self.beta.iter().map(|b| b * b).sum::<f64>().sqrt()
        }
        fn diffusion_bound(&self) -> f64 {
            self.s * (self.dim() as f64).sqrt()
        }
    }

    fn ou(a: f64, s: f64) -> BuiltinModel {
        BuiltinModel::OrnsteinUhlenbeck {
            dim: 1,
            a: vec![a, a],
            c: vec![0.0, 0.0],
            s: vec![s, s],
        }
    }

    fn config(n: usize, horizon: f64, dt: f64, initial: InitialCondition) -> SimConfig {
        SimConfig {
            num_particles: n,
            horizon,
            dt,
            initial,
            checkpoints: Checkpoints::Terminal,
        }
    }

    #[test]
    fn zero_coefficients_leave_ensemble_unchanged() {
        let model = ConstantDrift {
            beta: vec![0.0, 0.0],
            s: 0.0,
        };
        let mut ens = ParticleEnsemble::new(2, vec![1.0, 2.0, -3.0, 0.5], 0).unwrap();
        let before = ens.positions.clone();
        let mut rngs = particle_streams(1, 0..2);
        em_step(&model, &mut ens, 0, 0.1, &mut rngs).unwrap();
        assert_eq!(ens.positions, before);
    }

    #[test]
    fn linear_ode_reaches_exp_minus_one() {
        let model = ou(1.0, 0.0);
        let cfg = config(1, 1.0, 1e-4, InitialCondition::Constant { point: vec![1.0] });
        let rec = simulate(&model, &cfg, &SwitchingPath::constant(1.0, 0), 3).unwrap();
        let x = rec.last().unwrap().positions[0];
        assert!((x - (-1.0f64).exp()).abs() <= 1e-3, "{x}");
        assert_eq!(rec.last().unwrap().time, 1.0);
    }

    #[test]
    fn mean_reversion_preserves_the_mean() {
        let model = BuiltinModel::MeanRevertingSwitch {
            dim: 1,
            a: vec![1.5],
            c: vec![0.0],
            s: vec![0.0],
        };
        let mut ens = ParticleEnsemble::new(1, vec![-1.0, 0.5, 3.0, 1.5], 0).unwrap();
        let mut rngs = particle_streams(1, 0..4);
        for _ in 0..20 {
            let before: f64 = ens.positions.iter().sum();
            em_step(&model, &mut ens, 0, 0.05, &mut rngs).unwrap();
            let after: f64 = ens.positions.iter().sum();
            assert_abs_diff_eq!(before, after, epsilon = 1e-12);
        }
    }

    #[test]
    fn steps_split_at_jumps_and_checkpoints() {
        let model = ou(1.0, 0.3);
        let path = SwitchingPath::new(1.0, 0, vec![(0.3337, 1), (0.5, 0)]).unwrap();
        let cfg = SimConfig {
            checkpoints: Checkpoints::EveryNode,
            ..config(3, 1.0, 0.1, InitialCondition::Constant { point: vec![0.0] })
        };
        let rec = simulate(&model, &cfg, &path, 5).unwrap();
        let times = rec.times();
        let expected = [0.0, 0.1, 0.2, 0.30000000000000004, 0.3337, 0.4, 0.5, 0.6000000000000001,
            0.7000000000000001, 0.8, 0.9, 1.0];
        assert_eq!(times, expected);
        let regimes: Vec<usize> = rec.snapshots.iter().map(|s| s.regime).collect();
        assert_eq!(regimes, vec![0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn generator_examples() {
        let q = GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![2.0, -2.0]]).unwrap();
        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 1.0]).unwrap();
        let model = ConstantDrift {
            beta: vec![0.7],
            s: 1.3,
        };
        let c = TestFunction::Constant { value: 4.0 };
        assert_eq!(generator_apply(&model, &q, &c, &mu, &[0.4], 1), 0.0);
        let lin = TestFunction::Linear {
            coefficients: vec![1.0],
        };
        assert_abs_diff_eq!(generator_apply(&model, &q, &lin, &mu, &[0.4], 0), 0.7, epsilon = 1e-15);
        // ψ: 2 b x + tr(a)
        let v = generator_apply(&model, &q, &TestFunction::SquaredNorm, &mu, &[0.4], 0);
        assert_abs_diff_eq!(v, 2.0 * 0.7 * 0.4 + 1.3 * 1.3, epsilon = 1e-14);
        // the switching term uses the other regime's function
        let per = TestFunction::PerRegime {
            functions: vec![TestFunction::Constant { value: 1.0 }, TestFunction::Constant { value: 3.0 }],
        };
        assert_abs_diff_eq!(generator_apply(&model, &q, &per, &mu, &[0.0], 0), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(generator_apply(&model, &q, &per, &mu, &[0.0], 1), -4.0, epsilon = 1e-15);
    }

    #[test]
    fn lyapunov_examples() {
        let origin = ParticleEnsemble::new(1, vec![0.0, 0.0], 0).unwrap();
        assert_eq!(lyapunov_moment(&origin, 1.0).unwrap(), 1.0);
        let ens = ParticleEnsemble::new(1, vec![0.0, 2.0], 0).unwrap();
        assert_eq!(lyapunov_moment(&ens, 1.0).unwrap(), 3.0);
        assert_abs_diff_eq!(lyapunov_moment(&ens, 0.5).unwrap(), 3f64.sqrt(), epsilon = 1e-15);
        assert!(lyapunov_moment(&ens, 1.5).is_err());
        assert!(lyapunov_moment(&ens, 0.0).is_err());
    }

    #[test]
    fn non_finite_state_aborts() {
        let model = ou(-1e300, 0.0);
        let cfg = config(2, 1.0, 0.5, InitialCondition::Constant { point: vec![1e10] });
        let err = simulate(&model, &cfg, &SwitchingPath::constant(1.0, 0), 1).unwrap_err();
        assert!(matches!(err, DynamicsError::NonFiniteState { .. }), "{err:?}");
    }

    #[test]
    fn config_violations_are_collected() {
        let cfg = SimConfig {
            num_particles: 0,
            horizon: -1.0,
            dt: 0.0,
            initial: InitialCondition::Gaussian {
                mean: vec![0.0, 0.0],
                std: -1.0,
            },
            checkpoints: Checkpoints::Times(vec![0.5, 0.2]),
        };
        assert_eq!(cfg.violations(1).len(), 7);
    }
}
