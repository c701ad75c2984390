//! Bounded-Lipschitz distance `sup { ⟨μ-η, f⟩ : |f| ≤ 1, Lip(f) ≤ 1 }`
//! and related distances.
//!
//! For finitely supported measures the supremum only depends on the values
//! `f_k` at the combined support points, and any assignment with
//! `|f_k| ≤ 1`, `|f_k - f_l| ≤ |x_k - x_l|` extends to an admissible
//! function on `R^d`. The distance is therefore the value of a finite LP.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::simplex::{maximize, LpError};
use super::transport;
use super::{euclidean, EmpiricalMeasure, MeasureError};

/// Default bound on the combined support handled by the general LP.
pub const DEFAULT_EXACT_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlOptions {
    /// Largest combined support accepted by the exact solvers for d ≥ 2.
    pub cap: usize,
    /// Pair constraints added per lazy round.
    pub batch: usize,
    pub max_rounds: usize,
    pub max_pivots: usize,
}

impl Default for BlOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_EXACT_CAP,
            batch: 256,
            max_rounds: 200,
            max_pivots: 2_000_000,
        }
    }
}

/// Signed weight difference on the merged combined support.
struct SignedSupport {
    dim: usize,
    points: Vec<f64>,
    charge: Vec<f64>,
}

impl SignedSupport {
    fn new(mu: &EmpiricalMeasure, eta: &EmpiricalMeasure) -> Result<Self, MeasureError> {
        if mu.dim() != eta.dim() {
            return Err(MeasureError::DimensionMismatch(mu.dim(), eta.dim()));
        }
        let dim = mu.dim();
        let mut items: Vec<(&[f64], f64)> = mu
            .atoms()
            .zip(mu.weights())
            .map(|(x, &w)| (x, w))
            .chain(eta.atoms().zip(eta.weights()).map(|(x, &w)| (x, -w)))
            .collect();
        items.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        // positive and negative parts are summed separately so that equal
        // measures cancel exactly
        let mut points: Vec<f64> = Vec::new();
        let mut parts: Vec<(f64, f64)> = Vec::new();
        for (x, c) in items {
            if parts.is_empty() || &points[points.len() - dim..] != x {
                points.extend_from_slice(x);
                parts.push((0.0, 0.0));
            }
            let last = parts.last_mut().unwrap();
            if c >= 0.0 {
                last.0 += c;
            } else {
                last.1 -= c;
            }
        }
        Ok(Self {
            dim,
            points,
            charge: parts.into_iter().map(|(p, m)| p - m).collect(),
        })
    }

    fn len(&self) -> usize {
        self.charge.len()
    }

    fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }
}

/// Exact BL distance.
///
/// In one dimension the pair constraints reduce to neighbouring points and
/// the LP is solved by a chain recursion with no support cap. Otherwise the
/// dual transport problem with cost `min(|x - y|, 2)` is solved, subject to
/// `cap`.
pub fn bl_distance_exact(mu: &EmpiricalMeasure, eta: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    bl_distance_exact_with(mu, eta, &BlOptions::default())
}

pub fn bl_distance_exact_with(
    mu: &EmpiricalMeasure,
    eta: &EmpiricalMeasure,
    opts: &BlOptions,
) -> Result<f64, MeasureError> {
    let support = SignedSupport::new(mu, eta)?;
    if support.dim == 1 {
        return Ok(chain_bl(&support.points, &support.charge).clamp(0.0, 2.0));
    }
    let n = support.len();
    if n > opts.cap {
        return Err(MeasureError::SupportTooLarge { size: n, cap: opts.cap });
    }
    let sources: Vec<usize> = (0..n).filter(|&k| support.charge[k] > 0.0).collect();
    let sinks: Vec<usize> = (0..n).filter(|&k| support.charge[k] < 0.0).collect();
    let supply: Vec<f64> = sources.iter().map(|&k| support.charge[k]).collect();
    let demand: Vec<f64> = sinks.iter().map(|&k| -support.charge[k]).collect();
    let mut cost = Vec::with_capacity(sources.len() * sinks.len());
    for &k in &sources {
        for &l in &sinks {
            cost.push(euclidean(support.point(k), support.point(l)).min(2.0));
        }
    }
    Ok(transport::min_cost(&supply, &demand, &cost).clamp(0.0, 2.0))
}

/// Exact BL distance through the primal LP (dense simplex with lazily added
/// pair constraints), in any dimension. Intended for small supports; the
/// tableau grows with the number of active pair constraints.
pub fn bl_distance_lp(
    mu: &EmpiricalMeasure,
    eta: &EmpiricalMeasure,
    opts: &BlOptions,
) -> Result<f64, MeasureError> {
    let support = SignedSupport::new(mu, eta)?;
    lp_bl(&support, opts)
}

fn lp_bl(support: &SignedSupport, opts: &BlOptions) -> Result<f64, MeasureError> {
    let n = support.len();
    if n > opts.cap {
        return Err(MeasureError::SupportTooLarge { size: n, cap: opts.cap });
    }
    if n == 1 {
        return Ok(0.0);
    }
    let dist = |k: usize, l: usize| euclidean(support.point(k), support.point(l));

    // Initial pair set: all pairs for small supports, otherwise each point's
    // nearest neighbours. Violated pairs are added lazily.
    let mut active = vec![false; n * n];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut add_pair = |k: usize, l: usize, pairs: &mut Vec<(usize, usize)>| {
        let (a, b) = if k < l { (k, l) } else { (l, k) };
        if !active[a * n + b] {
            active[a * n + b] = true;
            pairs.push((a, b));
            true
        } else {
            false
        }
    };
    if n <= 12 {
        for k in 0..n {
            for l in k + 1..n {
                add_pair(k, l, &mut pairs);
            }
        }
    } else {
        let neighbours = ((n as f64).log2().ceil() as usize + 2).min(n - 1);
        for k in 0..n {
            let mut by_dist: Vec<(f64, usize)> =
                (0..n).filter(|&l| l != k).map(|l| (dist(k, l), l)).collect();
            by_dist.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(_, l) in by_dist.iter().take(neighbours) {
                add_pair(k, l, &mut pairs);
            }
        }
    }

    for _ in 0..opts.max_rounds {
        let f = solve_restricted(support, &pairs, &dist, opts)?;
        let mut violated: Vec<(f64, usize, usize)> = Vec::new();
        for k in 0..n {
            for l in k + 1..n {
                let excess = (f.1[k] - f.1[l]).abs() - dist(k, l);
                if excess > 1e-9 {
                    violated.push((excess, k, l));
                }
            }
        }
        if violated.is_empty() {
            return Ok(f.0.clamp(0.0, 2.0));
        }
        violated.sort_by(|a, b| b.0.total_cmp(&a.0));
        for &(_, k, l) in violated.iter().take(opts.batch) {
            add_pair(k, l, &mut pairs);
        }
    }
    Err(MeasureError::SolverStall(format!(
        "pair constraints still violated after {} rounds",
        opts.max_rounds
    )))
}

/// Solves the LP over the given pair set; returns (value, f).
fn solve_restricted(
    support: &SignedSupport,
    pairs: &[(usize, usize)],
    dist: &impl Fn(usize, usize) -> f64,
    opts: &BlOptions,
) -> Result<(f64, Vec<f64>), MeasureError> {
    // Shift g = f + 1 ∈ [0, 2]; Σ charge = 0 so the objective is unchanged.
    let n = support.len();
    let mut a = Vec::with_capacity(n + 2 * pairs.len());
    let mut b = Vec::with_capacity(a.capacity());
    for k in 0..n {
        let mut row = vec![0.0; n];
        row[k] = 1.0;
        a.push(row);
        b.push(2.0);
    }
    for &(k, l) in pairs {
        let d = dist(k, l);
        let mut row = vec![0.0; n];
        row[k] = 1.0;
        row[l] = -1.0;
        a.push(row);
        b.push(d);
        let mut row = vec![0.0; n];
        row[k] = -1.0;
        row[l] = 1.0;
        a.push(row);
        b.push(d);
    }
    let sol = maximize(&support.charge, &a, &b, opts.max_pivots).map_err(|e| match e {
        LpError::IterationLimit(p) => MeasureError::SolverStall(format!("{p} pivots")),
        other => MeasureError::SolverStall(other.to_string()),
    })?;
    let f = sol.x.iter().map(|g| g - 1.0).collect();
    let value = sol.value - support.charge.iter().sum::<f64>();
    Ok((value, f))
}

/// Piece of a concave piecewise-linear function; `slope` is stored relative
/// to the running offset.
#[derive(Debug, Clone, Copy)]
struct Piece {
    len: f64,
    slope: f64,
}

/// Exact 1-D LP value: `max Σ c_k f_k` with `|f_k| ≤ 1` and
/// `|f_{k+1} - f_k| ≤ x_{k+1} - x_k` for sorted distinct points.
///
/// Dynamic programming over the value function `V_k(v)`, the best partial
/// objective with `f_k = v`. Each `V_k` is concave piecewise linear on
/// `[-1, 1]`, held as pieces left (slope > 0) and right (slope ≤ 0) of
/// its maximizer.
fn chain_bl(points: &[f64], charge: &[f64]) -> f64 {
    let n = charge.len();
    let mut left: VecDeque<Piece> = VecDeque::new();
    let mut right: VecDeque<Piece> = VecDeque::new();
    let mut offset = 0.0;
    // value at v = -1
    let mut at_min = 0.0;

    let add_linear = |c: f64,
                      offset: &mut f64,
                      at_min: &mut f64,
                      left: &mut VecDeque<Piece>,
                      right: &mut VecDeque<Piece>| {
        *offset += c;
        *at_min -= c;
        if c > 0.0 {
            while let Some(p) = right.front() {
                if p.slope + *offset > 0.0 {
                    left.push_back(right.pop_front().unwrap());
                } else {
                    break;
                }
            }
        } else if c < 0.0 {
            while let Some(p) = left.back() {
                if p.slope + *offset <= 0.0 {
                    right.push_front(left.pop_back().unwrap());
                } else {
                    break;
                }
            }
        }
    };

    right.push_back(Piece { len: 2.0, slope: 0.0 });
    add_linear(charge[0], &mut offset, &mut at_min, &mut left, &mut right);

    for k in 1..n {
        let gap = points[k] - points[k - 1];
        // sup-convolution with the window [-gap, gap]: a flat piece of
        // length 2*gap at the maximizer, then trim gap from both ends
        right.push_front(Piece {
            len: 2.0 * gap,
            slope: -offset,
        });
        let mut to_trim = gap;
        while to_trim > 0.0 {
            let from_left = !left.is_empty();
            let p = if from_left {
                left.front_mut().unwrap()
            } else {
                right.front_mut().unwrap()
            };
            let take = p.len.min(to_trim);
            at_min += (p.slope + offset) * take;
            p.len -= take;
            to_trim -= take;
            if p.len <= 0.0 {
                if from_left {
                    left.pop_front();
                } else {
                    right.pop_front();
                }
            }
            if left.is_empty() && right.is_empty() {
                break;
            }
        }
        let mut to_trim = gap;
        while to_trim > 0.0 {
            let from_right = !right.is_empty();
            let p = if from_right {
                right.back_mut().unwrap()
            } else {
                left.back_mut().unwrap()
            };
            let take = p.len.min(to_trim);
            p.len -= take;
            to_trim -= take;
            if p.len <= 0.0 {
                if from_right {
                    right.pop_back();
                } else {
                    left.pop_back();
                }
            }
            if left.is_empty() && right.is_empty() {
                break;
            }
        }
        add_linear(charge[k], &mut offset, &mut at_min, &mut left, &mut right);
    }

    at_min
        + left
            .iter()
            .map(|p| (p.slope + offset) * p.len)
            .sum::<f64>()
}

/// `f(x) = clamp(slope * (u·x - offset), -1, 1)`, an admissible test function
/// whenever `|u| = 1` and `0 < slope ≤ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeFunction {
    pub direction: Vec<f64>,
    pub offset: f64,
    pub slope: f64,
}

impl RidgeFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let proj: f64 = self.direction.iter().zip(x).map(|(u, v)| u * v).sum();
        (self.slope * (proj - self.offset)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlApprox {
    /// Certified lower bound on the BL distance.
    pub value: f64,
    pub certificate: Option<RidgeFunction>,
}

/// Lower bound on the BL distance by maximizing over `budget` random ridge
/// functions. Candidates are drawn from a stream fixed by `seed`, so a
/// larger budget evaluates a superset of candidates.
pub fn bl_distance_approx(
    mu: &EmpiricalMeasure,
    eta: &EmpiricalMeasure,
    budget: usize,
    seed: u64,
) -> Result<BlApprox, MeasureError> {
    let support = SignedSupport::new(mu, eta)?;
    let dim = support.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = BlApprox {
        value: 0.0,
        certificate: None,
    };
    let n = support.len();
    for _ in 0..budget {
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        u.iter_mut().for_each(|v| *v /= norm);
        let anchor = rng.random_range(0..n);
        let shift: f64 = rng.random_range(-1.0..1.0);
        let slope: f64 = 1.0 - rng.random::<f64>() * 0.75;
        let proj = |x: &[f64]| u.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let candidate = RidgeFunction {
            offset: proj(support.point(anchor)) + shift,
            direction: u.clone(),
            slope,
        };
        let value: f64 = (0..n)
            .map(|k| support.charge[k] * candidate.eval(support.point(k)))
            .sum::<f64>()
            .abs();
        if value > best.value {
            best = BlApprox {
                value,
                certificate: Some(candidate),
            };
        }
    }
    Ok(best)
}

/// Exact `W_1` between two measures on the line: `∫ |F_μ - F_η| dx`.
pub fn wasserstein1_1d(mu: &EmpiricalMeasure, eta: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if mu.dim() != 1 {
        return Err(MeasureError::DimensionNotOne(mu.dim()));
    }
    if eta.dim() != 1 {
        return Err(MeasureError::DimensionNotOne(eta.dim()));
    }
    let support = SignedSupport::new(mu, eta)?;
    let mut cdf_diff = 0.0;
    let mut total = 0.0;
    for k in 0..support.len() - 1 {
        cdf_diff += support.charge[k];
        total += cdf_diff.abs() * (support.points[k + 1] - support.points[k]);
    }
    Ok(total)
}

/// `d((μ, i), (η, j)) = ‖μ - η‖_BL + 1(i ≠ j)`.
pub fn product_metric_d(
    a: (&EmpiricalMeasure, usize),
    b: (&EmpiricalMeasure, usize),
) -> Result<f64, MeasureError> {
    let bl = bl_distance_exact(a.0, b.0)?;
    Ok(bl + if a.1 == b.1 { 0.0 } else { 1.0 })
}
