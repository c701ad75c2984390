use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ChainError;

/// Row-sum tolerance applied after construction.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Per-entry residual allowed for `ν Q = 0`.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

/// Generator of a finite-state, time-homogeneous continuous-time Markov chain.
///
/// States are the indices `0..m`. Off-diagonal entries are nonnegative
/// jump rates; the diagonal is always recomputed as the negative
/// off-diagonal row sum, so every stored row sums to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct GeneratorMatrix {
    rates: DMatrix<f64>,
}

impl GeneratorMatrix {
    /// Validates a square matrix of rates and normalizes its diagonal.
    pub fn new(rates: DMatrix<f64>) -> Result<Self, ChainError> {
        let (n, m) = rates.shape();
        if n != m || n == 0 {
            return Err(ChainError::NonSquare { rows: n, cols: m });
        }
        if rates.iter().any(|v| !v.is_finite()) {
            return Err(ChainError::NonFiniteEntry);
        }
        let mut rates = rates;
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = rates[(i, j)];
                if q < 0.0 {
                    return Err(ChainError::NegativeOffDiagonal(i, j));
                }
                off += q;
            }
            rates[(i, i)] = -off;
        }
        Ok(Self { rates })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ChainError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) || n == 0 {
            let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
            return Err(ChainError::NonSquare { rows: n, cols });
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    /// The zero generator on `m` states (every state absorbing).
    pub fn zero(m: usize) -> Self {
        Self {
            rates: DMatrix::zeros(m, m),
        }
    }

    pub fn size(&self) -> usize {
        self.rates.nrows()
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[(from, to)]
    }

    /// Total exit rate `-q_ii`.
    pub fn exit_rate(&self, state: usize) -> f64 {
        -self.rates[(state, state)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.size())
            .map(|i| self.rates.row(i).iter().copied().collect())
            .collect()
    }

    /// Largest absolute row sum; zero up to rounding for a valid generator.
    pub fn max_row_sum(&self) -> f64 {
        (0..self.size())
            .map(|i| self.rates.row(i).sum().abs())
            .fold(0.0, f64::max)
    }

    /// Whether every state can reach every other state through positive rates.
    pub fn is_irreducible(&self) -> bool {
        let n = self.size();
        let reach_all = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let q = if forward {
                        self.rates[(i, j)]
                    } else {
                        self.rates[(j, i)]
                    };
                    if i != j && q > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.iter().all(|&s| s)
        };
        reach_all(true) && reach_all(false)
    }

    /// Applies the generator to a state-indexed function: `(Q g)(i) = Σ_j q_ij (g_j - g_i)`.
    pub fn apply(&self, state: usize, values: &[f64]) -> f64 {
        let gi = values[state];
        (0..self.size())
            .filter(|&j| j != state)
            .map(|j| self.rates[(state, j)] * (values[j] - gi))
            .sum()
    }
}

impl TryFrom<Vec<Vec<f64>>> for GeneratorMatrix {
    type Error = ChainError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::from_rows(&rows)
    }
}

impl From<GeneratorMatrix> for Vec<Vec<f64>> {
    fn from(q: GeneratorMatrix) -> Self {
        q.to_rows()
    }
}

/// Validates a rate matrix; see [`GeneratorMatrix::new`].
pub fn validate_generator(rates: &[Vec<f64>]) -> Result<GeneratorMatrix, ChainError> {
    GeneratorMatrix::from_rows(rates)
}

/// Stationary distribution `ν` with `ν Q = 0`, `Σ ν = 1`.
///
/// Solves the augmented system `[Q' ; 1'] ν' = [0 ; 1]` densely. The
/// solution is rejected as non-unique when the null space of `Q'` has
/// dimension greater than one.
pub fn stationary_distribution(q: &GeneratorMatrix) -> Result<Vec<f64>, ChainError> {
    let m = q.size();
    let qm = q.matrix();
    let scale = qm.amax().max(1.0);

    let sv = qm.clone().svd(false, false).singular_values;
    let rank_tol = 1e-10 * scale * m as f64;
    let nullity = sv.iter().filter(|&&s| s <= rank_tol).count();
    if nullity > 1 {
        return Err(ChainError::NotUnique { nullity });
    }

    let mut aug = DMatrix::zeros(m + 1, m);
    for i in 0..m {
        for j in 0..m {
            aug[(i, j)] = qm[(j, i)];
        }
    }
    for j in 0..m {
        aug[(m, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;

    let sol = aug
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|_| ChainError::NotUnique { nullity })?;

    let mut nu: Vec<f64> = sol.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
    let total: f64 = nu.iter().sum();
    for v in &mut nu {
        *v /= total;
    }

    let resid = stationary_residual(q, &nu);
    if resid > SOLVE_RESIDUAL_TOL * scale {
        return Err(ChainError::ResidualTooLarge(resid));
    }
    Ok(nu)
}

/// Largest entry of `|ν Q|`.
pub fn stationary_residual(q: &GeneratorMatrix, nu: &[f64]) -> f64 {
    let m = q.size();
    (0..m)
        .map(|j| (0..m).map(|i| nu[i] * q.rate(i, j)).sum::<f64>().abs())
        .fold(0.0, f64::max)
}

/// Transition matrix `P(t) = exp(Q t)` by scaling and squaring of a Taylor series.
pub fn transition_matrix(q: &GeneratorMatrix, t: f64) -> Result<DMatrix<f64>, ChainError> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(ChainError::NegativeTime(t));
    }
    let m = q.size();
    let a = q.matrix() * t;
    let norm = (0..m)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0u32;
    let mut scaled_norm = norm;
    while scaled_norm > 0.25 {
        scaled_norm /= 2.0;
        squarings += 1;
    }
    let a = a / 2f64.powi(squarings as i32);

    let mut result = DMatrix::identity(m, m);
    let mut term = DMatrix::identity(m, m);
    for k in 1..=30 {
        term = &term * &a / k as f64;
        result += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}
