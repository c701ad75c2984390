//! Finitely supported probability measures on `R^d` and distances between them.

mod bl;
mod simplex;
mod test_function;
mod transport;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bl::{
    bl_distance_approx, bl_distance_exact, bl_distance_exact_with, bl_distance_lp, product_metric_d,
    wasserstein1_1d, BlApprox, BlOptions, RidgeFunction, DEFAULT_EXACT_CAP,
};
pub use simplex::{maximize, LpError, LpSolution};
pub use test_function::TestFunction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("non-finite value")]
    NonFiniteValue,
    #[error("combined support {size} exceeds exact-solver cap {cap}; use bl_distance_approx")]
    SupportTooLarge { size: usize, cap: usize },
    #[error("LP did not reach an optimality certificate: {0}")]
    SolverStall(String),
    #[error("operation requires d = 1, got d = {0}")]
    DimensionNotOne(usize),
    #[error("malformed measure CSV: {0}")]
    Csv(String),
}

/// Weight-sum tolerance.
pub const WEIGHT_TOL: f64 = 1e-12;

/// A probability measure `Σ_k w_k δ_{x_k}` on `R^d`.
///
/// Atoms are stored flat, row-major: atom `k` is `atoms[k*d .. (k+1)*d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

/// Which of the two moment functions to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentKind {
    /// `φ(x) = |x|`
    Phi,
    /// `ψ(x) = |x|²`
    Psi,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || weights.is_empty() {
            return Err(MeasureError::Empty);
        }
        if atoms.len() != dim * weights.len() {
            return Err(MeasureError::DimensionMismatch(atoms.len(), dim * weights.len()));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFiniteValue);
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(MeasureError::InvalidWeights("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL * weights.len().max(1) as f64 {
            return Err(MeasureError::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(Self {
            dim,
            atoms,
            weights,
        })
    }

    /// Uniform measure `(1/n) Σ δ_{x_k}` with weights exactly `1/n`.
    pub fn uniform(dim: usize, atoms: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        if atoms.len() % dim != 0 {
            return Err(MeasureError::DimensionMismatch(atoms.len(), dim));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFiniteValue);
        }
        let n = atoms.len() / dim;
        Ok(Self {
            dim,
            atoms,
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self::uniform(point.len(), point.to_vec()).expect("finite point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.dim..(k + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `⟨μ, f⟩ = Σ w_k f(x_k)`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64, MeasureError> {
        let mut acc = 0.0;
        for (x, &w) in self.atoms().zip(&self.weights) {
            let v = f(x);
            if !v.is_finite() {
                return Err(MeasureError::NonFiniteValue);
            }
            acc += w * v;
        }
        Ok(acc)
    }

    pub fn moment(&self, kind: MomentKind) -> f64 {
        self.atoms()
            .zip(&self.weights)
            .map(|(x, &w)| {
                let sq: f64 = x.iter().map(|v| v * v).sum();
                w * match kind {
                    MomentKind::Phi => sq.sqrt(),
                    MomentKind::Psi => sq,
                }
            })
            .sum()
    }

    /// Weighted mean vector.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, &w) in self.atoms().zip(&self.weights) {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Sorted copy with coincident atoms merged (weights summed).
    pub fn merged(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.atom(a)
                .iter()
                .zip(self.atom(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut atoms: Vec<f64> = Vec::with_capacity(self.atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(self.len());
        for k in idx {
            let x = self.atom(k);
            let dup = !weights.is_empty() && &atoms[atoms.len() - self.dim..] == x;
            if dup {
                *weights.last_mut().unwrap() += self.weights[k];
            } else {
                atoms.extend_from_slice(x);
                weights.push(self.weights[k]);
            }
        }
        Self {
            dim: self.dim,
            atoms,
            weights,
        }
    }

    /// One row per atom: `weight,x_1,…,x_d`, full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("weight");
        for i in 0..self.dim {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (x, w) in self.atoms().zip(&self.weights) {
            let _ = write!(out, "{w:?}");
            for v in x {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`EmpiricalMeasure::to_csv`]; a header row is optional.
    pub fn from_csv(text: &str) -> Result<Self, MeasureError> {
        let mut dim = None;
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            let Ok(values) = parsed else {
                if lineno == 0 {
                    continue;
                }
                return Err(MeasureError::Csv(format!("line {}: not numeric", lineno + 1)));
            };
            if values.len() < 2 {
                return Err(MeasureError::Csv(format!(
                    "line {}: need weight and at least one coordinate",
                    lineno + 1
                )));
            }
            let d = values.len() - 1;
            if *dim.get_or_insert(d) != d {
                return Err(MeasureError::Csv(format!(
                    "line {}: expected {} coordinates",
                    lineno + 1,
                    dim.unwrap()
                )));
            }
            weights.push(values[0]);
            atoms.extend_from_slice(&values[1..]);
        }
        let dim = dim.ok_or(MeasureError::Empty)?;
        Self::new(dim, atoms, weights)
    }
}

/// `⟨μ, f⟩`; see [`EmpiricalMeasure::integrate`].
pub fn integrate(mu: &EmpiricalMeasure, f: impl Fn(&[f64]) -> f64) -> Result<f64, MeasureError> {
    mu.integrate(f)
}

pub fn moment(mu: &EmpiricalMeasure, kind: MomentKind) -> f64 {
    mu.moment(kind)
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn integrate_examples() {
        let mu = EmpiricalMeasure::uniform(2, vec![0.3, 1.0, -2.0, 4.0, 7.0, 7.0]).unwrap();
        assert_abs_diff_eq!(mu.integrate(|_| 1.0).unwrap(), 1.0, epsilon = 1e-15);

        let mu = EmpiricalMeasure::uniform(1, vec![0.0, 2.0]).unwrap();
        assert_eq!(mu.integrate(|x| x[0] * x[0]).unwrap(), 2.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let pts: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mu = EmpiricalMeasure::uniform(1, pts).unwrap();
        let v = mu.integrate(|x| x[0] * x[0]).unwrap();
        assert!((v - 1.0).abs() <= 4.0 / (n as f64).sqrt(), "{v}");

        assert_eq!(
            mu.integrate(|x| 1.0 / (x[0] - x[0])),
            Err(MeasureError::NonFiniteValue)
        );
    }

    #[test]
    fn moment_examples() {
        let d0 = EmpiricalMeasure::dirac(&[0.0]);
        assert_eq!(d0.moment(MomentKind::Phi), 0.0);
        assert_eq!(d0.moment(MomentKind::Psi), 0.0);
        let pm = EmpiricalMeasure::uniform(1, vec![-1.0, 1.0]).unwrap();
        assert_eq!(pm.moment(MomentKind::Phi), 1.0);
        assert_eq!(pm.moment(MomentKind::Psi), 1.0);
        let p = EmpiricalMeasure::dirac(&[3.0, 4.0]);
        assert_eq!(p.moment(MomentKind::Phi), 5.0);
        assert_eq!(p.moment(MomentKind::Psi), 25.0);
    }

    #[test]
    fn uniform_weights_are_exact() {
        let mu = EmpiricalMeasure::uniform(1, vec![0.0; 7]).unwrap();
        assert!(mu.weights().iter().all(|&w| w == 1.0 / 7.0));
    }

    #[test]
    fn construction_errors() {
        assert_eq!(
            EmpiricalMeasure::new(1, vec![0.0], vec![0.5]),
            Err(MeasureError::InvalidWeights("weights sum to 0.5".into()))
        );
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![1.5, -0.5]).is_err());
        assert_eq!(
            EmpiricalMeasure::uniform(1, vec![]),
            Err(MeasureError::Empty)
        );
        assert_eq!(
            EmpiricalMeasure::uniform(1, vec![f64::INFINITY]),
            Err(MeasureError::NonFiniteValue)
        );
    }

    #[test]
    fn merge_sums_duplicate_weights() {
        let mu = EmpiricalMeasure::uniform(1, vec![2.0, 1.0, 2.0, 2.0]).unwrap();
        let m = mu.merged();
        assert_eq!(m.atoms_flat(), &[1.0, 2.0]);
        assert_eq!(m.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn csv_round_trip() {
        let mu = EmpiricalMeasure::new(2, vec![0.1, 1.0 / 3.0, -2.5, 1e-300], vec![0.3, 0.7])
            .unwrap();
        let back = EmpiricalMeasure::from_csv(&mu.to_csv()).unwrap();
        assert_eq!(back, mu);
        assert!(EmpiricalMeasure::from_csv("weight,x0\n1.0,a\n").is_err());
    }
}
