use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::measure::EmpiricalMeasure;

/// Read-only view of the measure argument of the coefficients.
///
/// Built once per integrator step from the current positions; the mean is
/// cached because most models only need it.
#[derive(Debug, Clone)]
pub struct MeasureContext<'a> {
    dim: usize,
    atoms: &'a [f64],
    weights: Option<&'a [f64]>,
    mean: Vec<f64>,
}

impl<'a> MeasureContext<'a> {
    /// Uniform measure on the given flat positions.
    pub fn uniform(dim: usize, atoms: &'a [f64]) -> Self {
        let n = atoms.len() / dim;
        let mut mean = vec![0.0; dim];
        for x in atoms.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Self {
            dim,
            atoms,
            weights: None,
            mean,
        }
    }

    pub fn from_measure(mu: &'a EmpiricalMeasure) -> Self {
        Self {
            dim: mu.dim(),
            atoms: mu.atoms_flat(),
            weights: Some(mu.weights()),
            mean: mu.mean(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weight(&self, k: usize) -> f64 {
        match self.weights {
            Some(w) => w[k],
            None => 1.0 / self.len() as f64,
        }
    }

    /// `⟨μ, g⟩`
    pub fn integrate(&self, mut g: impl FnMut(&[f64]) -> f64) -> f64 {
        (0..self.len()).map(|k| self.weight(k) * g(self.atom(k))).sum()
    }
}

/// Coefficients `b(x, μ, i)` and `σ(x, μ, i)` of the switched mean-field SDE.
///
/// `drift` writes a `d`-vector, `diffusion` a row-major `d × d` matrix.
pub trait CoefficientModel: Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn num_regimes(&self) -> usize;
    fn drift(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]);
    fn diffusion(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]);
    /// Declared `L` in `|b(x,μ,i) - b(y,η,i)| ≤ L(|x - y| + ‖μ - η‖_BL)`.
    fn lipschitz_constant(&self) -> f64;
    /// Declared `C` in `|b(x,μ,i)| ≤ C(1 + |x| + ⟨μ,φ⟩)`.
    fn growth_constant(&self) -> f64;
    /// Declared bound on the Frobenius norm of `σ`.
    fn diffusion_bound(&self) -> f64;

    /// `a = σσ'`, row-major.
    fn diffusion_squared(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        self.diffusion(x, mu, regime, &mut s);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| s[i * d + k] * s[j * d + k]).sum();
            }
        }
    }
}

/// Built-in coefficient models.
///
/// Per-regime parameters are indexed by regime; `σ` is always `s_i I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BuiltinModel {
    /// `b = a_i (mean(μ) - x) + c_i 𝟙`
    MeanRevertingSwitch {
        dim: usize,
        a: Vec<f64>,
        c: Vec<f64>,
        s: Vec<f64>,
    },
    /// `b = k_i ⟨μ, arctan(· - x)⟩` componentwise.
    KernelInteraction {
        dim: usize,
        k: Vec<f64>,
        s: Vec<f64>,
    },
    /// `b = -a_i x + c_i 𝟙`, no interaction.
    OrnsteinUhlenbeck {
        dim: usize,
        a: Vec<f64>,
        c: Vec<f64>,
        s: Vec<f64>,
    },
}

impl BuiltinModel {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MeanRevertingSwitch { .. } => "mean-reverting-switch",
            Self::KernelInteraction { .. } => "kernel-interaction",
            Self::OrnsteinUhlenbeck { .. } => "ornstein-uhlenbeck",
        }
    }

    /// Parameter problems, empty when the model is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (dim, lists): (usize, Vec<(&str, &Vec<f64>)>) = match self {
            Self::MeanRevertingSwitch { dim, a, c, s } | Self::OrnsteinUhlenbeck { dim, a, c, s } => {
                (*dim, vec![("a", a), ("c", c), ("s", s)])
            }
            Self::KernelInteraction { dim, k, s } => (*dim, vec![("k", k), ("s", s)]),
        };
        if dim == 0 {
            out.push("dim must be at least 1".into());
        }
        let m = lists[0].1.len();
        if m == 0 {
            out.push(format!("{} must list at least one regime", lists[0].0));
        }
        for (name, v) in &lists {
            if v.len() != m {
                out.push(format!(
                    "{name} has {} entries but {} has {m}",
                    v.len(),
                    lists[0].0
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                out.push(format!("{name} has non-finite entries"));
            }
        }
        if let Self::MeanRevertingSwitch { a, .. } | Self::OrnsteinUhlenbeck { a, .. } = self {
            if a.iter().any(|&x| x < 0.0) {
                out.push("a must be nonnegative".into());
            }
        }
        out
    }

    fn diffusion_scale(&self, regime: usize) -> f64 {
        match self {
            Self::MeanRevertingSwitch { s, .. }
            | Self::KernelInteraction { s, .. }
            | Self::OrnsteinUhlenbeck { s, .. } => s[regime],
        }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl CoefficientModel for BuiltinModel {
    fn dim(&self) -> usize {
        match self {
            Self::MeanRevertingSwitch { dim, .. }
            | Self::KernelInteraction { dim, .. }
            | Self::OrnsteinUhlenbeck { dim, .. } => *dim,
        }
    }

    fn num_regimes(&self) -> usize {
        match self {
            Self::MeanRevertingSwitch { a, .. } | Self::OrnsteinUhlenbeck { a, .. } => a.len(),
            Self::KernelInteraction { k, .. } => k.len(),
        }
    }

    fn drift(&self, x: &[f64], mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        match self {
            Self::MeanRevertingSwitch { a, c, .. } => {
                let (a, c) = (a[regime], c[regime]);
                for ((o, xi), m) in out.iter_mut().zip(x).zip(mu.mean()) {
                    *o = a * (m - xi) + c;
                }
            }
            Self::KernelInteraction { k, .. } => {
                let k = k[regime];
                out.fill(0.0);
                for j in 0..mu.len() {
                    let w = mu.weight(j);
                    for ((o, xi), yj) in out.iter_mut().zip(x).zip(mu.atom(j)) {
                        *o += w * (yj - xi).atan();
                    }
                }
                out.iter_mut().for_each(|o| *o *= k);
            }
            Self::OrnsteinUhlenbeck { a, c, .. } => {
                let (a, c) = (a[regime], c[regime]);
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -a * xi + c;
                }
            }
        }
    }

    fn diffusion(&self, _x: &[f64], _mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.dim();
        let s = self.diffusion_scale(regime);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = s;
        }
    }

    fn lipschitz_constant(&self) -> f64 {
        match self {
            // the mean is only locally BL-Lipschitz; `a` bounds the x-dependence
            Self::MeanRevertingSwitch { a, .. } | Self::OrnsteinUhlenbeck { a, .. } => max_abs(a),
            // |∂_x atan| ≤ 1 and atan(y - x) is bounded by π/2 and 1-Lipschitz in y
            Self::KernelInteraction { k, dim, .. } => {
                max_abs(k) * (*dim as f64).sqrt() * std::f64::consts::FRAC_PI_2.max(1.0)
            }
        }
    }

    fn growth_constant(&self) -> f64 {
        let root_d = (self.dim() as f64).sqrt();
        match self {
            Self::MeanRevertingSwitch { a, c, .. } | Self::OrnsteinUhlenbeck { a, c, .. } => {
                max_abs(a).max(max_abs(c) * root_d)
            }
            Self::KernelInteraction { k, .. } => max_abs(k) * root_d * std::f64::consts::FRAC_PI_2,
        }
    }

    fn diffusion_bound(&self) -> f64 {
        let s = match self {
            Self::MeanRevertingSwitch { s, .. }
            | Self::KernelInteraction { s, .. }
            | Self::OrnsteinUhlenbeck { s, .. } => max_abs(s),
        };
        s * (self.dim() as f64).sqrt()
    }

    fn diffusion_squared(&self, _x: &[f64], _mu: &MeasureContext<'_>, regime: usize, out: &mut [f64]) {
        let d = self.dim();
        let s = self.diffusion_scale(regime);
        out.fill(0.0);
        for i in 0..d {
            out[i * d + i] = s * s;
        }
    }
}
