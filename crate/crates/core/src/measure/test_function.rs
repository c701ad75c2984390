use serde::{Deserialize, Serialize};

/// Smooth test functions `f(x, i)` with analytic gradient and Hessian.
///
/// Gradients and Hessians are written into caller-provided buffers of
/// length `d` and `d*d` (row-major); the buffers are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TestFunction {
    Constant {
        value: f64,
    },
    /// `u · x`
    Linear {
        coefficients: Vec<f64>,
    },
    /// `ψ(x) = |x|²`
    SquaredNorm,
    /// `A exp(1 - 1/(1 - |x-c|²/R²))` inside the ball of radius `R`, zero outside.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
    /// A different function in each regime: `f(x, i) = f_i(x)`.
    PerRegime {
        functions: Vec<TestFunction>,
    },
    /// `Σ_k a_k f_k`
    Combination {
        terms: Vec<(f64, TestFunction)>,
    },
}

impl TestFunction {
    pub fn id(&self) -> String {
        match self {
            Self::Constant { value } => format!("const({value})"),
            Self::Linear { coefficients } => format!("linear({coefficients:?})"),
            Self::SquaredNorm => "psi".into(),
            Self::Bump {
                center,
                radius,
                amplitude,
            } => format!("bump(c={center:?},r={radius},a={amplitude})"),
            Self::PerRegime { functions } => format!(
                "per-regime[{}]",
                functions.iter().map(Self::id).collect::<Vec<_>>().join(";")
            ),
            Self::Combination { terms } => terms
                .iter()
                .map(|(a, f)| format!("{a}*{}", f.id()))
                .collect::<Vec<_>>()
                .join("+"),
        }
    }

    pub fn value(&self, x: &[f64], regime: usize) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Linear { coefficients } => coefficients.iter().zip(x).map(|(a, b)| a * b).sum(),
            Self::SquaredNorm => x.iter().map(|v| v * v).sum(),
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                let u = 1.0 - sq_dist(x, center) / (radius * radius);
                if u <= 0.0 {
                    0.0
                } else {
                    amplitude * (1.0 - 1.0 / u).exp()
                }
            }
            Self::PerRegime { functions } => functions[regime % functions.len()].value(x, regime),
            Self::Combination { terms } => terms.iter().map(|(a, f)| a * f.value(x, regime)).sum(),
        }
    }

    pub fn gradient(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        let d = x.len();
        match self {
            Self::Constant { .. } => out[..d].fill(0.0),
            Self::Linear { coefficients } => out[..d].copy_from_slice(&coefficients[..d]),
            Self::SquaredNorm => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = 2.0 * v;
                }
            }
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                let r2 = radius * radius;
                let u = 1.0 - sq_dist(x, center) / r2;
                if u <= 0.0 {
                    out[..d].fill(0.0);
                    return;
                }
                let f = amplitude * (1.0 - 1.0 / u).exp();
                // df/d(r²) = -f/u², d(r²)/dx = 2(x-c)/R²
                let g = -f / (u * u);
                for k in 0..d {
                    out[k] = g * 2.0 * (x[k] - center[k]) / r2;
                }
            }
            Self::PerRegime { functions } => {
                functions[regime % functions.len()].gradient(x, regime, out)
            }
            Self::Combination { terms } => {
                out[..d].fill(0.0);
                let mut tmp = vec![0.0; d];
                for (a, f) in terms {
                    f.gradient(x, regime, &mut tmp);
                    for k in 0..d {
                        out[k] += a * tmp[k];
                    }
                }
            }
        }
    }

    pub fn hessian(&self, x: &[f64], regime: usize, out: &mut [f64]) {
        let d = x.len();
        match self {
            Self::Constant { .. } | Self::Linear { .. } => out[..d * d].fill(0.0),
            Self::SquaredNorm => {
                out[..d * d].fill(0.0);
                for k in 0..d {
                    out[k * d + k] = 2.0;
                }
            }
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                out[..d * d].fill(0.0);
                let r2 = radius * radius;
                let u = 1.0 - sq_dist(x, center) / r2;
                if u <= 0.0 {
                    return;
                }
                let f = amplitude * (1.0 - 1.0 / u).exp();
                let g = -f / (u * u);
                // d²f/d(r²)² = f/u⁴ - 2f/u³
                let g2 = f / u.powi(4) - 2.0 * f / u.powi(3);
                for a in 0..d {
                    let ya = 2.0 * (x[a] - center[a]) / r2;
                    for b in 0..d {
                        let yb = 2.0 * (x[b] - center[b]) / r2;
                        out[a * d + b] = g2 * ya * yb;
                    }
                    out[a * d + a] += g * 2.0 / r2;
                }
            }
            Self::PerRegime { functions } => {
                functions[regime % functions.len()].hessian(x, regime, out)
            }
            Self::Combination { terms } => {
                out[..d * d].fill(0.0);
                let mut tmp = vec![0.0; d * d];
                for (a, f) in terms {
                    f.hessian(x, regime, &mut tmp);
                    for k in 0..d * d {
                        out[k] += a * tmp[k];
                    }
                }
            }
        }
    }

    /// Value, gradient and Hessian together; the bump's exponential is
    /// evaluated once.
    pub fn jet(&self, x: &[f64], regime: usize, grad: &mut [f64], hess: &mut [f64]) -> f64 {
        match self {
            Self::Bump {
                center,
                radius,
                amplitude,
            } => {
                let d = x.len();
                let r2 = radius * radius;
                let u = 1.0 - sq_dist(x, center) / r2;
                grad[..d].fill(0.0);
                hess[..d * d].fill(0.0);
                if u <= 0.0 {
                    return 0.0;
                }
                let f = amplitude * (1.0 - 1.0 / u).exp();
                let g = -f / (u * u);
                let g2 = f / u.powi(4) - 2.0 * f / u.powi(3);
                for a in 0..d {
                    let ya = 2.0 * (x[a] - center[a]) / r2;
                    grad[a] = g * ya;
                    for b in 0..d {
                        hess[a * d + b] = g2 * ya * 2.0 * (x[b] - center[b]) / r2;
                    }
                    hess[a * d + a] += g * 2.0 / r2;
                }
                f
            }
            Self::PerRegime { functions } => {
                functions[regime % functions.len()].jet(x, regime, grad, hess)
            }
            _ => {
                self.gradient(x, regime, grad);
                self.hessian(x, regime, hess);
                self.value(x, regime)
            }
        }
    }

    /// Declared sup norm, when finite.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Self::Constant { value } => Some(value.abs()),
            Self::Linear { coefficients } if coefficients.iter().all(|&c| c == 0.0) => Some(0.0),
            Self::Linear { .. } | Self::SquaredNorm => None,
            Self::Bump { amplitude, .. } => Some(amplitude.abs()),
            Self::PerRegime { functions } => functions
                .iter()
                .map(Self::bound)
                .try_fold(0.0, |acc, b| b.map(|b| f64::max(acc, b))),
            Self::Combination { terms } => terms
                .iter()
                .map(|(a, f)| f.bound().map(|b| a.abs() * b))
                .sum(),
        }
    }

    /// Declared Lipschitz constant in `x`, when finite.
    pub fn lipschitz(&self) -> Option<f64> {
        match self {
            Self::Constant { .. } => Some(0.0),
            Self::Linear { coefficients } => {
                Some(coefficients.iter().map(|c| c * c).sum::<f64>().sqrt())
            }
            Self::SquaredNorm => None,
            // sup of 2s e^{1-1/u}/u² over s = |x-c|/R in (0,1), u = 1 - s²
            Self::Bump {
                radius, amplitude, ..
            } => Some(amplitude.abs() * BUMP_GRADIENT_FACTOR / radius),
            Self::PerRegime { functions } => functions
                .iter()
                .map(Self::lipschitz)
                .try_fold(0.0, |acc, b| b.map(|b| f64::max(acc, b))),
            Self::Combination { terms } => terms
                .iter()
                .map(|(a, f)| f.lipschitz().map(|b| a.abs() * b))
                .sum(),
        }
    }

    /// Whether `f(·, i)` is the same function for every regime.
    pub fn is_regime_independent(&self) -> bool {
        match self {
            Self::PerRegime { functions } => functions.windows(2).all(|w| w[0] == w[1]),
            Self::Combination { terms } => terms.iter().all(|(_, f)| f.is_regime_independent()),
            _ => true,
        }
    }
}

const BUMP_GRADIENT_FACTOR: f64 = 2.1704;

fn sq_dist(x: &[f64], c: &[f64]) -> f64 {
    x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
}
