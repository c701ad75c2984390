//! Dense tableau simplex for `max c'x  s.t.  A x ≤ b, x ≥ 0` with `b ≥ 0`.
//!
//! The slack basis is feasible at the origin, so no phase one is needed.
//! Pivoting follows Bland's rule, which cannot cycle.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("right-hand side must be nonnegative (row {0})")]
    NegativeRhs(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("objective is unbounded")]
    Unbounded,
    #[error("no optimality certificate after {0} pivots")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub value: f64,
    pub x: Vec<f64>,
    pub pivots: usize,
}

const PIVOT_TOL: f64 = 1e-11;

/// Solves `max c'x` subject to dense rows `a[i] · x ≤ b[i]`, `x ≥ 0`.
pub fn maximize(
    c: &[f64],
    a: &[Vec<f64>],
    b: &[f64],
    max_pivots: usize,
) -> Result<LpSolution, LpError> {
    let n = c.len();
    let m = a.len();
    if b.len() != m {
        return Err(LpError::Shape(format!("{m} rows but {} bounds", b.len())));
    }
    if let Some(i) = b.iter().position(|&v| v < 0.0) {
        return Err(LpError::NegativeRhs(i));
    }
    if let Some(i) = a.iter().position(|r| r.len() != n) {
        return Err(LpError::Shape(format!("row {i} has wrong length")));
    }

    // columns: n structural, m slack, 1 rhs
    let width = n + m + 1;
    let mut t = vec![0.0; (m + 1) * width];
    for i in 0..m {
        let row = &mut t[i * width..(i + 1) * width];
        row[..n].copy_from_slice(&a[i]);
        row[n + i] = 1.0;
        row[width - 1] = b[i];
    }
    {
        let obj = &mut t[m * width..];
        for j in 0..n {
            obj[j] = -c[j];
        }
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    let mut pivots = 0;
    loop {
        let obj = &t[m * width..];
        let Some(enter) = (0..n + m).find(|&j| obj[j] < -PIVOT_TOL) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let aij = t[i * width + enter];
            if aij > PIVOT_TOL {
                let ratio = t[i * width + width - 1] / aij;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((r, best)) => {
                        if ratio < best - 1e-14
                            || (ratio <= best + 1e-14 && basis[i] < basis[r])
                        {
                            Some((i, ratio))
                        } else {
                            Some((r, best))
                        }
                    }
                };
            }
        }
        let Some((row, _)) = leave else {
            return Err(LpError::Unbounded);
        };
        pivot(&mut t, width, m, row, enter);
        basis[row] = enter;
        pivots += 1;
        if pivots >= max_pivots {
            return Err(LpError::IterationLimit(pivots));
        }
    }

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i * width + width - 1];
        }
    }
    let value = t[m * width + width - 1];
    Ok(LpSolution { value, x, pivots })
}

fn pivot(t: &mut [f64], width: usize, m: usize, row: usize, col: usize) {
    let p = t[row * width + col];
    for v in &mut t[row * width..(row + 1) * width] {
        *v /= p;
    }
    let pivot_row: Vec<f64> = t[row * width..(row + 1) * width].to_vec();
    for i in 0..=m {
        if i == row {
            continue;
        }
        let factor = t[i * width + col];
        if factor == 0.0 {
            continue;
        }
        let r = &mut t[i * width..(i + 1) * width];
        for (v, &pv) in r.iter_mut().zip(&pivot_row) {
            *v -= factor * pv;
        }
        r[col] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x ≤ 4, 2y ≤ 12, 3x + 2y ≤ 18 → (2, 6), value 36
        let s = maximize(
            &[3.0, 5.0],
            &[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]],
            &[4.0, 12.0, 18.0],
            100,
        )
        .unwrap();
        assert_abs_diff_eq!(s.value, 36.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn unbounded_and_bad_input() {
        assert_eq!(
            maximize(&[1.0], &[vec![-1.0]], &[1.0], 10),
            Err(LpError::Unbounded)
        );
        assert_eq!(
            maximize(&[1.0], &[vec![1.0]], &[-1.0], 10),
            Err(LpError::NegativeRhs(0))
        );
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Several constraints tight at the origin.
        let s = maximize(
            &[10.0, -57.0, -9.0, -24.0],
            &[
                vec![0.5, -5.5, -2.5, 9.0],
                vec![0.5, -1.5, -0.5, 1.0],
                vec![1.0, 0.0, 0.0, 0.0],
            ],
            &[0.0, 0.0, 1.0],
            1000,
        )
        .unwrap();
        assert_abs_diff_eq!(s.value, 1.0, epsilon = 1e-12);
    }
}
