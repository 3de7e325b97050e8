//! Small dense linear programs in standard form.
//!
//! Solves `min c·x` subject to `A x = b`, `x >= 0` with a two-phase tableau
//! simplex. Pivoting follows Bland's rule (lowest entering index, lowest
//! basic index on ratio ties), so results are reproducible and cycling cannot
//! occur. Sizes here are tiny (tens of columns), so the tableau is dense.

use nalgebra::DMatrix;
use thiserror::Error;

const PIVOT_EPS: f64 = 1e-11;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {0:.3e})")]
    Infeasible(f64),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("pivot limit exceeded")]
    PivotLimit,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Column indices of the final basis (original columns only).
    pub basis: Vec<usize>,
}

struct Tableau {
    rows: usize,
    cols: usize,
    // (rows + 1) x (cols + 1); last row is the reduced-cost row, last column the rhs.
    t: DMatrix<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[(i, self.cols)]
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.t[(r, c)];
        let width = self.cols + 1;
        for j in 0..width {
            self.t[(r, j)] /= p;
        }
        for i in 0..=self.rows {
            if i == r {
                continue;
            }
            let f = self.t[(i, c)];
            if f != 0.0 {
                for j in 0..width {
                    let v = self.t[(r, j)];
                    self.t[(i, j)] -= f * v;
                }
            }
        }
        self.basis[r] = c;
    }

    /// Runs simplex iterations on the columns `< allowed`.
    fn optimize(&mut self, allowed: usize) -> Result<(), LpError> {
        let obj = self.rows;
        for _ in 0..MAX_PIVOTS {
            let entering = (0..allowed).find(|&j| self.t[(obj, j)] < -PIVOT_EPS);
            let Some(c) = entering else {
                return Ok(());
            };
            let mut best: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.t[(i, c)];
                if a > PIVOT_EPS {
                    let ratio = self.rhs(i) / a;
                    best = match best {
                        None => Some((i, ratio)),
                        Some((bi, br)) => {
                            if ratio < br - 1e-14
                                || (ratio <= br + 1e-14 && self.basis[i] < self.basis[bi])
                            {
                                Some((i, ratio))
                            } else {
                                Some((bi, br))
                            }
                        }
                    }
                }
            }
            match best {
                Some((r, _)) => self.pivot(r, c),
                None => return Err(LpError::Unbounded),
            }
        }
        Err(LpError::PivotLimit)
    }
}

/// Minimizes `c·x` subject to `a x = b`, `x >= 0`.
pub fn minimize(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> Result<LpSolution, LpError> {
    let m = a.nrows();
    let n = a.ncols();
    if c.len() != n || b.len() != m {
        return Err(LpError::Shape(format!(
            "c has {}, A is {}x{}, b has {}",
            c.len(),
            m,
            n,
            b.len()
        )));
    }
    let cols = n + m;
    let mut t = DMatrix::<f64>::zeros(m + 1, cols + 1);
    let mut scale = 1.0f64;
    for i in 0..m {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = sign * a[(i, j)];
        }
        t[(i, n + i)] = 1.0;
        t[(i, cols)] = sign * b[i];
        scale = scale.max(b[i].abs());
    }
    // phase one: minimize the sum of artificials
    for j in 0..n {
        let s: f64 = (0..m).map(|i| t[(i, j)]).sum();
        t[(m, j)] = -s;
    }
    let s: f64 = (0..m).map(|i| t[(i, cols)]).sum();
    t[(m, cols)] = -s;

    let mut tab = Tableau {
        rows: m,
        cols,
        t,
        basis: (n..n + m).collect(),
    };
    tab.optimize(n)?;
    let residual = -tab.t[(m, cols)];
    if residual > 1e-9 * scale.max(1.0) {
        return Err(LpError::Infeasible(residual));
    }
    // drive remaining artificials out of the basis where possible
    for i in 0..m {
        if tab.basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| tab.t[(i, j)].abs() > 1e-9) {
                tab.pivot(i, j);
            }
        }
    }
    // phase two reduced costs
    for j in 0..=cols {
        tab.t[(m, j)] = 0.0;
    }
    for j in 0..n {
        let mut d = c[j];
        for i in 0..m {
            let bj = tab.basis[i];
            if bj < n {
                d -= c[bj] * tab.t[(i, j)];
            }
        }
        tab.t[(m, j)] = d;
    }
    tab.optimize(n)?;

    let mut x = vec![0.0; n];
    let mut basis = Vec::new();
    for i in 0..m {
        let bj = tab.basis[i];
        if bj < n {
            x[bj] = tab.rhs(i).max(0.0);
            basis.push(bj);
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution {
        x,
        objective,
        basis,
    })
}

/// Maximizes `c·x` subject to `a x = b`, `x >= 0`.
pub fn maximize(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> Result<LpSolution, LpError> {
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    let mut sol = minimize(&neg, a, b)?;
    sol.objective = -sol.objective;
    Ok(sol)
}

/// Convex-combination weights `theta >= 0`, `sum theta = 1`, `sum theta_i p_i = y`
/// maximizing `sum theta_i w_i`. Returns `None` when `y` is not in the hull.
pub fn convex_weights(
    points: &[nalgebra::DVector<f64>],
    y: &nalgebra::DVector<f64>,
    weights: &[f64],
) -> Option<LpSolution> {
    let dim = y.len();
    let k = points.len();
    let mut a = DMatrix::<f64>::zeros(dim + 1, k);
    let mut b = vec![0.0; dim + 1];
    for (j, p) in points.iter().enumerate() {
        for i in 0..dim {
            a[(i, j)] = p[i];
        }
        a[(dim, j)] = 1.0;
    }
    for i in 0..dim {
        b[i] = y[i];
    }
    b[dim] = 1.0;
    maximize(weights, &a, &b).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y, x <= 4, 2y <= 12, 3x + 2y <= 18
        let a = DMatrix::from_row_slice(
            3,
            5,
            &[
                1.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, 1.0, 0.0, //
                3.0, 2.0, 0.0, 0.0, 1.0,
            ],
        );
        let sol = maximize(&[3.0, 5.0, 0.0, 0.0, 0.0], &a, &[4.0, 12.0, 18.0]).unwrap();
        assert!((sol.objective - 36.0).abs() < 1e-9);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!((sol.x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            minimize(&[1.0, 1.0], &a, &[1.0, 2.0]),
            Err(LpError::Infeasible(_))
        ));
    }

    #[test]
    fn detects_unbounded() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert_eq!(
            minimize(&[-1.0, 0.0], &a, &[1.0]).unwrap_err(),
            LpError::Unbounded
        );
    }

    #[test]
    fn redundant_rows_and_negative_rhs() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, 0.0]);
        let sol = minimize(&[1.0, 2.0], &a, &[1.0, 2.0, -0.25]).unwrap();
        assert!((sol.x[0] - 0.25).abs() < 1e-12);
        assert!((sol.x[1] - 0.75).abs() < 1e-12);
    }
}
