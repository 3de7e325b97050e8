//! Endpoint-preserving exchange of convex combinations for pure assignments.
//!
//! On a subinterval the relaxed dynamics are frozen per base cell to
//! `x' = A_c x + sum_i theta_ci c_ci`. Each base cell is split into `2^level`
//! fine cells. With one RK4 step per fine cell the endpoint is affine in the
//! per-cell velocity choices:
//!
//! ```text
//! x_N = G_0 x_0 + sum_k sum_i w_ki mu_ki,   mu_ki = G_{k+1} Q_k c_ki,
//! ```
//!
//! where `P_k`, `Q_k` are the RK4 propagators of the fine cell and `G_k` the
//! product `P_{N-1} .. P_k`. Fractional weights `w` matching the endpoint are
//! found as the feasible point of the transportation program closest to the
//! bundle weights `theta`, then each fine cell is split into consecutive pure
//! pieces with lengths proportional to `w` (ascending index order). The
//! rounding error is first order in the fine step, so the grid is doubled
//! until the re-integrated endpoint meets the tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{ControlValue, PiecewiseControl, Trajectory};

#[derive(Debug, Clone, Error)]
pub enum ExchangeError {
    #[error("bundle is invalid: {0}")]
    InvalidBundle(String),
    #[error("endpoint error {residual:.3e} above tolerance at the finest level")]
    ToleranceNotMet {
        residual: f64,
        best: Box<ExchangeResult>,
    },
}

/// How a bundle cell was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    /// eps-selection fan from condition (C2).
    Fan,
    /// Single (C1) affine selection through the reference velocity.
    AffineFallback,
    /// (C1) linear part with the unpulled extreme points of the decomposition.
    ExtremeFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleCell {
    pub a: DMatrix<f64>,
    pub c: Vec<DVector<f64>>,
    pub theta: Vec<f64>,
    pub kind: CellKind,
    /// Control parameter realizing index `i` with the true dynamics, if any.
    pub generators: Vec<Option<DVector<f64>>>,
}

impl BundleCell {
    pub fn new(a: DMatrix<f64>, c: Vec<DVector<f64>>, theta: Vec<f64>, kind: CellKind) -> Self {
        let generators = vec![None; c.len()];
        BundleCell {
            a,
            c,
            theta,
            kind,
            generators,
        }
    }

    /// `A x + sum theta_i c_i`.
    pub fn mean_velocity(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = &self.a * x;
        for (w, c) in self.theta.iter().zip(&self.c) {
            v += c * *w;
        }
        v
    }
}

/// Frozen affine representation on `[start, end]` over equal base cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionBundle {
    pub start: f64,
    pub end: f64,
    pub cells: Vec<BundleCell>,
}

impl SelectionBundle {
    pub fn new(start: f64, end: f64, cells: Vec<BundleCell>) -> Result<Self, ExchangeError> {
        if !(end > start) || cells.is_empty() {
            return Err(ExchangeError::InvalidBundle("empty interval or no cells".into()));
        }
        let n = cells[0].a.nrows();
        for (k, c) in cells.iter().enumerate() {
            if c.c.is_empty() || c.c.len() != c.theta.len() || c.generators.len() != c.c.len() {
                return Err(ExchangeError::InvalidBundle(format!("cell {k}: list lengths differ")));
            }
            if c.a.nrows() != n || c.a.ncols() != n || c.c.iter().any(|v| v.len() != n) {
                return Err(ExchangeError::InvalidBundle(format!("cell {k}: dimension")));
            }
            let s: f64 = c.theta.iter().sum();
            if (s - 1.0).abs() > 1e-9 || c.theta.iter().any(|w| *w < -1e-12) {
                return Err(ExchangeError::InvalidBundle(format!("cell {k}: weights not convex")));
            }
        }
        Ok(SelectionBundle { start, end, cells })
    }

    pub fn dim(&self) -> usize {
        self.cells[0].a.nrows()
    }

    pub fn base_len(&self) -> f64 {
        (self.end - self.start) / self.cells.len() as f64
    }

    pub fn fine_cells(&self, level: u32) -> usize {
        self.cells.len() << level
    }

    pub fn fine_len(&self, level: u32) -> f64 {
        (self.end - self.start) / self.fine_cells(level) as f64
    }

    fn fine_start(&self, level: u32, k: usize) -> f64 {
        self.start + (self.end - self.start) * k as f64 / self.fine_cells(level) as f64
    }
}

/// RK4 one-step propagators for `x' = A x + c` with constant data:
/// `x(h) = P x + Q c`.
pub fn rk4_propagators(a: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let ha = a * h;
    let ha2 = &ha * &ha;
    let ha3 = &ha2 * &ha;
    let ha4 = &ha3 * &ha;
    let p = &id + &ha + &ha2 * 0.5 + &ha3 / 6.0 + &ha4 / 24.0;
    let q = (&id + &ha * 0.5 + &ha2 / 6.0 + &ha3 / 24.0) * h;
    (p, q)
}

struct Moments {
    /// `mu[k][i]`.
    mu: Vec<Vec<DVector<f64>>>,
    /// `G_0`.
    g0: DMatrix<f64>,
}

fn moments(bundle: &SelectionBundle, level: u32) -> Moments {
    let n = bundle.dim();
    let nf = bundle.fine_cells(level);
    let h = bundle.fine_len(level);
    let props: Vec<(DMatrix<f64>, DMatrix<f64>)> =
        bundle.cells.iter().map(|c| rk4_propagators(&c.a, h)).collect();
    let mut mu = vec![Vec::new(); nf];
    let mut g = DMatrix::<f64>::identity(n, n);
    for k in (0..nf).rev() {
        let cell = &bundle.cells[k >> level];
        let (p, q) = &props[k >> level];
        let gq = &g * q;
        mu[k] = cell.c.iter().map(|c| &gq * c).collect();
        g = &g * p;
    }
    Moments { mu, g0: g }
}

/// `m = x_end - G_0 x_start` evaluated for the bundle weights: the moment
/// `int W(e, s) sum_i theta_i c_i ds` under the RK4 quadrature at `level`.
pub fn target_moment(bundle: &SelectionBundle, level: u32) -> DVector<f64> {
    let mo = moments(bundle, level);
    let mut m = DVector::zeros(bundle.dim());
    for (k, mus) in mo.mu.iter().enumerate() {
        let cell = &bundle.cells[k >> level];
        for (w, v) in cell.theta.iter().zip(mus) {
            m += v * *w;
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExchangeResult {
    pub level: u32,
    pub fine_cells: usize,
    /// Fractional weights per fine cell before rounding.
    pub weights: Vec<Vec<f64>>,
    /// Pure assignment; `Index(i)` refers to the base cell listed in `piece_cells`.
    pub control: PiecewiseControl,
    pub piece_cells: Vec<usize>,
    pub endpoint: DVector<f64>,
    pub endpoint_error: f64,
    /// `sum w mu - m` for the fractional weights.
    pub moment_residual: DVector<f64>,
}

/// Sub-pieces `[a, b)` of each cell, one per index with positive weight.
/// Even cells run in ascending index order and odd cells in descending order,
/// so the per-cell ordering bias cancels between neighbours; the last piece
/// ends exactly at the cell end.
pub fn chattering_round(cells: &[(f64, f64)], weights: &[Vec<f64>]) -> Vec<(f64, f64, usize, usize)> {
    let mut out = Vec::new();
    for (k, ((a, b), w)) in cells.iter().zip(weights).enumerate() {
        let len = b - a;
        let total: f64 = w.iter().map(|v| v.max(0.0)).sum();
        let mut order: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 0.0).collect();
        if order.is_empty() {
            out.push((*a, *b, k, 0));
            continue;
        }
        if k % 2 == 1 {
            order.reverse();
        }
        let last = order.len() - 1;
        let mut t = *a;
        for (j, &i) in order.iter().enumerate() {
            let e = if j == last { *b } else { (t + len * w[i] / total).min(*b) };
            if e > t {
                out.push((t, e, k, i));
            }
            t = e;
        }
    }
    out
}

/// Weights `w = theta + Delta` with `sum_k M_k w_k = m`, `sum_i w_ki = 1`,
/// `w >= 0`, and `|Delta|` minimal (active-set on the nonnegativity bounds).
fn closest_feasible(
    mu: &[Vec<DVector<f64>>],
    theta: &[&[f64]],
    residual: &DVector<f64>,
) -> (Vec<Vec<f64>>, DVector<f64>) {
    let n = residual.len();
    let nf = mu.len();
    let mut clamped: Vec<Vec<bool>> = theta.iter().map(|t| vec![false; t.len()]).collect();
    let mut best: Option<(Vec<Vec<f64>>, DVector<f64>)> = None;
    for _ in 0..64 {
        let mut s = DMatrix::<f64>::zeros(n, n);
        let mut rhs = residual.clone();
        // fixed parts: clamped entries move to zero, free entries share the freed mass
        let mut shares = vec![0.0; nf];
        for k in 0..nf {
            let free: Vec<usize> = (0..theta[k].len()).filter(|&i| !clamped[k][i]).collect();
            if free.is_empty() {
                continue;
            }
            let freed: f64 = (0..theta[k].len()).filter(|&i| clamped[k][i]).map(|i| theta[k][i]).sum();
            shares[k] = freed / free.len() as f64;
            for i in 0..theta[k].len() {
                if clamped[k][i] {
                    rhs += &mu[k][i] * theta[k][i];
                } else {
                    rhs -= &mu[k][i] * shares[k];
                }
            }
            if free.len() > 1 {
                let q = free.len() as f64;
                let mean: DVector<f64> = free.iter().map(|&i| &mu[k][i]).sum::<DVector<f64>>() / q;
                for &i in &free {
                    let d = &mu[k][i] - &mean;
                    s += &d * d.transpose();
                }
            }
        }
        let lambda = s
            .clone()
            .svd(true, true)
            .solve(&rhs, 1e-14 * s.amax().max(1e-300))
            .unwrap_or_else(|_| DVector::zeros(n));
        let mut w: Vec<Vec<f64>> = Vec::with_capacity(nf);
        let mut worst = 0.0;
        for k in 0..nf {
            let free: Vec<usize> = (0..theta[k].len()).filter(|&i| !clamped[k][i]).collect();
            let q = free.len().max(1) as f64;
            let mean = free.iter().map(|&i| mu[k][i].dot(&lambda)).sum::<f64>() / q;
            let mut wk = vec![0.0; theta[k].len()];
            for &i in &free {
                wk[i] = theta[k][i] + shares[k] + mu[k][i].dot(&lambda) - mean;
                if wk[i] < worst {
                    worst = wk[i];
                }
            }
            w.push(wk);
        }
        let mut achieved = DVector::zeros(n);
        for k in 0..nf {
            for (i, v) in mu[k].iter().enumerate() {
                achieved += v * w[k][i];
            }
        }
        if worst >= -1e-15 {
            for wk in &mut w {
                for v in wk.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            return (w, achieved);
        }
        // clamp every negative entry and retry
        for k in 0..nf {
            for i in 0..w[k].len() {
                if !clamped[k][i] && w[k][i] < 0.0 {
                    clamped[k][i] = true;
                }
            }
        }
        best = Some((w, achieved));
    }
    let (mut w, achieved) = best.expect("at least one iteration");
    for wk in &mut w {
        for v in wk.iter_mut() {
            *v = v.max(0.0);
        }
        let s: f64 = wk.iter().sum();
        if s > 0.0 {
            for v in wk.iter_mut() {
                *v /= s;
            }
        }
    }
    (w, achieved)
}

/// Fractional weights and pure assignment at a fixed level, with the frozen
/// affine dynamics re-integrated piece by piece.
pub fn exchange_at_level(
    bundle: &SelectionBundle,
    x_start: &DVector<f64>,
    x_end_target: &DVector<f64>,
    level: u32,
) -> ExchangeResult {
    let nf = bundle.fine_cells(level);
    let mo = moments(bundle, level);
    let m = x_end_target - &mo.g0 * x_start;
    let theta: Vec<&[f64]> = (0..nf).map(|k| bundle.cells[k >> level].theta.as_slice()).collect();
    let mut base = DVector::zeros(bundle.dim());
    for k in 0..nf {
        for (i, v) in mo.mu[k].iter().enumerate() {
            base += v * theta[k][i];
        }
    }
    let (weights, achieved) = closest_feasible(&mo.mu, &theta, &(&m - base));
    let moment_residual = achieved + {
        let mut b = DVector::zeros(bundle.dim());
        for k in 0..nf {
            for (i, v) in mo.mu[k].iter().enumerate() {
                b += v * theta[k][i];
            }
        }
        b
    } - &m;
    let cells: Vec<(f64, f64)> = (0..nf)
        .map(|k| (bundle.fine_start(level, k), bundle.fine_start(level, k + 1)))
        .collect();
    let pieces = chattering_round(&cells, &weights);
    let mut x = x_start.clone();
    let mut breakpoints = Vec::with_capacity(pieces.len() + 1);
    let mut values = Vec::with_capacity(pieces.len());
    let mut piece_cells = Vec::with_capacity(pieces.len());
    breakpoints.push(bundle.start);
    for &(a, b, k, i) in &pieces {
        let cell = &bundle.cells[k >> level];
        let (p, q) = rk4_propagators(&cell.a, b - a);
        x = &p * &x + &q * &cell.c[i];
        breakpoints.push(b);
        values.push(ControlValue::Index(i));
        piece_cells.push(k >> level);
    }
    let endpoint_error = (&x - x_end_target).norm();
    ExchangeResult {
        level,
        fine_cells: nf,
        weights,
        control: PiecewiseControl { breakpoints, values },
        piece_cells,
        endpoint: x,
        endpoint_error,
        moment_residual,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ExchangeOptions {
    pub tol: f64,
    /// First level tried.
    pub min_level: u32,
    /// Last level tried.
    pub max_refine: u32,
}

impl Default for ExchangeOptions {
    fn default() -> Self {
        ExchangeOptions {
            tol: 1e-6,
            min_level: 0,
            max_refine: 12,
        }
    }
}

/// Doubles the fine grid from `min_level` until the endpoint error meets `tol`.
pub fn exchange(
    bundle: &SelectionBundle,
    x_start: &DVector<f64>,
    x_end_target: &DVector<f64>,
    opts: &ExchangeOptions,
) -> Result<ExchangeResult, ExchangeError> {
    let mut best: Option<ExchangeResult> = None;
    for level in opts.min_level..=opts.max_refine.max(opts.min_level) {
        let r = exchange_at_level(bundle, x_start, x_end_target, level);
        if r.endpoint_error <= opts.tol {
            return Ok(r);
        }
        if best.as_ref().is_none_or(|b| r.endpoint_error < b.endpoint_error) {
            best = Some(r);
        }
    }
    let best = best.expect("at least one level");
    Err(ExchangeError::ToleranceNotMet {
        residual: best.endpoint_error,
        best: Box::new(best),
    })
}

/// Frozen-affine trajectory of an exchange result on its fine grid.
pub fn affine_trajectory(bundle: &SelectionBundle, result: &ExchangeResult, x_start: &DVector<f64>) -> Trajectory {
    let level = result.level;
    let nf = result.fine_cells;
    let mut times = Vec::with_capacity(nf + 1);
    let mut states = Vec::with_capacity(nf + 1);
    let mut derivs = Vec::with_capacity(nf + 1);
    let mut x = x_start.clone();
    let mut piece = 0;
    let bp = &result.control.breakpoints;
    for k in 0..nf {
        let cell = &bundle.cells[k >> level];
        times.push(bundle.fine_start(level, k));
        states.push(x.clone());
        let ControlValue::Index(i0) = result.control.values[piece] else {
            unreachable!()
        };
        derivs.push(&cell.a * &x + &cell.c[i0]);
        let end = bundle.fine_start(level, k + 1);
        while piece < result.control.values.len() && bp[piece] < end {
            let ControlValue::Index(i) = result.control.values[piece] else {
                unreachable!()
            };
            let (p, q) = rk4_propagators(&cell.a, bp[piece + 1] - bp[piece]);
            x = &p * &x + &q * &cell.c[i];
            piece += 1;
        }
    }
    let last = &bundle.cells[(nf - 1) >> level];
    let ControlValue::Index(il) = result.control.values[result.control.values.len() - 1] else {
        unreachable!()
    };
    times.push(bundle.end);
    derivs.push(&last.a * &x + &last.c[il]);
    states.push(x);
    Trajectory {
        feasible: vec![true; times.len()],
        times,
        states,
        derivs,
    }
}
