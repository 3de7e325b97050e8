//! Concave Bolza problems: Mayer extension, relaxed solve, purification and
//! control extraction.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::ConvexBody;
use crate::purify::{purify, PurificationReport, PurifyOptions};
use crate::trajectory::{integrate, ControlValue, Dynamics, PiecewiseControl, Trajectory, TrajectoryError};
use crate::systems::{sphere_sample, BolzaExtended, Bounds, MatrixFn, ScalarField, SystemDescriptor, VectorField};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BolzaError {
    #[error("running cost is unbounded on the sampled domain")]
    UnboundedCost,
    #[error("terminal constraint cannot be met (violation {0:.3e})")]
    TerminalInfeasible(f64),
    #[error("exhaustive search needs {0} evaluations, above the limit")]
    CombinatorialLimit(u128),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("purification failed: {0}")]
    Purification(String),
}

/// Terminal condition at the fixed final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TerminalSet {
    Free,
    Point(DVector<f64>),
    Box(Bounds),
}

impl TerminalSet {
    /// Distance from `x` to the target set.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        match self {
            TerminalSet::Free => 0.0,
            TerminalSet::Point(p) => (x - p).norm(),
            TerminalSet::Box(b) => {
                let d = DVector::from_fn(x.len(), |i, _| {
                    (b.lo[i] - x[i]).max(0.0) + (x[i] - b.hi[i]).max(0.0)
                });
                d.norm()
            }
        }
    }
}

/// Relative margin added to the Gronwall box.
pub const OMEGA_MARGIN: f64 = 1.01;

/// `min int_0^T alpha(t, x) + beta(t, u) dt` subject to `x' = A x + f(t, u)`, `u in U`.
#[derive(Clone)]
pub struct BolzaProblem {
    pub a: MatrixFn,
    pub f: VectorField,
    pub u: ConvexBody,
    pub alpha: ScalarField,
    pub beta: ScalarField,
    pub x_bar: DVector<f64>,
    /// Final time `T`.
    pub horizon: f64,
    /// Bound `T0 >= T` on admissible final times.
    pub t0_bound: f64,
    pub terminal: TerminalSet,
}

impl std::fmt::Debug for BolzaProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BolzaProblem")
            .field("x_bar", &self.x_bar)
            .field("horizon", &self.horizon)
            .field("terminal", &self.terminal)
            .finish()
    }
}

impl BolzaProblem {
    /// `x' = u`, `|u| <= 1`, cost `int_0^1 -x^2`, `x(0) = 0`, free end point.
    pub fn concave_1d() -> Self {
        BolzaProblem {
            a: Arc::new(|_| DMatrix::zeros(1, 1)),
            f: Arc::new(|_, u: &DVector<f64>| u.clone()),
            u: ConvexBody::Segment {
                a: dvector![-1.0],
                b: dvector![1.0],
            },
            alpha: Arc::new(|_, x: &DVector<f64>| -x.norm_squared()),
            beta: Arc::new(|_, _: &DVector<f64>| 0.0),
            x_bar: dvector![0.0],
            horizon: 1.0,
            t0_bound: 1.0,
            terminal: TerminalSet::Free,
        }
    }

    pub fn n(&self) -> usize {
        self.x_bar.len()
    }

    /// Finite sample of `U`: a uniform grid on segments, vertices of
    /// polytopes, a sphere sample for balls.
    pub fn control_samples(&self, n_control: usize) -> Vec<DVector<f64>> {
        match &self.u {
            ConvexBody::Segment { a, b } => {
                let k = n_control.max(2);
                (0..k).map(|i| a + (b - a) * (i as f64 / (k - 1) as f64)).collect()
            }
            ConvexBody::Ball { center, radius } => sphere_sample(center, *radius),
            other => other.vertices().unwrap_or_default(),
        }
    }

    fn time_samples(&self) -> Vec<f64> {
        (0..=10).map(|i| self.t0_bound * i as f64 / 10.0).collect()
    }

    /// Box containing every relaxed trajectory on `[0, T0]`, from Gronwall:
    /// `|x(t)| <= (|x_bar| + T0 sup|f|) exp(T0 sup|A|)`.
    pub fn omega(&self) -> Bounds {
        let samples = self.control_samples(33);
        let times = self.time_samples();
        let sup_a = times.iter().map(|&t| (self.a)(t).norm()).fold(0.0, f64::max);
        let sup_f = times
            .iter()
            .flat_map(|&t| samples.iter().map(move |u| (t, u)))
            .map(|(t, u)| (self.f)(t, u).norm())
            .fold(0.0, f64::max);
        let r = (self.x_bar.norm() + self.t0_bound * sup_f) * (self.t0_bound * sup_a).exp();
        // strict containment: extreme trajectories reach the Gronwall radius
        Bounds::cube(self.n(), r * OMEGA_MARGIN)
    }

    /// `M = 1 + sup(alpha + beta)` sampled over `[0, T0] x Omega x U`.
    pub fn cost_ceiling(&self, omega: &Bounds, samples: &[DVector<f64>]) -> Result<f64, BolzaError> {
        let n = self.n();
        let per_axis: usize = if n <= 2 { 21 } else if n <= 4 { 5 } else { 3 };
        let total = per_axis.pow(n as u32);
        let mut sup = f64::NEG_INFINITY;
        for t in self.time_samples() {
            for k in 0..total {
                let mut idx = k;
                let x = DVector::from_fn(n, |i, _| {
                    let j = idx % per_axis;
                    idx /= per_axis;
                    omega.lo[i] + (omega.hi[i] - omega.lo[i]) * j as f64 / (per_axis - 1) as f64
                });
                let a = (self.alpha)(t, &x);
                for u in samples {
                    sup = sup.max(a + (self.beta)(t, u));
                }
            }
        }
        if !sup.is_finite() {
            return Err(BolzaError::UnboundedCost);
        }
        Ok(1.0 + sup)
    }

    /// Mayer extension with state `(x, x0)`.
    pub fn extend_to_mayer(&self, n_control: usize) -> Result<SystemDescriptor, BolzaError> {
        if self.horizon < 0.0 || self.horizon > self.t0_bound {
            return Err(BolzaError::Invalid(format!(
                "final time {} outside [0, {}]",
                self.horizon, self.t0_bound
            )));
        }
        let omega = self.omega();
        let u_samples = self.control_samples(n_control);
        let m = self.cost_ceiling(&omega, &u_samples)?;
        Ok(SystemDescriptor::BolzaExtended(BolzaExtended {
            a: self.a.clone(),
            f: self.f.clone(),
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            u: self.u.clone(),
            u_samples,
            m,
            omega,
        }))
    }
}

/// `(x, x0)' = (A x + sum w_j f(u_j), alpha(x) + sum w_j beta(u_j))` for weights `w`
/// over a fixed control sample; a single sample with weight one is an ordinary control.
struct RelaxedDynamics<'a> {
    p: &'a BolzaProblem,
    samples: &'a [DVector<f64>],
}

impl Dynamics for RelaxedDynamics<'_> {
    fn eval(&self, t: f64, s: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError> {
        let ControlValue::Vector(w) = value else {
            return Err(TrajectoryError::Invalid("relaxed dynamics take weight vectors".into()));
        };
        let n = self.p.n();
        let x = s.rows(0, n).into_owned();
        let mut y = (self.p.a)(t) * &x;
        let mut y0 = (self.p.alpha)(t, &x);
        for (wj, u) in w.iter().zip(self.samples) {
            if *wj != 0.0 {
                y += (self.p.f)(t, u) * *wj;
                y0 += (self.p.beta)(t, u) * *wj;
            }
        }
        Ok(y.push(y0))
    }
}

/// Original dynamics with the running cost appended, driven by `u` itself.
struct CostDynamics<'a> {
    p: &'a BolzaProblem,
}

impl Dynamics for CostDynamics<'_> {
    fn eval(&self, t: f64, s: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError> {
        let ControlValue::Vector(u) = value else {
            return Err(TrajectoryError::Invalid("cost dynamics take control vectors".into()));
        };
        let n = self.p.n();
        let x = s.rows(0, n).into_owned();
        let y = (self.p.a)(t) * &x + (self.p.f)(t, u);
        Ok(y.push((self.p.alpha)(t, &x) + (self.p.beta)(t, u)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxedOptions {
    /// RK4 steps per control cell.
    pub substeps: usize,
    pub max_sweeps: usize,
    /// Weight of the squared terminal violation in the descent objective.
    pub penalty: f64,
    /// Terminal violation accepted at the optimum.
    pub terminal_tol: f64,
}

impl Default for RelaxedOptions {
    fn default() -> Self {
        RelaxedOptions {
            substeps: 2,
            max_sweeps: 30,
            penalty: 1e6,
            terminal_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaxedSolution {
    /// Trajectory of `(x, x0)`.
    pub trajectory: Trajectory,
    /// Per cell weights over `samples`.
    pub weights: Vec<Vec<f64>>,
    pub samples: Vec<DVector<f64>>,
    /// `x0(T)`.
    pub cost: f64,
    pub terminal_violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleResult {
    pub cost: f64,
    /// Index into the value grid, per cell.
    pub control: Vec<usize>,
    pub evaluations: u128,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum OracleMode {
    /// Every sequence; fails when `values^cells` exceeds `limit`.
    Exhaustive { limit: u128 },
    /// Keeps the `width` cheapest prefixes after each cell.
    Beam { width: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BolzaSolution {
    /// Extracted control `u*`, one value per output cell.
    pub control: PiecewiseControl,
    /// Trajectory of `(x, x0)` under `u*`.
    pub trajectory: Trajectory,
    pub cost: f64,
    pub relaxed_cost: f64,
    /// `cost - relaxed_cost`.
    pub gap: f64,
    pub m: f64,
    /// Cells whose `u*` is an extreme point of `U`.
    pub bang_fraction: f64,
    /// Nodes of the purified trajectory with `x0' < M`.
    pub below_m_fraction: f64,
    /// Cells whose inversion residual exceeded the tolerance.
    pub flagged_cells: Vec<usize>,
    pub max_inversion_residual: f64,
    /// Realized pieces using the slack value `v = 1`.
    pub v_selected: usize,
    pub report: PurificationReport,
}

impl BolzaProblem {
    fn integrate_relaxed(
        &self,
        samples: &[DVector<f64>],
        weights: &[Vec<f64>],
        substeps: usize,
    ) -> Result<Trajectory, TrajectoryError> {
        let cells = weights.len();
        let t_end = self.horizon;
        let breakpoints = (0..=cells)
            .map(|i| if i == cells { t_end } else { t_end * i as f64 / cells as f64 })
            .collect();
        let values = weights.iter().map(|w| ControlValue::Vector(DVector::from_vec(w.clone()))).collect();
        let control = PiecewiseControl::new(breakpoints, values)?;
        integrate(
            &RelaxedDynamics { p: self, samples },
            &control,
            &self.x_bar.clone().push(0.0),
            (0.0, t_end),
            cells * substeps.max(1),
            None,
        )
    }

    fn objective(&self, end: &DVector<f64>, penalty: f64) -> f64 {
        let n = self.n();
        let v = self.terminal.violation(&end.rows(0, n).into_owned());
        end[n] + penalty * v * v
    }

    /// Direct transcription of the convexified problem: piecewise-constant
    /// weights over `control_samples(n_control)` on `n_time` cells, minimized
    /// by coordinate descent from several starts.
    pub fn solve_relaxed(
        &self,
        n_time: usize,
        n_control: usize,
        opts: &RelaxedOptions,
    ) -> Result<RelaxedSolution, BolzaError> {
        if n_time < 2 || n_control < 2 {
            return Err(BolzaError::Invalid("discretization sizes must be at least 2".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(BolzaError::Invalid("the relaxed transcription needs T > 0".into()));
        }
        let samples = self.control_samples(n_control);
        let s = samples.len();
        let unit = |j: usize| (0..s).map(|i| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let mut starts = vec![vec![vec![1.0 / s as f64; s]; n_time]];
        for j in [0, s / 2, s - 1] {
            starts.push(vec![unit(j); n_time]);
        }
        starts.dedup();
        let eval = |w: &[Vec<f64>]| -> f64 {
            self.integrate_relaxed(&samples, w, opts.substeps)
                .map(|t| self.objective(t.end(), opts.penalty))
                .unwrap_or(f64::INFINITY)
        };
        let runs: Vec<(f64, Vec<Vec<f64>>)> = starts
            .into_par_iter()
            .map(|mut w| {
                let mut best = eval(&w);
                for _ in 0..opts.max_sweeps {
                    let mut improved = false;
                    for c in 0..n_time {
                        for j in 0..s {
                            for step in [1.0, 0.5, 0.25, 0.125] {
                                let mut cand = w.clone();
                                for (i, v) in cand[c].iter_mut().enumerate() {
                                    *v = (1.0 - step) * *v + if i == j { step } else { 0.0 };
                                }
                                let val = eval(&cand);
                                if val < best - 1e-13 * (1.0 + best.abs()) {
                                    best = val;
                                    w = cand;
                                    improved = true;
                                    break;
                                }
                            }
                        }
                    }
                    if !improved {
                        break;
                    }
                }
                (best, w)
            })
            .collect();
        let (_, weights) = runs
            .into_iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .expect("at least one start");
        let trajectory = self
            .integrate_relaxed(&samples, &weights, opts.substeps)
            .map_err(|e| BolzaError::Invalid(e.to_string()))?;
        let n = self.n();
        let end = trajectory.end();
        let terminal_violation = self.terminal.violation(&end.rows(0, n).into_owned());
        if terminal_violation > opts.terminal_tol {
            return Err(BolzaError::TerminalInfeasible(terminal_violation));
        }
        Ok(RelaxedSolution {
            cost: end[n],
            terminal_violation,
            trajectory,
            weights,
            samples,
        })
    }

    /// `(x, x0)` after one cell of constant `u`, by `substeps` RK4 steps.
    fn step_cell(&self, t0: f64, h: f64, s: &DVector<f64>, u: &DVector<f64>, substeps: usize) -> DVector<f64> {
        let d = CostDynamics { p: self };
        let v = ControlValue::Vector(u.clone());
        let f = |t: f64, z: &DVector<f64>| d.eval(t, z, &v).expect("vector control");
        let dt = h / substeps as f64;
        let mut z = s.clone();
        for i in 0..substeps {
            let t = t0 + i as f64 * dt;
            let k1 = f(t, &z);
            let k2 = f(t + 0.5 * dt, &(&z + &k1 * (0.5 * dt)));
            let k3 = f(t + 0.5 * dt, &(&z + &k2 * (0.5 * dt)));
            let k4 = f(t + dt, &(&z + &k3 * dt));
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        z
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &self,
        z: &DVector<f64>,
        path: &mut Vec<usize>,
        n_time: usize,
        h: f64,
        values: &[DVector<f64>],
        substeps: usize,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = self.n();
        if path.len() == n_time {
            let ok = self.terminal.violation(&z.rows(0, n).into_owned()) <= 1e-6;
            if ok && best.as_ref().is_none_or(|b| z[n] < b.0) {
                *best = Some((z[n], path.clone()));
            }
            return;
        }
        let t = path.len() as f64 * h;
        for (j, u) in values.iter().enumerate() {
            let next = self.step_cell(t, h, z, u, substeps);
            path.push(j);
            self.dfs(&next, path, n_time, h, values, substeps, best);
            path.pop();
        }
    }

    /// Best piecewise-constant control with values in `values` on `n_time`
    /// equal cells. Sequences missing the terminal set by more than `1e-6` are
    /// discarded.
    pub fn brute_force_oracle(
        &self,
        n_time: usize,
        values: &[DVector<f64>],
        mode: OracleMode,
    ) -> Result<OracleResult, BolzaError> {
        const SUBSTEPS: usize = 4;
        let n = self.n();
        let s0 = self.x_bar.clone().push(0.0);
        if self.horizon == 0.0 || n_time == 0 {
            return Ok(OracleResult {
                cost: 0.0,
                control: Vec::new(),
                evaluations: 0,
            });
        }
        if values.is_empty() {
            return Err(BolzaError::Invalid("empty value grid".into()));
        }
        let h = self.horizon / n_time as f64;
        let feasible = |z: &DVector<f64>| self.terminal.violation(&z.rows(0, n).into_owned()) <= 1e-6;
        match mode {
            OracleMode::Exhaustive { limit } => {
                let total = (values.len() as u128).checked_pow(n_time as u32).unwrap_or(u128::MAX);
                if total > limit {
                    return Err(BolzaError::CombinatorialLimit(total));
                }
                // depth-first from every first value, prefix states reused
                let results: Vec<Option<(f64, Vec<usize>)>> = (0..values.len())
                    .into_par_iter()
                    .map(|first| {
                        let mut best = None;
                        let z = self.step_cell(0.0, h, &s0, &values[first], SUBSTEPS);
                        let mut path = vec![first];
                        self.dfs(&z, &mut path, n_time, h, values, SUBSTEPS, &mut best);
                        best
                    })
                    .collect();
                let (cost, control) = results
                    .into_iter()
                    .flatten()
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .ok_or(BolzaError::TerminalInfeasible(f64::INFINITY))?;
                Ok(OracleResult {
                    cost,
                    control,
                    evaluations: total,
                })
            }
            OracleMode::Beam { width } => {
                let mut beam: Vec<(DVector<f64>, Vec<usize>)> = vec![(s0, Vec::new())];
                let mut evaluations = 0u128;
                for c in 0..n_time {
                    let mut next: Vec<(DVector<f64>, Vec<usize>)> = beam
                        .par_iter()
                        .flat_map_iter(|(z, path)| {
                            values.iter().enumerate().map(move |(j, u)| {
                                let mut p = path.clone();
                                p.push(j);
                                (self.step_cell(c as f64 * h, h, z, u, SUBSTEPS), p)
                            })
                        })
                        .collect();
                    evaluations += next.len() as u128;
                    next.sort_by(|a, b| a.0[n].total_cmp(&b.0[n]).then_with(|| a.1.cmp(&b.1)));
                    next.truncate(width.max(1));
                    beam = next;
                }
                let (z, control) = beam
                    .into_iter()
                    .find(|(z, _)| feasible(z))
                    .ok_or(BolzaError::TerminalInfeasible(f64::INFINITY))?;
                Ok(OracleResult {
                    cost: z[n],
                    control,
                    evaluations,
                })
            }
        }
    }

    /// `u` with `A x + f(t, u)` closest to `y`: nearest point of a grid on
    /// `U`, then a golden-section pass between the grid neighbours on segments.
    pub fn invert_velocity(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>, grid: &[DVector<f64>]) -> (DVector<f64>, f64) {
        let ax = (self.a)(t) * x;
        let res = |u: &DVector<f64>| (&ax + (self.f)(t, u) - y).norm();
        let (mut bi, mut br) = (0, f64::INFINITY);
        for (i, u) in grid.iter().enumerate() {
            let r = res(u);
            if r < br {
                bi = i;
                br = r;
            }
        }
        let mut best = grid[bi].clone();
        if let ConvexBody::Segment { .. } = self.u {
            if grid.len() >= 2 {
                let lo = grid[bi.saturating_sub(1)].clone();
                let hi = grid[(bi + 1).min(grid.len() - 1)].clone();
                let g = 0.5 * (5f64.sqrt() - 1.0);
                let at = |s: f64| &lo + (&hi - &lo) * s;
                let (mut a, mut b) = (0.0, 1.0);
                for _ in 0..80 {
                    let c = b - g * (b - a);
                    let d = a + g * (b - a);
                    if res(&at(c)) <= res(&at(d)) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                let cand = at(0.5 * (a + b));
                let r = res(&cand);
                if r < br {
                    best = cand;
                    br = r;
                }
            }
        }
        (best, br)
    }

    /// Purifies the relaxed solution on the extended system and reads off `u*`.
    pub fn purify_and_extract(
        &self,
        n_control: usize,
        relaxed: &RelaxedSolution,
        k: usize,
        eps: f64,
        opts: &PurifyOptions,
    ) -> Result<BolzaSolution, BolzaError> {
        let system = self.extend_to_mayer(n_control)?;
        let SystemDescriptor::BolzaExtended(be) = &system else {
            unreachable!("extend_to_mayer builds the extended system")
        };
        let m = be.m;
        let mdim = be.u.dim();
        let p = purify(&system, &relaxed.trajectory, k, eps, opts).map_err(|e| BolzaError::Purification(e.to_string()))?;
        let n = self.n();
        let traj = &p.trajectory;
        let grid = self.control_samples(65.max(n_control));
        let cells = traj.len() - 1;
        let mut values = Vec::with_capacity(cells);
        let mut flagged_cells = Vec::new();
        let mut max_res: f64 = 0.0;
        let mut bang = 0;
        let ext = self.u.extreme_points();
        for i in 0..cells {
            let x = traj.states[i].rows(0, n).into_owned();
            let y = traj.derivs[i].rows(0, n).into_owned();
            let (u, r) = self.invert_velocity(traj.times[i], &x, &y, &grid);
            max_res = max_res.max(r);
            if r > 1e-8 || !self.u.contains(&u, 1e-8) {
                flagged_cells.push(i);
            }
            if ext.distance(&u) <= 1e-6 {
                bang += 1;
            }
            values.push(ControlValue::Vector(u));
        }
        let control = PiecewiseControl::new(traj.times.clone(), values).map_err(|e| BolzaError::Invalid(e.to_string()))?;
        let trajectory = integrate(
            &CostDynamics { p: self },
            &control,
            &self.x_bar.clone().push(0.0),
            (0.0, self.horizon),
            cells,
            None,
        )
        .map_err(|e| BolzaError::Invalid(e.to_string()))?;
        let cost = trajectory.end()[n];
        let below = traj.derivs.iter().filter(|d| d[n] < m - 1e-9).count();
        let v_selected = p
            .control
            .values
            .iter()
            .filter(|v| matches!(v, ControlValue::Vector(u) if u.len() == mdim + 1 && u[mdim] > 0.5))
            .count();
        Ok(BolzaSolution {
            control,
            trajectory,
            cost,
            relaxed_cost: relaxed.cost,
            gap: cost - relaxed.cost,
            m,
            bang_fraction: bang as f64 / cells as f64,
            below_m_fraction: below as f64 / traj.len() as f64,
            flagged_cells,
            max_inversion_residual: max_res,
            v_selected,
            report: p.report,
        })
    }
}

/// Times at which a piecewise control changes value.
pub fn switching_times(control: &PiecewiseControl) -> Vec<f64> {
    control
        .values
        .windows(2)
        .zip(&control.breakpoints[1..])
        .filter(|(w, _)| w[0] != w[1])
        .map(|(_, t)| *t)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_ceiling_is_one() {
        let p = BolzaProblem::concave_1d();
        let om = p.omega();
        assert!((om.lo[0] + OMEGA_MARGIN).abs() < 1e-15 && (om.hi[0] - OMEGA_MARGIN).abs() < 1e-15);
        let SystemDescriptor::BolzaExtended(be) = p.extend_to_mayer(9).unwrap() else {
            unreachable!()
        };
        assert!((be.m - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_cost_structure() {
        let mut p = BolzaProblem::concave_1d();
        p.alpha = Arc::new(|_, _: &DVector<f64>| 0.0);
        let sys = p.extend_to_mayer(5).unwrap();
        // F does not depend on x0
        let b1 = sys.f_of(0.2, &dvector![0.3, -4.0]).unwrap();
        let b2 = sys.f_of(0.2, &dvector![0.3, 9.0]).unwrap();
        assert_eq!(b1, b2);
        let mut v = sys.ext_f(0.0, &dvector![0.0, 0.0]).unwrap();
        if let crate::convex::ExtremePoints::Finite(ref mut pts) = v {
            pts.sort_by(|a, b| a.as_slice().partial_cmp(b.as_slice()).unwrap());
            assert_eq!(
                pts,
                &vec![dvector![-1.0, 0.0], dvector![-1.0, 1.0], dvector![1.0, 0.0], dvector![1.0, 1.0]]
            );
        } else {
            panic!()
        }
    }

    fn grid3() -> Vec<DVector<f64>> {
        vec![dvector![-1.0], dvector![0.0], dvector![1.0]]
    }

    #[test]
    fn oracle_reaches_minus_one_third() {
        let p = BolzaProblem::concave_1d();
        let r = p.brute_force_oracle(8, &grid3(), OracleMode::Exhaustive { limit: 1 << 20 }).unwrap();
        // x = t with u = 1 (or x = -t): cost -int t^2 = -1/3, exact under RK4
        assert!((r.cost + 1.0 / 3.0).abs() < 1e-12, "{}", r.cost);
        assert!(r.control.iter().all(|&j| j == r.control[0]) && r.control[0] != 1);
        assert_eq!(r.evaluations, 6561);
        let beam = p.brute_force_oracle(32, &grid3(), OracleMode::Beam { width: 16 }).unwrap();
        assert!((beam.cost + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_edges() {
        let mut p = BolzaProblem::concave_1d();
        assert!(matches!(
            p.brute_force_oracle(20, &grid3(), OracleMode::Exhaustive { limit: 1_000_000 }),
            Err(BolzaError::CombinatorialLimit(_))
        ));
        p.alpha = Arc::new(|_, _: &DVector<f64>| 0.0);
        let r = p.brute_force_oracle(4, &grid3(), OracleMode::Exhaustive { limit: 1000 }).unwrap();
        assert_eq!(r.cost, 0.0);
        p.horizon = 0.0;
        assert_eq!(p.brute_force_oracle(4, &grid3(), OracleMode::Beam { width: 2 }).unwrap().cost, 0.0);
    }

    #[test]
    fn relaxed_optimum_is_minus_one_third() {
        let p = BolzaProblem::concave_1d();
        let r = p.solve_relaxed(64, 9, &RelaxedOptions::default()).unwrap();
        assert!((r.cost + 1.0 / 3.0).abs() < 1e-9, "{}", r.cost);
    }

    #[test]
    fn trivial_relaxed_costs() {
        let mut p = BolzaProblem::concave_1d();
        p.alpha = Arc::new(|_, _: &DVector<f64>| 0.0);
        let r = p.solve_relaxed(8, 5, &RelaxedOptions::default()).unwrap();
        assert_eq!(r.cost, 0.0);
        p.beta = Arc::new(|_, u: &DVector<f64>| u.norm_squared());
        let r = p.solve_relaxed(8, 5, &RelaxedOptions::default()).unwrap();
        assert!(r.cost.abs() < 1e-15);
        // all mass on the sample u = 0
        assert!(r.weights.iter().all(|w| (w[2] - 1.0).abs() < 1e-12));
    }

    #[test]
    fn point_target_is_met_or_reported() {
        let mut p = BolzaProblem::concave_1d();
        p.terminal = TerminalSet::Point(dvector![0.5]);
        let r = p.solve_relaxed(16, 5, &RelaxedOptions::default()).unwrap();
        assert!(r.terminal_violation <= 1e-6);
        p.terminal = TerminalSet::Point(dvector![3.0]);
        assert!(matches!(
            p.solve_relaxed(8, 5, &RelaxedOptions::default()),
            Err(BolzaError::TerminalInfeasible(_))
        ));
    }

    #[test]
    fn extraction_on_concave_problem() {
        let p = BolzaProblem::concave_1d();
        let r = p.solve_relaxed(32, 9, &RelaxedOptions::default()).unwrap();
        let s = p.purify_and_extract(9, &r, 8, 1e-4, &PurifyOptions::default()).unwrap();
        assert!((s.cost + 1.0 / 3.0).abs() < 1e-3, "{}", s.cost);
        assert!(s.bang_fraction >= 0.99, "{}", s.bang_fraction);
        assert!(s.below_m_fraction >= 0.99, "{}", s.below_m_fraction);
        assert!(s.flagged_cells.is_empty());
        assert_eq!(s.v_selected, 0);
    }

    #[test]
    fn switching_times_of_two_pieces() {
        let c = PiecewiseControl::new(
            vec![0.0, 0.25, 0.5, 1.0],
            vec![
                ControlValue::Vector(dvector![1.0]),
                ControlValue::Vector(dvector![1.0]),
                ControlValue::Vector(dvector![-1.0]),
            ],
        )
        .unwrap();
        assert_eq!(switching_times(&c), vec![0.5]);
    }
}
