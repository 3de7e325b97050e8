//! Purification of relaxed trajectories into extreme-velocity trajectories.
//!
//! `[a, b]` is split into `k` intervals and each interval into base cells. On
//! every base cell the reference secant slope is represented by an affine
//! bundle: the (C2) fan where it exists, a (C1) fallback elsewhere. The
//! exchange assigns a single bundle index per sub-piece, and each index is
//! realized with the true dynamics through the control that generates the
//! matching extreme velocity. The frozen model drifts from the true dynamics
//! by O(h^2) per cell, so the exchange target is corrected by the realized
//! endpoint miss a few times before the grid is refined.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{ConvexBody, ExtremePoints};
use crate::exchange::{exchange_at_level, BundleCell, CellKind, ExchangeError, ExchangeResult, SelectionBundle};
use crate::systems::{
    counterexample_v, CatalogEntry, decompose, AffineSelection, SelectionOptions, SystemDescriptor,
    SystemError,
};
use crate::trajectory::{integrate, ControlValue, Dynamics, PiecewiseControl, SystemDynamics, Trajectory, TrajectoryError};
use crate::variance::{likelihood, Quadrature, VarianceError};

#[derive(Debug, Error)]
pub enum PurifyError {
    #[error("invalid purification request: {0}")]
    Invalid(String),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error("expected the counterexample system, got {0}")]
    WrongSystem(&'static str),
    #[error("interval {interval} could not be realized: {source}")]
    Realization {
        interval: usize,
        source: TrajectoryError,
    },
}

/// Bundle used on cells where (C2) fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CellFallback {
    /// Single (C1) selection through the reference slope: the cell keeps its
    /// relaxed velocity.
    #[default]
    AffineSelection,
    /// (C1) linear part with the extreme points of the decomposition, so the
    /// cell is still exchanged into extreme velocities.
    ExtremeFan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurifyOptions {
    /// Endpoint tolerance per interval.
    pub tol: f64,
    pub cells_per_interval: usize,
    /// Integration steps per fine cell of the output grid.
    pub substeps: usize,
    pub min_level: u32,
    pub max_level: u32,
    /// Target corrections per level.
    pub corrections: usize,
    pub fallback: CellFallback,
    pub selection: SelectionOptions,
    /// Distance to `ext F` accepted as extreme.
    pub extreme_tol: f64,
}

impl Default for PurifyOptions {
    fn default() -> Self {
        PurifyOptions {
            tol: 1e-7,
            cells_per_interval: 4,
            substeps: 2,
            min_level: 0,
            max_level: 8,
            corrections: 8,
            fallback: CellFallback::AffineSelection,
            selection: SelectionOptions::default(),
            extreme_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntervalReport {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Level of the first success with pinned endpoints, if any.
    pub level_found: Option<u32>,
    pub endpoint_error: f64,
    pub tol_met: bool,
    pub fan_cells: usize,
    pub fallback_cells: usize,
    /// Cells where the (C1) selection also failed.
    pub c1_failures: usize,
    /// First (C2) failure message on the interval.
    pub c2_error: Option<String>,
    pub tube_radius: f64,
    pub tube_max: f64,
    pub tube_violations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurificationReport {
    pub system: String,
    pub k: usize,
    pub eps: f64,
    pub tol: f64,
    pub interval: (f64, f64),
    /// Common fine level of the assembled trajectory.
    pub level: u32,
    pub intervals: Vec<IntervalReport>,
    pub endpoint_errors: Vec<f64>,
    pub max_endpoint_error: f64,
    pub all_tol_met: bool,
    pub c0_distance: f64,
    /// `2 M (b - a) / k`.
    pub c0_bound: f64,
    pub l_before: f64,
    pub l_after: f64,
    /// Sup of `|F|` over the reference and the purified trajectory.
    pub m_bound: f64,
    /// `eps ((b - a) + M^2)`.
    pub final_bound: f64,
    /// Half the smallest validity radius over the cells.
    pub eta: f64,
    pub tube_violations: usize,
    pub c2_infeasible_cells: usize,
    pub total_cells: usize,
    /// Fraction of output nodes whose derivative lies within `extreme_tol` of `ext F`.
    pub extremal_fraction: f64,
    pub infeasible_nodes: usize,
}

impl PurificationReport {
    /// Short machine-readable flag list (`ok` when nothing is flagged).
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if !self.all_tol_met {
            let n = self.intervals.iter().filter(|r| !r.tol_met).count();
            f.push(format!("tol_not_met={n}"));
        }
        if self.c2_infeasible_cells > 0 {
            f.push(format!("c2_infeasible={}", self.c2_infeasible_cells));
        }
        if self.tube_violations > 0 {
            f.push(format!("tube={}", self.tube_violations));
        }
        if self.infeasible_nodes > 0 {
            f.push(format!("infeasible_nodes={}", self.infeasible_nodes));
        }
        if f.is_empty() {
            "ok".into()
        } else {
            f.join(";")
        }
    }
}

#[derive(Debug, Clone)]
pub struct Purified {
    pub trajectory: Trajectory,
    /// `Vector` values drive [`SystemDescriptor::rhs`]; `Index` values refer to `selections`.
    pub control: PiecewiseControl,
    pub selections: Vec<AffineSelection>,
    pub report: PurificationReport,
}

/// Reference trajectory of a catalog entry on `n` RK4 steps.
pub fn reference_trajectory(entry: &CatalogEntry, n: usize) -> Result<Trajectory, PurifyError> {
    let dom = entry.system.domain();
    Ok(integrate(
        &SystemDynamics::new(&entry.system),
        &entry.reference,
        &entry.x0,
        entry.interval,
        n,
        dom.as_ref(),
    )?)
}

fn sup_norm(body: &ConvexBody) -> f64 {
    match body.extreme_points() {
        ExtremePoints::Finite(p) => p.iter().map(|v| v.norm()).fold(0.0, f64::max),
        ExtremePoints::Sphere { center, radius } => center.norm() + radius,
    }
}

/// Controls generating each point, when some extreme control hits it.
fn match_generators(
    system: &SystemDescriptor,
    t: f64,
    x: &DVector<f64>,
    points: &[DVector<f64>],
) -> Vec<Option<DVector<f64>>> {
    let cands: Vec<(DVector<f64>, DVector<f64>)> = system
        .extreme_controls(t, x)
        .into_iter()
        .map(|u| (system.rhs(t, x, &u), u))
        .collect();
    points
        .iter()
        .map(|p| {
            cands
                .iter()
                .map(|(v, u)| ((v - p).norm(), u))
                .filter(|(d, _)| *d <= 1e-9 * (1.0 + p.norm()))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, u)| u.clone())
        })
        .collect()
}

struct CellInfo {
    radius: f64,
    c2_error: Option<String>,
    c1_failed: bool,
}

fn build_cell(
    system: &SystemDescriptor,
    reference: &Trajectory,
    (cs, ce): (f64, f64),
    eps: f64,
    opts: &PurifyOptions,
) -> Result<(BundleCell, CellInfo), PurifyError> {
    let tm = 0.5 * (cs + ce);
    let xm = reference.state_at(tm);
    let slope = (reference.state_at(ce) - reference.state_at(cs)) / (ce - cs);
    let body = system.f_of(tm, &xm)?;
    let y = body.project(&slope);
    let ext = system.ext_f(tm, &xm)?;
    let with_points = |a: DMatrix<f64>, points: Vec<DVector<f64>>, theta: Vec<f64>, kind| {
        let ax = &a * &xm;
        let c = points.iter().map(|p| p - &ax).collect();
        let mut cell = BundleCell::new(a, c, theta, kind);
        cell.generators = match_generators(system, tm, &xm, &points);
        cell
    };
    match system.eps_selections_c2(tm, &xm, &y, eps, &opts.selection) {
        Ok(fan) => {
            let cell = with_points(fan.a, fan.extreme_points, fan.theta, CellKind::Fan);
            Ok((
                cell,
                CellInfo {
                    radius: fan.delta,
                    c2_error: None,
                    c1_failed: false,
                },
            ))
        }
        Err(e) => {
            let (a, radius, c1_failed) = match system.affine_selection_c1(tm, &xm, &y, &opts.selection) {
                Ok(s) => (s.a, s.validity_radius, false),
                Err(_) => (DMatrix::zeros(xm.len(), xm.len()), 0.0, true),
            };
            let cell = match opts.fallback {
                CellFallback::AffineSelection => with_points(a, vec![y], vec![1.0], CellKind::AffineFallback),
                CellFallback::ExtremeFan => {
                    let (points, theta) = decompose(&body, &ext, &y);
                    with_points(a, points, theta, CellKind::ExtremeFallback)
                }
            };
            Ok((
                cell,
                CellInfo {
                    radius,
                    c2_error: Some(e.to_string()),
                    c1_failed,
                },
            ))
        }
    }
}

struct Realized {
    trajectory: Trajectory,
    control: PiecewiseControl,
    selections: Vec<AffineSelection>,
}

/// Integrates the true dynamics along an exchange assignment.
fn realize(
    system: &SystemDescriptor,
    bundle: &SelectionBundle,
    r: &ExchangeResult,
    x_start: &DVector<f64>,
    steps: usize,
) -> Result<Realized, TrajectoryError> {
    let mut selections = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut values = Vec::with_capacity(r.control.values.len());
    for (p, v) in r.control.values.iter().enumerate() {
        let ControlValue::Index(i) = v else {
            return Err(TrajectoryError::Invalid("exchange produced a vector control".into()));
        };
        let k = r.piece_cells[p];
        let cell = &bundle.cells[k];
        values.push(match &cell.generators[*i] {
            Some(u) => ControlValue::Vector(u.clone()),
            None => {
                let idx = *seen.entry((k, *i)).or_insert_with(|| {
                    selections.push(AffineSelection {
                        a: cell.a.clone(),
                        c: cell.c[*i].clone(),
                        validity_radius: f64::INFINITY,
                    });
                    selections.len() - 1
                });
                ControlValue::Index(idx)
            }
        });
    }
    let control = PiecewiseControl {
        breakpoints: r.control.breakpoints.clone(),
        values,
    };
    let dyn_ = SystemDynamics {
        system,
        selections: &selections,
    };
    let dom = system.domain();
    let trajectory = integrate(&dyn_, &control, x_start, (bundle.start, bundle.end), steps, dom.as_ref())?;
    Ok(Realized {
        trajectory,
        control,
        selections,
    })
}

/// Exchange plus realization at a fixed level with target correction.
fn solve_at_level(
    system: &SystemDescriptor,
    bundle: &SelectionBundle,
    x_start: &DVector<f64>,
    x_target: &DVector<f64>,
    level: u32,
    opts: &PurifyOptions,
) -> Result<(Realized, f64), TrajectoryError> {
    let steps = (opts.cells_per_interval << level) * opts.substeps.max(1);
    let mut target = x_target.clone();
    let mut best: Option<(Realized, f64)> = None;
    let mut prev = f64::INFINITY;
    for _ in 0..=opts.corrections {
        let r = exchange_at_level(bundle, x_start, &target, level);
        let real = realize(system, bundle, &r, x_start, steps)?;
        let miss = real.trajectory.end() - x_target;
        let err = miss.norm();
        let improved = best.as_ref().is_none_or(|b| err < b.1);
        if improved {
            best = Some((real, err));
        }
        if err <= opts.tol || err > 0.5 * prev {
            break;
        }
        prev = err;
        target -= miss;
    }
    Ok(best.expect("at least one attempt"))
}

struct IntervalSetup {
    bundle: SelectionBundle,
    infos: Vec<CellInfo>,
}

fn setup_interval(
    system: &SystemDescriptor,
    reference: &Trajectory,
    s: f64,
    e: f64,
    eps: f64,
    opts: &PurifyOptions,
) -> Result<IntervalSetup, PurifyError> {
    let m = opts.cells_per_interval;
    let mut cells = Vec::with_capacity(m);
    let mut infos = Vec::with_capacity(m);
    for c in 0..m {
        let cs = s + (e - s) * c as f64 / m as f64;
        let ce = if c + 1 == m { e } else { s + (e - s) * (c + 1) as f64 / m as f64 };
        let (cell, info) = build_cell(system, reference, (cs, ce), eps, opts)?;
        cells.push(cell);
        infos.push(info);
    }
    Ok(IntervalSetup {
        bundle: SelectionBundle::new(s, e, cells)?,
        infos,
    })
}

/// Splits `[a, b]` into `k` intervals, exchanges each with both endpoints
/// pinned to the reference, and assembles the realized trajectory.
pub fn purify(
    system: &SystemDescriptor,
    reference: &Trajectory,
    k: usize,
    eps: f64,
    opts: &PurifyOptions,
) -> Result<Purified, PurifyError> {
    if k == 0 || opts.cells_per_interval == 0 || reference.len() < 2 {
        return Err(PurifyError::Invalid("k, cells per interval and the reference must be non-empty".into()));
    }
    if !(eps > 0.0) || !(opts.tol > 0.0) {
        return Err(PurifyError::Invalid(format!("eps = {eps}, tol = {} must be positive", opts.tol)));
    }
    if reference.dim() != system.dim() {
        return Err(PurifyError::Invalid("reference dimension differs from the system".into()));
    }
    let (a, b) = (reference.times[0], reference.times[reference.len() - 1]);
    let knots: Vec<f64> = (0..=k).map(|j| if j == k { b } else { a + (b - a) * j as f64 / k as f64 }).collect();
    let pins: Vec<DVector<f64>> = knots.iter().map(|t| reference.state_at(*t)).collect();

    // pinned pass, in parallel: bundles and the level each interval needs
    let levels = opts.min_level..=opts.max_level.max(opts.min_level);
    let setups: Vec<(IntervalSetup, Option<u32>)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let setup = setup_interval(system, reference, knots[j], knots[j + 1], eps, opts)?;
            let mut found = None;
            for level in levels.clone() {
                match solve_at_level(system, &setup.bundle, &pins[j], &pins[j + 1], level, opts) {
                    Ok((_, err)) if err <= opts.tol => {
                        found = Some(level);
                        break;
                    }
                    _ => {}
                }
            }
            Ok((setup, found))
        })
        .collect::<Result<_, PurifyError>>()?;
    let level = setups
        .iter()
        .map(|(_, l)| l.unwrap_or(opts.max_level.max(opts.min_level)))
        .max()
        .unwrap_or(opts.min_level);

    // sequential pass at the common level, chained through realized endpoints
    let mut x = pins[0].clone();
    let mut traj: Option<Trajectory> = None;
    let mut parts = Vec::with_capacity(k);
    let mut selections: Vec<AffineSelection> = Vec::new();
    let mut reports = Vec::with_capacity(k);
    for (j, (setup, found)) in setups.iter().enumerate() {
        let (real, err) = solve_at_level(system, &setup.bundle, &x, &pins[j + 1], level, opts)
            .map_err(|source| PurifyError::Realization { interval: j, source })?;
        let offset = selections.len();
        selections.extend(real.selections);
        let values = real
            .control
            .values
            .into_iter()
            .map(|v| match v {
                ControlValue::Index(i) => ControlValue::Index(i + offset),
                v => v,
            })
            .collect();
        parts.push(PiecewiseControl {
            breakpoints: real.control.breakpoints,
            values,
        });

        let t = real.trajectory;
        let (s, e) = (knots[j], knots[j + 1]);
        let m = setup.infos.len();
        let tube_radius = setup.infos.iter().map(|i| i.radius).fold(f64::INFINITY, f64::min);
        let mut tube_max: f64 = 0.0;
        let mut tube_violations = 0;
        for (ti, xi) in t.times.iter().zip(&t.states) {
            let d = (xi - reference.state_at(*ti)).norm();
            let c = (((ti - s) / (e - s) * m as f64) as usize).min(m - 1);
            tube_max = tube_max.max(d);
            if d > setup.infos[c].radius {
                tube_violations += 1;
            }
        }
        let fan_cells = setup.bundle.cells.iter().filter(|c| c.kind == CellKind::Fan).count();
        reports.push(IntervalReport {
            index: j,
            start: s,
            end: e,
            level_found: *found,
            endpoint_error: err,
            tol_met: err <= opts.tol,
            fan_cells,
            fallback_cells: m - fan_cells,
            c1_failures: setup.infos.iter().filter(|i| i.c1_failed).count(),
            c2_error: setup.infos.iter().find_map(|i| i.c2_error.clone()),
            tube_radius,
            tube_max,
            tube_violations,
        });

        x = t.end().clone();
        traj = Some(match traj {
            None => t,
            Some(mut acc) => {
                acc.times.pop();
                acc.states.pop();
                acc.derivs.pop();
                acc.feasible.pop();
                acc.times.extend(t.times);
                acc.states.extend(t.states);
                acc.derivs.extend(t.derivs);
                acc.feasible.extend(t.feasible);
                acc
            }
        });
    }
    let mut trajectory = traj.expect("k >= 1");
    trajectory.mark_feasibility(system, opts.selection.input_tol);
    let control = PiecewiseControl::concat(parts);

    let lik_tol = opts.selection.input_tol;
    let l_before = likelihood(reference, system, Quadrature::Simpson, lik_tol)?.value;
    let after = likelihood(&trajectory, system, Quadrature::Simpson, lik_tol)?;
    let mut m_bound: f64 = 0.0;
    for tr in [reference, &trajectory] {
        for (t, x) in tr.times.iter().zip(&tr.states) {
            m_bound = m_bound.max(sup_norm(&system.f_of(*t, x)?));
        }
    }
    let mut extremal = 0usize;
    for i in 0..trajectory.len() {
        let ext = system.ext_f(trajectory.times[i], &trajectory.states[i])?;
        if ext.distance(&trajectory.derivs[i]) <= opts.extreme_tol {
            extremal += 1;
        }
    }
    let endpoint_errors: Vec<f64> = reports.iter().map(|r| r.endpoint_error).collect();
    let eta = 0.5
        * setups
            .iter()
            .flat_map(|(s, _)| s.infos.iter().map(|i| i.radius))
            .fold(f64::INFINITY, f64::min);
    let report = PurificationReport {
        system: system.kind().into(),
        k,
        eps,
        tol: opts.tol,
        interval: (a, b),
        level,
        max_endpoint_error: endpoint_errors.iter().cloned().fold(0.0, f64::max),
        all_tol_met: reports.iter().all(|r| r.tol_met),
        endpoint_errors,
        c0_distance: crate::trajectory::c0_distance_interpolated(&trajectory, reference),
        c0_bound: 2.0 * m_bound * (b - a) / k as f64,
        l_before,
        l_after: after.value,
        m_bound,
        final_bound: eps * ((b - a) + m_bound * m_bound),
        eta,
        tube_violations: reports.iter().map(|r| r.tube_violations).sum(),
        c2_infeasible_cells: setups
            .iter()
            .flat_map(|(s, _)| &s.infos)
            .filter(|i| i.c2_error.is_some())
            .count(),
        total_cells: k * opts.cells_per_interval,
        extremal_fraction: extremal as f64 / trajectory.len() as f64,
        infeasible_nodes: after.infeasible_nodes.len(),
        intervals: reports,
    };
    Ok(Purified {
        trajectory,
        control,
        selections,
        report,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub k: usize,
    pub eps: f64,
    pub l_before: f64,
    pub l_after: f64,
    pub c0: f64,
    pub c0_bound: f64,
    pub max_ep_err: f64,
    pub flags: String,
    pub runtime_ms: f64,
}

/// One purification per `(k, eps)` pair, in `k`-major order.
pub fn convergence_study(
    system: &SystemDescriptor,
    reference: &Trajectory,
    k_list: &[usize],
    eps_list: &[f64],
    opts: &PurifyOptions,
) -> Result<Vec<ConvergenceRow>, PurifyError> {
    let mut rows = Vec::new();
    for &k in k_list {
        for &eps in eps_list {
            let clock = Instant::now();
            let p = purify(system, reference, k, eps, opts)?;
            let r = &p.report;
            rows.push(ConvergenceRow {
                k,
                eps,
                l_before: r.l_before,
                l_after: r.l_after,
                c0: r.c0_distance,
                c0_bound: r.c0_bound,
                max_ep_err: r.max_endpoint_error,
                flags: r.flags(),
                runtime_ms: clock.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `k,eps,L_before,L_after,c0,max_ep_err,flags` (runtime is left out
/// so that repeated runs produce identical files).
pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "k,eps,L_before,L_after,c0,max_ep_err,flags")?;
    for r in rows {
        writeln!(
            w,
            "{},{:e},{:.12e},{:.12e},{:.12e},{:.12e},{}",
            r.k, r.eps, r.l_before, r.l_after, r.c0, r.max_ep_err, r.flags
        )?;
    }
    Ok(())
}

/// `e^(b-a) V(x(a)) - V(x(b))` for the counterexample, `V = x2 - x1^2 / 2`.
pub fn v_deficit(system: &SystemDescriptor, traj: &Trajectory) -> Result<f64, PurifyError> {
    if !matches!(system, SystemDescriptor::Counterexample62) {
        return Err(PurifyError::WrongSystem(system.kind()));
    }
    if traj.len() < 2 || traj.dim() != 2 {
        return Err(PurifyError::Invalid("need a planar trajectory".into()));
    }
    let span = traj.times[traj.len() - 1] - traj.times[0];
    Ok(span.exp() * counterexample_v(traj.start()) - counterexample_v(traj.end()))
}

/// Counterexample dynamics augmented with `z' = e^(b - t) x1^2 / 2`.
struct DeficitDynamics {
    b: f64,
}

impl Dynamics for DeficitDynamics {
    fn eval(&self, t: f64, s: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError> {
        let ControlValue::Vector(u) = value else {
            return Err(TrajectoryError::Invalid("the identity integral needs control values".into()));
        };
        let (x1, x2, u) = (s[0], s[1], u[0]);
        Ok(DVector::from_vec(vec![
            x1 + u,
            x2 + x1 * u,
            (self.b - t).exp() * 0.5 * x1 * x1,
        ]))
    }
}

/// `int_a^b e^(b - s) x1(s)^2 / 2 ds` along the control, which the identity
/// `V' = V - x1^2 / 2` equates with the deficit.
pub fn v_identity_integral(
    control: &PiecewiseControl,
    x0: &DVector<f64>,
    interval: (f64, f64),
    steps: usize,
) -> Result<f64, PurifyError> {
    if x0.len() != 2 {
        return Err(PurifyError::Invalid("the counterexample state is planar".into()));
    }
    let s0 = DVector::from_vec(vec![x0[0], x0[1], 0.0]);
    let t = integrate(&DeficitDynamics { b: interval.1 }, control, &s0, interval, steps, None)?;
    Ok(t.end()[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::catalog;
    use nalgebra::dvector;

    #[test]
    fn linear1d_bang_bang_and_pinned() {
        let e = catalog("linear1d").unwrap();
        let reference = reference_trajectory(&e, 2048).unwrap();
        let p = purify(&e.system, &reference, 16, 1e-3, &PurifyOptions::default()).unwrap();
        let r = &p.report;
        assert!(r.all_tol_met, "{:?}", r.endpoint_errors);
        assert!(r.max_endpoint_error <= 1e-6);
        assert!(r.l_after <= 1e-2, "{}", r.l_after);
        assert!(r.c0_distance <= r.c0_bound, "{} {}", r.c0_distance, r.c0_bound);
        assert!((r.m_bound - (1.0f64.exp() + 1.0)).abs() < 1e-2, "{}", r.m_bound);
        assert!(r.extremal_fraction >= 0.99);
        assert!((p.trajectory.end()[0] - 1.0f64.exp()).abs() <= 1e-6);
        for v in &p.control.values {
            let ControlValue::Vector(u) = v else { panic!("{v:?}") };
            assert_eq!(u[0].abs(), 1.0);
        }
    }

    #[test]
    fn extreme_reference_is_unchanged() {
        let mut e = catalog("linear1d").unwrap();
        e.reference = PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0]));
        let reference = reference_trajectory(&e, 256).unwrap();
        let p = purify(&e.system, &reference, 4, 1e-3, &PurifyOptions::default()).unwrap();
        let r = &p.report;
        assert!(r.l_before < 1e-6 && r.l_after < 1e-6);
        assert!(r.c0_distance < 1e-6, "{}", r.c0_distance);
        assert!(r.all_tol_met && r.max_endpoint_error <= 1e-7);
    }

    #[test]
    fn deficit_zero_for_zero_control_and_identity_matches() {
        let sys = SystemDescriptor::Counterexample62;
        let x0 = dvector![0.0, 1.0];
        for u in [0.0, 1.0] {
            let c = PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![u]));
            let t = integrate(&SystemDynamics::new(&sys), &c, &x0, (0.0, 1.0), 400, None).unwrap();
            let d = v_deficit(&sys, &t).unwrap();
            let id = v_identity_integral(&c, &x0, (0.0, 1.0), 400).unwrap();
            // x1 = e^t - 1 for u = 1: e int e^-s (e^s - 1)^2 / 2 ds
            let closed = if u == 0.0 {
                0.0
            } else {
                let e = 1.0f64.exp();
                0.5 * e * ((e - 1.0) - 2.0 + (1.0 - 1.0 / e))
            };
            assert!((d - closed).abs() < 1e-9, "{u}: {d} vs {closed}");
            assert!((id - closed).abs() < 1e-9, "{u}: {id} vs {closed}");
        }
        assert!(v_deficit(&catalog("linear1d").unwrap().system, &Trajectory {
            times: vec![0.0, 1.0],
            states: vec![dvector![0.0]; 2],
            derivs: vec![dvector![0.0]; 2],
            feasible: vec![true; 2],
        })
        .is_err());
    }

    #[test]
    fn csv_has_fixed_columns() {
        let rows = vec![ConvergenceRow {
            k: 4,
            eps: 1e-3,
            l_before: 1.0,
            l_after: 0.0,
            c0: 0.1,
            c0_bound: 1.0,
            max_ep_err: 1e-9,
            flags: "ok".into(),
            runtime_ms: 3.0,
        }];
        let mut buf = Vec::new();
        write_convergence_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("k,eps,L_before,L_after,c0,max_ep_err,flags"));
        assert!(lines.next().unwrap().starts_with("4,1e-3,"));
    }
}
