//! Trajectories on uniform grids, piecewise controls and RK4 integration.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::systems::{AffineSelection, Bounds, SystemDescriptor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("state left the domain box at t = {time}")]
    DomainEscape { time: f64 },
    #[error("grids differ: {0}")]
    GridMismatch(String),
    #[error("invalid integration request: {0}")]
    Invalid(String),
    #[error("control index {0} has no selection")]
    MissingSelection(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlValue {
    /// Index into a list of affine selections.
    Index(usize),
    /// Control parameter passed to [`SystemDescriptor::rhs`].
    Vector(DVector<f64>),
}

/// Right-continuous piecewise-constant control on `[breakpoints[0], breakpoints[last]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseControl {
    pub breakpoints: Vec<f64>,
    pub values: Vec<ControlValue>,
}

impl PiecewiseControl {
    pub fn new(breakpoints: Vec<f64>, values: Vec<ControlValue>) -> Result<Self, TrajectoryError> {
        if breakpoints.len() != values.len() + 1 || values.is_empty() {
            return Err(TrajectoryError::Invalid(format!(
                "{} breakpoints for {} cells",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TrajectoryError::Invalid("breakpoints must increase".into()));
        }
        Ok(PiecewiseControl { breakpoints, values })
    }

    pub fn constant(a: f64, b: f64, value: ControlValue) -> Self {
        PiecewiseControl {
            breakpoints: vec![a, b],
            values: vec![value],
        }
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    /// Cell containing `t`; the last cell is closed on the right.
    pub fn cell_at(&self, t: f64) -> usize {
        let k = self.breakpoints.partition_point(|&b| b <= t);
        k.saturating_sub(1).min(self.values.len() - 1)
    }

    pub fn value_at(&self, t: f64) -> &ControlValue {
        &self.values[self.cell_at(t)]
    }

    /// Concatenates controls on adjacent intervals.
    pub fn concat(parts: Vec<PiecewiseControl>) -> Self {
        let mut breakpoints = Vec::new();
        let mut values = Vec::new();
        for (k, p) in parts.into_iter().enumerate() {
            if k == 0 {
                breakpoints.extend(p.breakpoints);
            } else {
                breakpoints.extend(p.breakpoints.into_iter().skip(1));
            }
            values.extend(p.values);
        }
        PiecewiseControl { breakpoints, values }
    }
}

/// States and derivative samples on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub derivs: Vec<DVector<f64>>,
    pub feasible: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |x| x.len())
    }

    pub fn start(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn end(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn step(&self) -> f64 {
        (self.times[self.len() - 1] - self.times[0]) / (self.len() - 1) as f64
    }

    /// Piecewise-linear interpolation of the state.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let n = self.len();
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t).max(1) - 1;
        let s = (t - self.times[k]) / (self.times[k + 1] - self.times[k]);
        &self.states[k] * (1.0 - s) + &self.states[k + 1] * s
    }

    /// Marks nodes whose derivative sample lies within `tol` of `F(t, x)`.
    pub fn mark_feasibility(&mut self, system: &SystemDescriptor, tol: f64) {
        for i in 0..self.len() {
            self.feasible[i] = system
                .f_of(self.times[i], &self.states[i])
                .map(|b| b.contains(&self.derivs[i], tol))
                .unwrap_or(false);
        }
    }

    /// CSV with columns `t, x_1..x_n, d_1..d_n, feasible`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("d_{i}")));
        header.push("feasible".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row = vec![format!("{:.17e}", self.times[i])];
            row.extend(self.states[i].iter().map(|v| format!("{v:.17e}")));
            row.extend(self.derivs[i].iter().map(|v| format!("{v:.17e}")));
            row.push(if self.feasible[i] { "1" } else { "0" }.into());
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Dynamics evaluated by the integrator for a given control value.
pub trait Dynamics: Sync {
    fn eval(&self, t: f64, x: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError>;
}

/// A system driven by `ControlValue::Vector`, and optionally by indexed affine selections.
pub struct SystemDynamics<'a> {
    pub system: &'a SystemDescriptor,
    pub selections: &'a [AffineSelection],
}

impl<'a> SystemDynamics<'a> {
    pub fn new(system: &'a SystemDescriptor) -> Self {
        SystemDynamics {
            system,
            selections: &[],
        }
    }
}

impl Dynamics for SystemDynamics<'_> {
    fn eval(&self, t: f64, x: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError> {
        match value {
            ControlValue::Vector(u) => Ok(self.system.rhs(t, x, u)),
            ControlValue::Index(i) => self
                .selections
                .get(*i)
                .map(|s| s.eval(x))
                .ok_or(TrajectoryError::MissingSelection(*i)),
        }
    }
}

/// Frozen affine fields `z -> A z + c_i` selected by `ControlValue::Index(i)`.
pub struct AffineFan<'a> {
    pub a: &'a DMatrix<f64>,
    pub c: &'a [DVector<f64>],
}

impl Dynamics for AffineFan<'_> {
    fn eval(&self, _t: f64, x: &DVector<f64>, value: &ControlValue) -> Result<DVector<f64>, TrajectoryError> {
        match value {
            ControlValue::Index(i) => self
                .c
                .get(*i)
                .map(|c| self.a * x + c)
                .ok_or(TrajectoryError::MissingSelection(*i)),
            ControlValue::Vector(_) => Err(TrajectoryError::Invalid("affine fan takes indices".into())),
        }
    }
}

fn rk4_step<D: Dynamics + ?Sized>(
    dyn_: &D,
    t: f64,
    x: &DVector<f64>,
    h: f64,
    v: &ControlValue,
) -> Result<DVector<f64>, TrajectoryError> {
    let k1 = dyn_.eval(t, x, v)?;
    let k2 = dyn_.eval(t + 0.5 * h, &(x + &k1 * (0.5 * h)), v)?;
    let k3 = dyn_.eval(t + 0.5 * h, &(x + &k2 * (0.5 * h)), v)?;
    let k4 = dyn_.eval(t + h, &(x + &k3 * h), v)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Classical RK4 with `n` uniform steps on `[a, b]`. Control switches inside a
/// step split it into sub-steps, so accuracy is fourth order on each piece.
pub fn integrate<D: Dynamics + ?Sized>(
    dynamics: &D,
    control: &PiecewiseControl,
    x0: &DVector<f64>,
    interval: (f64, f64),
    n: usize,
    domain: Option<&Bounds>,
) -> Result<Trajectory, TrajectoryError> {
    let (a, b) = interval;
    if n == 0 || !(b > a) {
        return Err(TrajectoryError::Invalid(format!("n = {n} on [{a}, {b}]")));
    }
    let cb = &control.breakpoints;
    let tol = 1e-12 * (b - a).max(1.0);
    if cb[0] > a + tol || cb[cb.len() - 1] < b - tol {
        return Err(TrajectoryError::Invalid("control does not cover the interval".into()));
    }
    let h = (b - a) / n as f64;
    let times: Vec<f64> = (0..=n).map(|i| if i == n { b } else { a + i as f64 * h }).collect();
    let mut states = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut x = x0.clone();
    states.push(x.clone());
    for i in 0..n {
        let (t0, t1) = (times[i], times[i + 1]);
        let mut pieces = vec![t0];
        let lo = cb.partition_point(|&s| s <= t0 + tol);
        for &s in &cb[lo..] {
            if s >= t1 - tol {
                break;
            }
            pieces.push(s);
        }
        pieces.push(t1);
        derivs.push(dynamics.eval(t0, &x, control.value_at(t0 + 0.5 * (pieces[1] - t0)))?);
        for w in pieces.windows(2) {
            let v = control.value_at(0.5 * (w[0] + w[1]));
            x = rk4_step(dynamics, w[0], &x, w[1] - w[0], v)?;
        }
        if let Some(d) = domain {
            if !d.contains(&x) || x.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::DomainEscape { time: t1 });
            }
        }
        states.push(x.clone());
    }
    // last node: left limit of the control
    let last = control.value_at(b - 0.5 * h.min(b - cb[cb.len() - 2]));
    derivs.push(dynamics.eval(b, &x, last)?);
    Ok(Trajectory {
        feasible: vec![true; n + 1],
        times,
        states,
        derivs,
    })
}

/// `W(t, s)` solving `W' = A(tau) W`, `W(s, s) = I`, by `n` RK4 steps.
pub fn fundamental_matrix(a: &dyn Fn(f64) -> DMatrix<f64>, s: f64, t: f64, n: usize) -> DMatrix<f64> {
    let dim = a(s).nrows();
    let mut w = DMatrix::<f64>::identity(dim, dim);
    if t <= s || n == 0 {
        return w;
    }
    let h = (t - s) / n as f64;
    for i in 0..n {
        let tau = s + i as f64 * h;
        let k1 = a(tau) * &w;
        let k2 = a(tau + 0.5 * h) * (&w + &k1 * (0.5 * h));
        let k3 = a(tau + 0.5 * h) * (&w + &k2 * (0.5 * h));
        let k4 = a(tau + h) * (&w + &k3 * h);
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    w
}

/// `max_i |x1_i - x2_i|` over a shared grid.
pub fn c0_distance(t1: &Trajectory, t2: &Trajectory) -> Result<f64, TrajectoryError> {
    if t1.len() != t2.len() {
        return Err(TrajectoryError::GridMismatch(format!("{} vs {} nodes", t1.len(), t2.len())));
    }
    let mut d: f64 = 0.0;
    for i in 0..t1.len() {
        if (t1.times[i] - t2.times[i]).abs() > 1e-12 * t1.times[i].abs().max(1.0) {
            return Err(TrajectoryError::GridMismatch(format!("node {i}")));
        }
        d = d.max((&t1.states[i] - &t2.states[i]).norm());
    }
    Ok(d)
}

/// `max` over the nodes of `fine` of the distance to `coarse` interpolated linearly.
pub fn c0_distance_interpolated(fine: &Trajectory, coarse: &Trajectory) -> f64 {
    fine.times
        .iter()
        .zip(&fine.states)
        .map(|(t, x)| (x - coarse.state_at(*t)).norm())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::catalog;
    use nalgebra::dvector;
    use std::sync::Arc;

    fn scalar_system(a: f64) -> SystemDescriptor {
        SystemDescriptor::LinearControl {
            a: Arc::new(move |_| DMatrix::from_element(1, 1, a)),
            b: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
            u: crate::convex::ConvexBody::segment(dvector![-1.0], dvector![1.0]).unwrap(),
        }
    }

    #[test]
    fn constant_control_is_exact() {
        let s = scalar_system(0.0);
        let c = PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0]));
        let tr = integrate(&SystemDynamics::new(&s), &c, &dvector![0.0], (0.0, 1.0), 7, None).unwrap();
        for (t, x) in tr.times.iter().zip(&tr.states) {
            assert!((x[0] - t).abs() < 1e-15);
        }
    }

    #[test]
    fn exponential_growth() {
        let s = scalar_system(1.0);
        let c = PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![0.0]));
        let tr = integrate(&SystemDynamics::new(&s), &c, &dvector![1.0], (0.0, 1.0), 100, None).unwrap();
        assert!((tr.end()[0] - 1f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn counterexample_reference() {
        let e = catalog("counterexample-6").unwrap();
        let tr = integrate(&SystemDynamics::new(&e.system), &e.reference, &e.x0, e.interval, 100, None).unwrap();
        assert!(tr.end()[0].abs() < 1e-12);
        assert!((tr.end()[1] - 1f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn switch_inside_step() {
        // x' = u with u = 1 on [0, 0.3), -1 after: x(1) = 0.3 - 0.7
        let s = scalar_system(0.0);
        let c = PiecewiseControl::new(
            vec![0.0, 0.3, 1.0],
            vec![ControlValue::Vector(dvector![1.0]), ControlValue::Vector(dvector![-1.0])],
        )
        .unwrap();
        let tr = integrate(&SystemDynamics::new(&s), &c, &dvector![0.0], (0.0, 1.0), 4, None).unwrap();
        assert!((tr.end()[0] + 0.4).abs() < 1e-14);
        assert_eq!(tr.derivs[1][0], 1.0);
        assert_eq!(tr.derivs[4][0], -1.0);
    }

    #[test]
    fn domain_escape() {
        let s = scalar_system(0.0);
        let c = PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0]));
        let err = integrate(
            &SystemDynamics::new(&s),
            &c,
            &dvector![0.0],
            (0.0, 1.0),
            10,
            Some(&Bounds::cube(1, 0.55)),
        )
        .unwrap_err();
        match err {
            TrajectoryError::DomainEscape { time } => assert!((time - 0.6).abs() < 1e-12),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn rk4_order() {
        let e = catalog("radial-square").unwrap();
        let dy = SystemDynamics::new(&e.system);
        let end = |n| integrate(&dy, &e.reference, &e.x0, e.interval, n, None).unwrap().end().clone();
        let exact = end(2048);
        let e1 = (end(32) - &exact).norm();
        let e2 = (end(64) - &exact).norm();
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn fundamental_matrix_examples() {
        let zero = |_: f64| DMatrix::<f64>::zeros(2, 2);
        assert_eq!(fundamental_matrix(&zero, 0.0, 1.0, 10), DMatrix::identity(2, 2));
        let a = |_: f64| DMatrix::from_element(1, 1, 0.7);
        assert!((fundamental_matrix(&a, 0.0, 1.0, 100)[(0, 0)] - 0.7f64.exp()).abs() < 1e-8);
        let nil = |_: f64| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let w = fundamental_matrix(&nil, 0.25, 1.0, 3);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.75, 0.0, 1.0]);
        assert!((w - want).amax() < 1e-14);
    }

    #[test]
    fn cocycle() {
        let a = |t: f64| DMatrix::from_row_slice(2, 2, &[t.sin(), 1.0, -1.0, 0.3 * t]);
        for &r in &[0.2, 0.5, 0.77] {
            let full = fundamental_matrix(&a, 0.0, 1.0, 400);
            let split = fundamental_matrix(&a, r, 1.0, 400) * fundamental_matrix(&a, 0.0, r, 400);
            assert!((full - split).amax() < 1e-7);
        }
    }

    #[test]
    fn distances() {
        let s = scalar_system(0.0);
        let dy = SystemDynamics::new(&s);
        let zero = integrate(
            &dy,
            &PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![0.0])),
            &dvector![0.0],
            (0.0, 1.0),
            10,
            None,
        )
        .unwrap();
        let ramp = integrate(
            &dy,
            &PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0])),
            &dvector![0.0],
            (0.0, 1.0),
            10,
            None,
        )
        .unwrap();
        assert_eq!(c0_distance(&zero, &zero).unwrap(), 0.0);
        assert!((c0_distance(&zero, &ramp).unwrap() - 1.0).abs() < 1e-15);
        let short = integrate(
            &dy,
            &PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0])),
            &dvector![0.0],
            (0.0, 1.0),
            5,
            None,
        )
        .unwrap();
        assert!(matches!(c0_distance(&zero, &short), Err(TrajectoryError::GridMismatch(_))));
    }

    #[test]
    fn csv_header_and_rows() {
        let s = scalar_system(0.0);
        let tr = integrate(
            &SystemDynamics::new(&s),
            &PiecewiseControl::constant(0.0, 1.0, ControlValue::Vector(dvector![1.0])),
            &dvector![0.0],
            (0.0, 1.0),
            2,
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x_1,d_1,feasible");
        assert_eq!(lines.len(), 4);
    }
}
