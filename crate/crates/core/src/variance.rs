//! The max-variance functional `h(y, K)` and the trajectory likelihood.
//!
//! `h(y, K)^2` is the largest variance of a random vector supported in `K`
//! with mean `y`. The objective `E|X - y|^2` is linear in the law of `X` and
//! is maximized by laws carried by `ext K`, so on a polytope it reduces to the
//! finite LP
//!
//! ```text
//! max  sum_i theta_i |v_i - y|^2
//! s.t. sum_i theta_i v_i = y,  sum_i theta_i = 1,  theta >= 0.
//! ```
//!
//! Balls and segments have closed forms. Points within `tol` of the body are
//! projected onto it first; points farther away give `MinusInfinity`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::ConvexBody;
use crate::lp;
use crate::systems::{SystemDescriptor, SystemError};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VarianceError {
    #[error("query has dimension {got}, body has dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported body: {0}")]
    UnsupportedBody(String),
    #[error("trajectory has fewer than two nodes")]
    EmptyGrid,
    #[error("time grid is not strictly increasing at node {0}")]
    NonMonotoneGrid(usize),
    #[error(transparent)]
    System(#[from] SystemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HValue {
    Finite(f64),
    MinusInfinity,
}

impl HValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            HValue::Finite(v) => Some(v),
            HValue::MinusInfinity => None,
        }
    }

    pub fn is_minus_infinity(self) -> bool {
        matches!(self, HValue::MinusInfinity)
    }
}

/// A finitely supported law on the vertices of a polytope attaining `h`.
#[derive(Debug, Clone)]
pub struct VertexLaw {
    /// `(vertex index, weight)` pairs with positive weight; at most `n + 1` of them.
    pub support: Vec<(usize, f64)>,
    /// The (possibly projected) mean actually used.
    pub mean: DVector<f64>,
    pub h: f64,
}

/// Solves the vertex LP for `y` in `co(vertices)`; `None` if infeasible.
pub fn max_variance_law(vertices: &[DVector<f64>], y: &DVector<f64>) -> Option<VertexLaw> {
    let obj: Vec<f64> = vertices.iter().map(|v| (v - y).norm_squared()).collect();
    let sol = lp::convex_weights(vertices, y, &obj)?;
    let support: Vec<(usize, f64)> = sol
        .x
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 1e-14)
        .map(|(i, w)| (i, *w))
        .collect();
    let var: f64 = support.iter().map(|(i, w)| w * obj[*i]).sum();
    Some(VertexLaw {
        support,
        mean: y.clone(),
        h: var.max(0.0).sqrt(),
    })
}

/// Like [`max_variance_law`], projecting `y` onto the hull when the exact
/// LP is infeasible because of round-off.
pub fn max_variance_law_projected(vertices: &[DVector<f64>], y: &DVector<f64>) -> VertexLaw {
    if let Some(law) = max_variance_law(vertices, y) {
        return law;
    }
    let p = crate::convex::project_onto_hull(vertices, y);
    if let Some(law) = max_variance_law(vertices, &p) {
        return law;
    }
    // projection landed on a face the LP still rejects by round-off; use the nearest vertex
    let (i, _) = vertices
        .iter()
        .enumerate()
        .map(|(i, v)| (i, (v - &p).norm()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    VertexLaw {
        support: vec![(i, 1.0)],
        mean: vertices[i].clone(),
        h: 0.0,
    }
}

/// `h(y, K)` with membership tolerance `tol`.
pub fn h(y: &DVector<f64>, body: &ConvexBody, tol: f64) -> Result<HValue, VarianceError> {
    if y.len() != body.dim() {
        return Err(VarianceError::Dimension {
            expected: body.dim(),
            got: y.len(),
        });
    }
    if !body.contains(y, tol) {
        return Ok(HValue::MinusInfinity);
    }
    let value = match body {
        ConvexBody::Ball { center, radius } => {
            let d = (y - center).norm();
            // sphere points carry a few ulps of coordinate round-off, which the
            // square root would blow up to ~1e-8
            let scale = radius + center.amax();
            if radius - d <= 8.0 * f64::EPSILON * scale {
                0.0
            } else {
                ((radius - d) * (radius + d)).sqrt()
            }
        }
        ConvexBody::Segment { a, b } => {
            let p = body.project(y);
            ((&p - a).norm() * (b - &p).norm()).sqrt()
        }
        ConvexBody::Polytope(p) => max_variance_law_projected(p.vertices(), y).h,
        ConvexBody::Scaled { base, scale, shift } => {
            let local = (y - shift) / *scale;
            match h(&local, base, tol / scale)? {
                HValue::Finite(v) => v * scale,
                HValue::MinusInfinity => return Ok(HValue::MinusInfinity),
            }
        }
    };
    Ok(HValue::Finite(value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Quadrature {
    /// Composite Simpson on the node grid (trapezoid on a trailing odd cell).
    #[default]
    Simpson,
    /// One sample per cell: midpoint state, the cell's own derivative sample.
    Midpoint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LikelihoodReport {
    /// `L(x)`.
    pub value: f64,
    /// `L(x)^2`.
    pub squared: f64,
    /// Nodes whose derivative sample lies farther than `tol` from `F(t, x)`;
    /// each contributes the Chebyshev radius of `F(t, x)`.
    pub infeasible_nodes: Vec<usize>,
}

impl LikelihoodReport {
    pub fn feasible(&self) -> bool {
        self.infeasible_nodes.is_empty()
    }
}

/// Squared integrand `h^2(d, F(t, x))`, clamped to `r(F)^2` when infeasible.
fn integrand(
    system: &SystemDescriptor,
    t: f64,
    x: &DVector<f64>,
    d: &DVector<f64>,
    tol: f64,
) -> Result<(f64, bool), VarianceError> {
    let body = system.f_of(t, x)?;
    Ok(match h(d, &body, tol)? {
        HValue::Finite(v) => (v * v, true),
        HValue::MinusInfinity => {
            let r = body.chebyshev_radius();
            (r * r, false)
        }
    })
}

/// `L(x) = (int h^2(x'(t), F(t, x(t))) dt)^(1/2)` by quadrature on the trajectory grid.
pub fn likelihood(
    traj: &Trajectory,
    system: &SystemDescriptor,
    rule: Quadrature,
    tol: f64,
) -> Result<LikelihoodReport, VarianceError> {
    let n = traj.len();
    if n < 2 {
        return Err(VarianceError::EmptyGrid);
    }
    for i in 1..n {
        if !(traj.times[i] > traj.times[i - 1]) {
            return Err(VarianceError::NonMonotoneGrid(i));
        }
    }
    let mut infeasible = Vec::new();
    let squared = match rule {
        Quadrature::Simpson => {
            let mut g = Vec::with_capacity(n);
            for i in 0..n {
                let (v, ok) = integrand(system, traj.times[i], &traj.states[i], &traj.derivs[i], tol)?;
                if !ok {
                    infeasible.push(i);
                }
                g.push(v);
            }
            composite_simpson(&traj.times, &g)
        }
        Quadrature::Midpoint => {
            let mut acc = 0.0;
            for i in 0..n - 1 {
                let dt = traj.times[i + 1] - traj.times[i];
                let tm = 0.5 * (traj.times[i] + traj.times[i + 1]);
                let xm = (&traj.states[i] + &traj.states[i + 1]) * 0.5;
                let (v, ok) = integrand(system, tm, &xm, &traj.derivs[i], tol)?;
                if !ok {
                    infeasible.push(i);
                }
                acc += v * dt;
            }
            acc
        }
    };
    let squared = squared.max(0.0);
    Ok(LikelihoodReport {
        value: squared.sqrt(),
        squared,
        infeasible_nodes: infeasible,
    })
}

/// Composite Simpson over node values; a trailing odd cell uses the trapezoid rule.
pub fn composite_simpson(times: &[f64], values: &[f64]) -> f64 {
    let cells = times.len() - 1;
    let even = cells - cells % 2;
    let mut acc = 0.0;
    let mut i = 0;
    while i < even {
        let h = times[i + 2] - times[i];
        acc += h / 6.0 * (values[i] + 4.0 * values[i + 1] + values[i + 2]);
        i += 2;
    }
    if even < cells {
        acc += 0.5 * (times[cells] - times[cells - 1]) * (values[cells] + values[cells - 1]);
    }
    acc
}

/// Exhaustive check used by tests: largest variance over laws carried by one
/// or two of the given vertices with mean `y` (pairs only hit `y` when it lies
/// on the connecting segment).
pub fn two_point_oracle(vertices: &[DVector<f64>], y: &DVector<f64>) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (i, a) in vertices.iter().enumerate() {
        if (a - y).norm() < 1e-12 {
            best = Some(best.unwrap_or(0.0).max(0.0));
        }
        for b in vertices.iter().skip(i + 1) {
            let ab = b - a;
            let len2 = ab.norm_squared();
            if len2 == 0.0 {
                continue;
            }
            let s = (y - a).dot(&ab) / len2;
            if !(0.0..=1.0).contains(&s) || (a + &ab * s - y).norm() > 1e-10 {
                continue;
            }
            let var = s * (1.0 - s) * len2;
            best = Some(best.unwrap_or(0.0).max(var));
        }
    }
    best.map(f64::sqrt)
}

/// Dense helper for the simplex oracle: `h^2` for a simplex with vertices `v`
/// is attained by the unique barycentric law.
pub fn simplex_oracle(vertices: &[DVector<f64>], y: &DVector<f64>) -> Option<f64> {
    let k = vertices.len();
    let n = y.len();
    let mut a = DMatrix::<f64>::zeros(n + 1, k);
    let mut b = DVector::<f64>::zeros(n + 1);
    for (j, v) in vertices.iter().enumerate() {
        for i in 0..n {
            a[(i, j)] = v[i];
        }
        a[(n, j)] = 1.0;
    }
    b.rows_mut(0, n).copy_from(y);
    b[n] = 1.0;
    let theta = a.svd(true, true).solve(&b, 1e-12).ok()?;
    if theta.iter().any(|&w| w < -1e-12) {
        return None;
    }
    let var: f64 = vertices
        .iter()
        .zip(theta.iter())
        .map(|(v, w)| w * (v - y).norm_squared())
        .sum();
    Some(var.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn fin(v: HValue) -> f64 {
        v.finite().expect("finite h")
    }

    #[test]
    fn vertex_gives_zero() {
        let sq = ConvexBody::unit_square();
        for v in sq.vertices().unwrap() {
            assert!(fin(h(&v, &sq, 1e-9).unwrap()) <= 1e-9);
        }
    }

    #[test]
    fn segment_midpoint_value() {
        let s = ConvexBody::segment(dvector![-1.0], dvector![1.0]).unwrap();
        let v = fin(h(&dvector![0.5], &s, 1e-9).unwrap());
        // two-point law at +-1 with mean 0.5: p = 0.75, var = 1 - 0.25
        assert!((v - 0.75f64.sqrt()).abs() < 1e-12);
        let as_poly = ConvexBody::polytope(vec![dvector![-1.0], dvector![1.0]]).unwrap();
        assert!((fin(h(&dvector![0.5], &as_poly, 1e-9).unwrap()) - v).abs() < 1e-12);
    }

    #[test]
    fn square_centroid() {
        let v = fin(h(&dvector![0.5, 0.5], &ConvexBody::unit_square(), 1e-9).unwrap());
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ball_center() {
        let b = ConvexBody::ball(dvector![0.0, 0.0], 1.0).unwrap();
        assert!((fin(h(&dvector![0.0, 0.0], &b, 1e-9).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn outside_is_minus_infinity() {
        assert_eq!(
            h(&dvector![2.0, 2.0], &ConvexBody::unit_square(), 1e-9).unwrap(),
            HValue::MinusInfinity
        );
    }

    #[test]
    fn near_boundary_is_projected() {
        let sq = ConvexBody::unit_square();
        let v = fin(h(&dvector![1.0 + 1e-10, 1.0], &sq, 1e-9).unwrap());
        assert!(v < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            h(&dvector![0.0], &ConvexBody::unit_square(), 1e-9),
            Err(VarianceError::Dimension { .. })
        ));
    }

    #[test]
    fn scaled_reduction() {
        let tri = ConvexBody::polytope(vec![dvector![0.0, 0.0], dvector![1.0, 0.0], dvector![0.0, 1.0]])
            .unwrap();
        let lazy = ConvexBody::scaled(tri.clone(), 3.0, dvector![1.0, 2.0]).unwrap();
        let y = dvector![0.2, 0.3];
        let base = fin(h(&y, &tri, 1e-9).unwrap());
        let moved = fin(h(&(dvector![1.0, 2.0] + &y * 3.0), &lazy, 1e-9).unwrap());
        assert!((moved - 3.0 * base).abs() < 1e-9);
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let t: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let v: Vec<f64> = t.iter().map(|s| s * s * s).collect();
        assert!((composite_simpson(&t, &v) - 0.25).abs() < 1e-14);
    }
}
