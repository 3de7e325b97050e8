//! Compact convex bodies with exact extreme-point access.
//!
//! Polytopes are stored by their irredundant vertex list. Balls and segments
//! have closed forms. `Scaled` wraps any body as `shift + scale * base`.
//!
//! Every operation is pure; degenerate bodies (a single point, a segment
//! embedded in a higher dimensional space) are supported throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp;

/// Default membership tolerance.
pub const GEOM_TOL: f64 = 1e-9;
/// Default tolerance on derived radii.
pub const RADIUS_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("empty vertex list")]
    Empty,
    #[error("inconsistent dimensions: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("ball radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error("non-finite coordinate")]
    NonFinite,
}

/// Irredundant V-representation of a polytope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    vertices: Vec<DVector<f64>>,
}

impl Polytope {
    /// Builds a polytope from a point cloud, dropping duplicates and every
    /// point that is a convex combination of the others. The relative order
    /// of the surviving vertices is preserved.
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self, GeometryError> {
        check_dims(&points)?;
        let mut uniq: Vec<DVector<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if !uniq.iter().any(|q| (q - &p).amax() <= 1e-12) {
                uniq.push(p);
            }
        }
        let mut keep = vec![true; uniq.len()];
        for i in 0..uniq.len() {
            let others: Vec<DVector<f64>> = uniq
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i && keep[*j])
                .map(|(_, p)| p.clone())
                .collect();
            if others.is_empty() {
                continue;
            }
            let zero = vec![0.0; others.len()];
            if lp::convex_weights(&others, &uniq[i], &zero).is_some() {
                keep[i] = false;
            }
        }
        let vertices = uniq
            .into_iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(p))
            .collect();
        Ok(Self { vertices })
    }

    /// Wraps a vertex list that is already known to be irredundant.
    pub fn from_vertices_unchecked(vertices: Vec<DVector<f64>>) -> Self {
        Self { vertices }
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }
}

fn check_dims(points: &[DVector<f64>]) -> Result<usize, GeometryError> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    let dim = first.len();
    for p in points {
        if p.len() != dim {
            return Err(GeometryError::Dimension {
                expected: dim,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
    }
    Ok(dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConvexBody {
    Polytope(Polytope),
    Ball {
        center: DVector<f64>,
        radius: f64,
    },
    Segment {
        a: DVector<f64>,
        b: DVector<f64>,
    },
    /// `shift + scale * base`.
    Scaled {
        base: Box<ConvexBody>,
        scale: f64,
        shift: DVector<f64>,
    },
}

/// Extreme points of a body: a finite list, or the boundary sphere of a ball.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtremePoints {
    Finite(Vec<DVector<f64>>),
    Sphere { center: DVector<f64>, radius: f64 },
}

impl ExtremePoints {
    /// Smallest distance from `y` to the extreme set.
    pub fn distance(&self, y: &DVector<f64>) -> f64 {
        match self {
            ExtremePoints::Finite(pts) => pts
                .iter()
                .map(|p| (p - y).norm())
                .fold(f64::INFINITY, f64::min),
            ExtremePoints::Sphere { center, radius } => ((y - center).norm() - radius).abs(),
        }
    }
}

impl ConvexBody {
    pub fn polytope(points: Vec<DVector<f64>>) -> Result<Self, GeometryError> {
        Ok(ConvexBody::Polytope(Polytope::new(points)?))
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self, GeometryError> {
        if !(radius >= 0.0) {
            return Err(GeometryError::NegativeRadius(radius));
        }
        Ok(ConvexBody::Ball { center, radius })
    }

    pub fn segment(a: DVector<f64>, b: DVector<f64>) -> Result<Self, GeometryError> {
        check_dims(&[a.clone(), b.clone()])?;
        Ok(ConvexBody::Segment { a, b })
    }

    /// Lazy `shift + scale * base`.
    pub fn scaled(base: ConvexBody, scale: f64, shift: DVector<f64>) -> Result<Self, GeometryError> {
        if !(scale > 0.0) {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        if shift.len() != base.dim() {
            return Err(GeometryError::Dimension {
                expected: base.dim(),
                got: shift.len(),
            });
        }
        Ok(ConvexBody::Scaled {
            base: Box::new(base),
            scale,
            shift,
        })
    }

    /// Axis-aligned box `[lo, hi]` as a polytope.
    pub fn cube(lo: &[f64], hi: &[f64]) -> Result<Self, GeometryError> {
        let n = lo.len();
        let mut pts = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            let v = DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { hi[i] } else { lo[i] });
            pts.push(v);
        }
        Ok(ConvexBody::Polytope(Polytope::new(pts)?))
    }

    /// The unit square `[0,1]^2`.
    pub fn unit_square() -> Self {
        ConvexBody::cube(&[0.0, 0.0], &[1.0, 1.0]).expect("static square")
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexBody::Polytope(p) => p.dim(),
            ConvexBody::Ball { center, .. } => center.len(),
            ConvexBody::Segment { a, .. } => a.len(),
            ConvexBody::Scaled { base, .. } => base.dim(),
        }
    }

    pub fn extreme_points(&self) -> ExtremePoints {
        match self {
            ConvexBody::Polytope(p) => ExtremePoints::Finite(p.vertices.clone()),
            ConvexBody::Ball { center, radius } => ExtremePoints::Sphere {
                center: center.clone(),
                radius: *radius,
            },
            ConvexBody::Segment { a, b } => {
                if (a - b).amax() <= 1e-15 {
                    ExtremePoints::Finite(vec![a.clone()])
                } else {
                    ExtremePoints::Finite(vec![a.clone(), b.clone()])
                }
            }
            ConvexBody::Scaled { base, scale, shift } => match base.extreme_points() {
                ExtremePoints::Finite(pts) => ExtremePoints::Finite(
                    pts.into_iter().map(|p| shift + p * *scale).collect(),
                ),
                ExtremePoints::Sphere { center, radius } => ExtremePoints::Sphere {
                    center: shift + center * *scale,
                    radius: radius * scale,
                },
            },
        }
    }

    /// Finite vertex list, or `None` for bodies with a curved boundary.
    pub fn vertices(&self) -> Option<Vec<DVector<f64>>> {
        match self.extreme_points() {
            ExtremePoints::Finite(v) => Some(v),
            ExtremePoints::Sphere { radius, center } if radius == 0.0 => Some(vec![center]),
            ExtremePoints::Sphere { .. } => None,
        }
    }

    /// Euclidean distance from `y` to the body.
    pub fn distance(&self, y: &DVector<f64>) -> f64 {
        (self.project(y) - y).norm()
    }

    /// Nearest point of the body to `y`.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            ConvexBody::Ball { center, radius } => {
                let d = y - center;
                let r = d.norm();
                if r <= *radius {
                    y.clone()
                } else {
                    center + d * (*radius / r)
                }
            }
            ConvexBody::Segment { a, b } => {
                let ab = b - a;
                let len2 = ab.norm_squared();
                if len2 == 0.0 {
                    return a.clone();
                }
                let s = ((y - a).dot(&ab) / len2).clamp(0.0, 1.0);
                a + ab * s
            }
            ConvexBody::Polytope(p) => project_onto_hull(&p.vertices, y),
            ConvexBody::Scaled { base, scale, shift } => {
                let local = (y - shift) / *scale;
                shift + base.project(&local) * *scale
            }
        }
    }

    /// True iff `dist(y, K) <= tol`.
    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConvexBody::Ball { center, radius } => (y - center).norm() <= radius + tol,
            ConvexBody::Segment { .. } => self.distance(y) <= tol,
            ConvexBody::Polytope(p) => {
                let zero = vec![0.0; p.vertices.len()];
                lp::convex_weights(&p.vertices, y, &zero).is_some() || self.distance(y) <= tol
            }
            ConvexBody::Scaled { base, scale, shift } => {
                base.contains(&((y - shift) / *scale), tol / scale)
            }
        }
    }

    /// Radius of the smallest enclosing ball.
    pub fn chebyshev_radius(&self) -> f64 {
        self.chebyshev_ball().1
    }

    /// Center and radius of the smallest enclosing ball.
    pub fn chebyshev_ball(&self) -> (DVector<f64>, f64) {
        match self {
            ConvexBody::Ball { center, radius } => (center.clone(), *radius),
            ConvexBody::Segment { a, b } => ((a + b) * 0.5, (b - a).norm() * 0.5),
            ConvexBody::Polytope(p) => min_enclosing_ball(&p.vertices),
            ConvexBody::Scaled { base, scale, shift } => {
                let (c, r) = base.chebyshev_ball();
                (shift + c * *scale, r * scale)
            }
        }
    }

    /// `shift + scale * K`, materialized for the concrete variants.
    pub fn translate_scale(&self, shift: &DVector<f64>, scale: f64) -> Result<Self, GeometryError> {
        if !(scale > 0.0) {
            return Err(GeometryError::NonPositiveScale(scale));
        }
        if shift.len() != self.dim() {
            return Err(GeometryError::Dimension {
                expected: self.dim(),
                got: shift.len(),
            });
        }
        Ok(match self {
            ConvexBody::Polytope(p) => ConvexBody::Polytope(Polytope::from_vertices_unchecked(
                p.vertices.iter().map(|v| shift + v * scale).collect(),
            )),
            ConvexBody::Ball { center, radius } => ConvexBody::Ball {
                center: shift + center * scale,
                radius: radius * scale,
            },
            ConvexBody::Segment { a, b } => ConvexBody::Segment {
                a: shift + a * scale,
                b: shift + b * scale,
            },
            ConvexBody::Scaled {
                base,
                scale: s0,
                shift: t0,
            } => ConvexBody::Scaled {
                base: base.clone(),
                scale: s0 * scale,
                shift: shift + t0 * scale,
            },
        })
    }

    /// `max_{y in K} w·y`.
    pub fn support_function(&self, w: &DVector<f64>) -> f64 {
        match self {
            ConvexBody::Ball { center, radius } => w.dot(center) + radius * w.norm(),
            ConvexBody::Segment { a, b } => w.dot(a).max(w.dot(b)),
            ConvexBody::Polytope(p) => p
                .vertices
                .iter()
                .map(|v| w.dot(v))
                .fold(f64::NEG_INFINITY, f64::max),
            ConvexBody::Scaled { base, scale, shift } => {
                w.dot(shift) + scale * base.support_function(w)
            }
        }
    }

    /// Largest norm of a point of the body.
    pub fn max_norm(&self) -> f64 {
        match self.extreme_points() {
            ExtremePoints::Finite(v) => v.iter().map(|p| p.norm()).fold(0.0, f64::max),
            ExtremePoints::Sphere { center, radius } => center.norm() + radius,
        }
    }
}

/// Minimum enclosing ball of a finite point set (Welzl's recursion).
pub fn min_enclosing_ball(points: &[DVector<f64>]) -> (DVector<f64>, f64) {
    let dim = points[0].len();
    let mut support = Vec::with_capacity(dim + 1);
    let (c, r2) = welzl(points, points.len(), &mut support, dim);
    (c, r2.max(0.0).sqrt())
}

fn welzl(
    pts: &[DVector<f64>],
    n: usize,
    support: &mut Vec<DVector<f64>>,
    dim: usize,
) -> (DVector<f64>, f64) {
    if n == 0 || support.len() == dim + 1 {
        return circumball(support, dim);
    }
    let p = &pts[n - 1];
    let (c, r2) = welzl(pts, n - 1, support, dim);
    if (p - &c).norm_squared() <= r2 * (1.0 + 1e-12) + 1e-24 {
        return (c, r2);
    }
    support.push(p.clone());
    let out = welzl(pts, n - 1, support, dim);
    support.pop();
    out
}

/// Smallest ball with every point of `support` on its boundary, centered in
/// their affine hull. Returns the squared radius.
fn circumball(support: &[DVector<f64>], dim: usize) -> (DVector<f64>, f64) {
    match support.len() {
        0 => (DVector::zeros(dim), -1.0),
        1 => (support[0].clone(), 0.0),
        _ => {
            let p0 = &support[0];
            let k = support.len() - 1;
            let diffs: Vec<DVector<f64>> = support[1..].iter().map(|p| p - p0).collect();
            let mut g = DMatrix::<f64>::zeros(k, k);
            let mut rhs = DVector::<f64>::zeros(k);
            for i in 0..k {
                for j in 0..k {
                    g[(i, j)] = 2.0 * diffs[i].dot(&diffs[j]);
                }
                rhs[i] = diffs[i].norm_squared();
            }
            let lambda = g
                .clone()
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(k));
            let mut c = p0.clone();
            for i in 0..k {
                c += &diffs[i] * lambda[i];
            }
            let r2 = support
                .iter()
                .map(|p| (p - &c).norm_squared())
                .fold(0.0, f64::max);
            (c, r2)
        }
    }
}

/// Euclidean projection of `y` onto the convex hull of `points`.
///
/// Enumerates affinely independent subsets of at most `dim + 1` points and
/// keeps the closest affine projection with nonnegative barycentric weights.
pub fn project_onto_hull(points: &[DVector<f64>], y: &DVector<f64>) -> DVector<f64> {
    let dim = y.len();
    let max_size = (dim + 1).min(points.len());
    let mut best = points[0].clone();
    let mut best_d = (&best - y).norm_squared();
    let mut idx: Vec<usize> = Vec::with_capacity(max_size);
    for size in 1..=max_size {
        subsets(points.len(), size, 0, &mut idx, &mut |sub| {
            if let Some(p) = affine_projection(points, sub, y) {
                let d = (&p - y).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = p;
                }
            }
        });
    }
    best
}

fn subsets(n: usize, size: usize, start: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    if cur.len() == size {
        f(cur);
        return;
    }
    for i in start..n {
        if n - i < size - cur.len() {
            break;
        }
        cur.push(i);
        subsets(n, size, i + 1, cur, f);
        cur.pop();
    }
}

fn affine_projection(points: &[DVector<f64>], sub: &[usize], y: &DVector<f64>) -> Option<DVector<f64>> {
    let p0 = &points[sub[0]];
    if sub.len() == 1 {
        return Some(p0.clone());
    }
    let k = sub.len() - 1;
    let diffs: Vec<DVector<f64>> = sub[1..].iter().map(|&i| &points[i] - p0).collect();
    let mut g = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let r = y - p0;
    for i in 0..k {
        for j in 0..k {
            g[(i, j)] = diffs[i].dot(&diffs[j]);
        }
        rhs[i] = diffs[i].dot(&r);
    }
    let chol = g.cholesky()?;
    let lambda = chol.solve(&rhs);
    let sum: f64 = lambda.iter().sum();
    if lambda.iter().any(|&l| l < -1e-12) || sum > 1.0 + 1e-12 {
        return None;
    }
    let mut p = p0.clone();
    for i in 0..k {
        p += &diffs[i] * lambda[i];
    }
    Some(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn seg(a: f64, b: f64) -> ConvexBody {
        ConvexBody::segment(dvector![a], dvector![b]).unwrap()
    }

    #[test]
    fn segment_extremes() {
        assert_eq!(
            seg(-1.0, 1.0).extreme_points(),
            ExtremePoints::Finite(vec![dvector![-1.0], dvector![1.0]])
        );
    }

    #[test]
    fn polytope_drops_interior_point() {
        let k = ConvexBody::polytope(vec![
            dvector![0.0, 0.0],
            dvector![1.0, 0.0],
            dvector![0.0, 1.0],
            dvector![0.5, 0.25],
        ])
        .unwrap();
        assert_eq!(
            k.extreme_points(),
            ExtremePoints::Finite(vec![dvector![0.0, 0.0], dvector![1.0, 0.0], dvector![0.0, 1.0]])
        );
    }

    #[test]
    fn polytope_drops_duplicates_and_edge_points() {
        let k = ConvexBody::polytope(vec![
            dvector![0.0],
            dvector![0.5],
            dvector![1.0],
            dvector![1.0],
        ])
        .unwrap();
        assert_eq!(k.vertices().unwrap(), vec![dvector![0.0], dvector![1.0]]);
    }

    #[test]
    fn ball_extremes_are_sphere() {
        let b = ConvexBody::ball(dvector![0.0, 0.0], 1.0).unwrap();
        assert_eq!(
            b.extreme_points(),
            ExtremePoints::Sphere {
                center: dvector![0.0, 0.0],
                radius: 1.0
            }
        );
    }

    #[test]
    fn containment() {
        assert!(seg(-1.0, 1.0).contains(&dvector![0.5], 1e-9));
        let b = ConvexBody::ball(dvector![0.0, 0.0], 1.0).unwrap();
        assert!(!b.contains(&dvector![2.0, 0.0], 1e-9));
        let sq = ConvexBody::unit_square();
        assert!(sq.contains(&dvector![0.5, 0.5], 1e-9));
        assert!(!sq.contains(&dvector![1.0 + 1e-6, 0.5], 1e-9));
        assert!(sq.contains(&dvector![1.0 + 1e-10, 0.5], 1e-9));
    }

    #[test]
    fn chebyshev_radii() {
        assert!((seg(-1.0, 1.0).chebyshev_radius() - 1.0).abs() < 1e-12);
        let b = ConvexBody::ball(dvector![3.0], 2.5).unwrap();
        assert_eq!(b.chebyshev_radius(), 2.5);
        let r = ConvexBody::unit_square().chebyshev_radius();
        assert!((r - 0.5f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn chebyshev_square_against_grid_search() {
        // oracle: brute-force center grid, radius = max distance to corners
        let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let mut best = f64::INFINITY;
        for i in 0..=200 {
            for j in 0..=200 {
                let (cx, cy) = (i as f64 / 200.0, j as f64 / 200.0);
                let r = corners
                    .iter()
                    .map(|(x, y)| ((x - cx) * (x - cx) + (y - cy) * (y - cy)).sqrt())
                    .fold(0.0, f64::max);
                best = best.min(r);
            }
        }
        assert!((ConvexBody::unit_square().chebyshev_radius() - best).abs() < 1e-9);
    }

    #[test]
    fn translate_scale_examples() {
        assert_eq!(
            seg(-1.0, 1.0).translate_scale(&dvector![3.0], 2.0).unwrap(),
            seg(1.0, 5.0)
        );
        let b = ConvexBody::ball(dvector![0.0, 0.0], 1.0).unwrap();
        assert_eq!(
            b.translate_scale(&dvector![1.0, 1.0], 0.5).unwrap(),
            ConvexBody::ball(dvector![1.0, 1.0], 0.5).unwrap()
        );
        let sq = ConvexBody::unit_square();
        assert_eq!(sq.translate_scale(&dvector![0.0, 0.0], 1.0).unwrap(), sq);
        assert_eq!(
            sq.translate_scale(&dvector![0.0, 0.0], 0.0).unwrap_err(),
            GeometryError::NonPositiveScale(0.0)
        );
    }

    #[test]
    fn support_examples() {
        assert_eq!(ConvexBody::unit_square().support_function(&dvector![1.0, 0.0]), 1.0);
        let b = ConvexBody::ball(dvector![0.0, 0.0], 1.0).unwrap();
        assert_eq!(b.support_function(&dvector![3.0, 4.0]), 5.0);
        assert_eq!(seg(-1.0, 1.0).support_function(&dvector![-2.0]), 2.0);
    }

    #[test]
    fn projection_onto_triangle() {
        let pts = vec![dvector![0.0, 0.0], dvector![1.0, 0.0], dvector![0.0, 1.0]];
        let p = project_onto_hull(&pts, &dvector![1.0, 1.0]);
        assert!((p - dvector![0.5, 0.5]).norm() < 1e-12);
        let p = project_onto_hull(&pts, &dvector![-1.0, -2.0]);
        assert!(p.norm() < 1e-12);
        let p = project_onto_hull(&pts, &dvector![0.2, 0.2]);
        assert!((p - dvector![0.2, 0.2]).norm() < 1e-12);
    }

    #[test]
    fn scaled_body_matches_materialized() {
        let tri = ConvexBody::polytope(vec![dvector![0.0, 0.0], dvector![1.0, 0.0], dvector![0.0, 1.0]])
            .unwrap();
        let lazy = ConvexBody::scaled(tri.clone(), 2.0, dvector![1.0, -1.0]).unwrap();
        let eager = tri.translate_scale(&dvector![1.0, -1.0], 2.0).unwrap();
        let w = dvector![0.3, -0.7];
        assert!((lazy.support_function(&w) - eager.support_function(&w)).abs() < 1e-12);
        assert!((lazy.chebyshev_radius() - eager.chebyshev_radius()).abs() < 1e-12);
        assert_eq!(lazy.extreme_points(), eager.extreme_points());
    }
}
