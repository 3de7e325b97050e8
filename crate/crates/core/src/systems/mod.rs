//! Multifunction families `F(t, x)` and their affine selections.
//!
//! Every descriptor also carries a control parameterization `rhs(t, x, u)`
//! whose image over admissible `u` is `F(t, x)`; extreme points of `F` are
//! reached by the finite list returned from [`SystemDescriptor::extreme_controls`].

mod catalog;
mod selection;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::{ConvexBody, ExtremePoints, GeometryError, Polytope};

pub use catalog::{catalog, catalog_names, CatalogEntry};
pub use selection::{
    decompose, verify_concavity_conditions, AffineSelection, ConcavityReport, ConcavityWitness,
    EpsSelectionFan, SelectionOptions,
};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(f64, &DVector<f64>) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type NormalsFn = Arc<dyn Fn(f64) -> Vec<DVector<f64>> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("state outside the system domain: {0}")]
    Domain(String),
    #[error("target lies at distance {distance:.3e} from F(t, x)")]
    NotInF { distance: f64 },
    #[error("facet normals active at vertex {vertex} do not span the space")]
    DegenerateDualBasis { vertex: usize },
    #[error("no eps-selection fan: {0}")]
    Infeasible(String),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Bounds {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Self {
        Bounds { lo, hi }
    }

    pub fn cube(n: usize, half: f64) -> Self {
        Bounds {
            lo: DVector::from_element(n, -half),
            hi: DVector::from_element(n, half),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.lo.len()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Vertex-and-facet description of a polytope-valued field.
#[derive(Clone)]
pub struct PolytopeField {
    pub dim: usize,
    /// `y_i(t, x)`, the vertices.
    pub vertex_maps: Vec<VectorField>,
    /// Unit outer normals `w_j(t)`.
    pub facet_normals: NormalsFn,
    /// `psi_j(t, x) = max_{w in F} w_j · w`, convex in `x`.
    pub facet_values: Vec<ScalarField>,
    /// `incidence[i]` lists the facets containing vertex `i`.
    pub incidence: Vec<Vec<usize>>,
}

/// Mayer-form extension of a control system with running cost `alpha + beta`.
///
/// State is `(x, x0)` with the cost coordinate last; `F` does not depend on `x0`.
#[derive(Clone)]
pub struct BolzaExtended {
    pub a: MatrixFn,
    /// `f(t, u)`.
    pub f: VectorField,
    /// `alpha(t, x)`, concave in `x`.
    pub alpha: ScalarField,
    /// `beta(t, u)`.
    pub beta: ScalarField,
    pub u: ConvexBody,
    /// Finite sample of `U` used to build the extended body.
    pub u_samples: Vec<DVector<f64>>,
    pub m: f64,
    /// Bounding box for `x` along relaxed trajectories.
    pub omega: Bounds,
}

impl BolzaExtended {
    pub fn n(&self) -> usize {
        self.omega.dim()
    }

    fn split(&self, state: &DVector<f64>) -> DVector<f64> {
        state.rows(0, self.n()).into_owned()
    }

    fn points(&self, t: f64, state: &DVector<f64>) -> Vec<DVector<f64>> {
        let x = self.split(state);
        let ax = (self.a)(t) * &x;
        let alpha = (self.alpha)(t, &x);
        let n = self.n();
        let mut pts = Vec::with_capacity(2 * self.u_samples.len());
        for u in &self.u_samples {
            let y = &ax + (self.f)(t, u);
            let low = alpha + (self.beta)(t, u);
            for y0 in [low, self.m] {
                let mut p = DVector::zeros(n + 1);
                p.rows_mut(0, n).copy_from(&y);
                p[n] = y0;
                pts.push(p);
            }
        }
        pts
    }
}

#[derive(Clone)]
pub enum SystemDescriptor {
    /// `A(t) x + B(t) U`.
    LinearControl { a: MatrixFn, b: MatrixFn, u: ConvexBody },
    /// `phi(t, x) U` with `phi > 0` convex in `x` and `0 in U`.
    Radial { phi: ScalarField, u: ConvexBody },
    PolytopeField(PolytopeField),
    /// `f(x) + g(x) [-1, 1]` with `f = (x1, x2)`, `g = (1, x1)`.
    Counterexample62,
    /// `A(t) x + b(t) + F_base(t, x)`.
    AffineShift {
        base: Box<SystemDescriptor>,
        a: MatrixFn,
        b: VectorFn,
    },
    BolzaExtended(BolzaExtended),
}

impl fmt::Debug for SystemDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SystemDescriptor::{}(dim={})", self.kind(), self.dim())
    }
}

fn check_dim(x: &DVector<f64>, n: usize) -> Result<(), SystemError> {
    if x.len() != n {
        return Err(SystemError::Dimension {
            expected: n,
            got: x.len(),
        });
    }
    Ok(())
}

/// Finite set of controls whose images are the extreme points of `U`.
fn extreme_controls_of(u: &ConvexBody) -> Vec<DVector<f64>> {
    match u.extreme_points() {
        ExtremePoints::Finite(v) => v,
        ExtremePoints::Sphere { center, radius } => sphere_sample(&center, radius),
    }
}

/// Deterministic sample of a sphere: 32 angles in the plane, axis and diagonal
/// directions otherwise.
pub fn sphere_sample(center: &DVector<f64>, radius: f64) -> Vec<DVector<f64>> {
    let n = center.len();
    match n {
        1 => vec![center.add_scalar(-radius), center.add_scalar(radius)],
        2 => (0..32)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 32.0;
                center + DVector::from_vec(vec![a.cos(), a.sin()]) * radius
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for i in 0..n {
                for s in [-1.0, 1.0] {
                    let mut d = DVector::zeros(n);
                    d[i] = s;
                    out.push(center + d * radius);
                }
            }
            for mask in 0..(1usize << n.min(10)) {
                let d = DVector::from_fn(n, |i, _| if mask >> i & 1 == 1 { 1.0 } else { -1.0 });
                out.push(center + d.normalize() * radius);
            }
            out
        }
    }
}

/// Subgradient representative by finite differences: central where smooth,
/// forward at detected kinks (relative one-sided jump above `1e-3`).
pub fn subgradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6 * (1.0 + x.amax());
    let f0 = f(x);
    DVector::from_fn(x.len(), |i, _| {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
            fwd
        } else {
            (fp - fm) / (2.0 * h)
        }
    })
}

impl SystemDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            SystemDescriptor::LinearControl { .. } => "linear-control",
            SystemDescriptor::Radial { .. } => "radial",
            SystemDescriptor::PolytopeField(_) => "polytope-field",
            SystemDescriptor::Counterexample62 => "counterexample",
            SystemDescriptor::AffineShift { .. } => "affine-shift",
            SystemDescriptor::BolzaExtended(_) => "bolza-extended",
        }
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        match self {
            SystemDescriptor::LinearControl { a, .. } => a(0.0).nrows(),
            SystemDescriptor::Radial { u, .. } => u.dim(),
            SystemDescriptor::PolytopeField(p) => p.dim,
            SystemDescriptor::Counterexample62 => 2,
            SystemDescriptor::AffineShift { base, .. } => base.dim(),
            SystemDescriptor::BolzaExtended(b) => b.n() + 1,
        }
    }

    /// Dimension of the control parameter accepted by [`Self::rhs`].
    pub fn control_dim(&self) -> usize {
        match self {
            SystemDescriptor::LinearControl { u, .. } | SystemDescriptor::Radial { u, .. } => u.dim(),
            SystemDescriptor::PolytopeField(p) => p.vertex_maps.len(),
            SystemDescriptor::Counterexample62 => 1,
            SystemDescriptor::AffineShift { base, .. } => base.control_dim(),
            SystemDescriptor::BolzaExtended(b) => b.u.dim() + 1,
        }
    }

    /// `F(t, x)`.
    pub fn f_of(&self, t: f64, x: &DVector<f64>) -> Result<ConvexBody, SystemError> {
        check_dim(x, self.dim())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SystemError::Domain(format!("non-finite state at t={t}")));
        }
        match self {
            SystemDescriptor::LinearControl { a, b, u } => {
                let shift = a(t) * x;
                let bm = b(t);
                match u {
                    ConvexBody::Segment { a: ua, b: ub } => Ok(ConvexBody::Segment {
                        a: &shift + &bm * ua,
                        b: &shift + &bm * ub,
                    }),
                    ConvexBody::Ball { center, radius } => {
                        let s = bm[(0, 0)];
                        let scalar = DMatrix::<f64>::identity(bm.nrows(), bm.ncols()) * s;
                        if bm.nrows() != bm.ncols() || (&bm - scalar).amax() > 1e-14 || s <= 0.0 {
                            return Err(SystemError::Unsupported(
                                "ball control sets need B = s I with s > 0".into(),
                            ));
                        }
                        Ok(ConvexBody::Ball {
                            center: &shift + center * s,
                            radius: radius * s,
                        })
                    }
                    _ => {
                        let verts = u.vertices().expect("polytope controls have vertices");
                        Ok(ConvexBody::Polytope(Polytope::from_vertices_unchecked(
                            verts.iter().map(|v| &shift + &bm * v).collect(),
                        )))
                    }
                }
            }
            SystemDescriptor::Radial { phi, u } => {
                let s = phi(t, x);
                if !(s > 0.0) {
                    return Err(SystemError::Domain(format!("phi = {s} is not positive")));
                }
                Ok(u.translate_scale(&DVector::zeros(u.dim()), s)?)
            }
            SystemDescriptor::PolytopeField(p) => Ok(ConvexBody::Polytope(
                Polytope::from_vertices_unchecked(p.vertex_maps.iter().map(|y| y(t, x)).collect()),
            )),
            SystemDescriptor::Counterexample62 => {
                let (f, g) = counterexample_fg(x);
                Ok(ConvexBody::Segment { a: &f + &g, b: f - g })
            }
            SystemDescriptor::AffineShift { base, a, b } => {
                let body = base.f_of(t, x)?;
                Ok(body.translate_scale(&(a(t) * x + b(t)), 1.0)?)
            }
            SystemDescriptor::BolzaExtended(be) => Ok(ConvexBody::Polytope(
                Polytope::from_vertices_unchecked(be.points(t, x)),
            )),
        }
    }

    /// `ext F(t, x)`.
    pub fn ext_f(&self, t: f64, x: &DVector<f64>) -> Result<ExtremePoints, SystemError> {
        match self {
            SystemDescriptor::BolzaExtended(be) => {
                check_dim(x, self.dim())?;
                let p = Polytope::new(be.points(t, x))?;
                Ok(ExtremePoints::Finite(p.vertices().to_vec()))
            }
            _ => Ok(self.f_of(t, x)?.extreme_points()),
        }
    }

    /// Right-hand side for a control parameter `u`.
    pub fn rhs(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match self {
            SystemDescriptor::LinearControl { a, b, .. } => a(t) * x + b(t) * u,
            SystemDescriptor::Radial { phi, .. } => u * phi(t, x),
            SystemDescriptor::PolytopeField(p) => {
                let mut out = DVector::zeros(p.dim);
                for (w, y) in u.iter().zip(&p.vertex_maps) {
                    if *w != 0.0 {
                        out += y(t, x) * *w;
                    }
                }
                out
            }
            SystemDescriptor::Counterexample62 => {
                let (f, g) = counterexample_fg(x);
                f + g * u[0]
            }
            SystemDescriptor::AffineShift { base, a, b } => base.rhs(t, x, u) + a(t) * x + b(t),
            SystemDescriptor::BolzaExtended(be) => {
                let n = be.n();
                let m = be.u.dim();
                let xs = be.split(x);
                let uc = u.rows(0, m).into_owned();
                let v = u[m];
                let y = (be.a)(t) * &xs + (be.f)(t, &uc);
                let y0 = (1.0 - v) * ((be.alpha)(t, &xs) + (be.beta)(t, &uc)) + v * be.m;
                let mut out = DVector::zeros(n + 1);
                out.rows_mut(0, n).copy_from(&y);
                out[n] = y0;
                out
            }
        }
    }

    /// Controls whose right-hand sides exhaust `ext F(t, x)` (a sphere is sampled).
    pub fn extreme_controls(&self, t: f64, x: &DVector<f64>) -> Vec<DVector<f64>> {
        match self {
            SystemDescriptor::LinearControl { u, .. } | SystemDescriptor::Radial { u, .. } => {
                extreme_controls_of(u)
            }
            SystemDescriptor::PolytopeField(p) => {
                let k = p.vertex_maps.len();
                (0..k).map(|i| DVector::from_fn(k, |j, _| if i == j { 1.0 } else { 0.0 })).collect()
            }
            SystemDescriptor::Counterexample62 => {
                vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)]
            }
            SystemDescriptor::AffineShift { base, .. } => base.extreme_controls(t, x),
            SystemDescriptor::BolzaExtended(be) => {
                let m = be.u.dim();
                let pts = be.points(t, x);
                let ext = match Polytope::new(pts.clone()) {
                    Ok(p) => p.vertices().to_vec(),
                    Err(_) => return Vec::new(),
                };
                let mut out = Vec::new();
                for (k, p) in pts.iter().enumerate() {
                    if ext.iter().any(|e| (e - p).amax() <= 1e-12) {
                        let mut c = DVector::zeros(m + 1);
                        c.rows_mut(0, m).copy_from(&be.u_samples[k / 2]);
                        c[m] = (k % 2) as f64;
                        out.push(c);
                    }
                }
                out
            }
        }
    }

    /// Domain box, when the descriptor declares one.
    pub fn domain(&self) -> Option<Bounds> {
        match self {
            SystemDescriptor::AffineShift { base, .. } => base.domain(),
            SystemDescriptor::BolzaExtended(be) => {
                let n = be.n();
                let mut lo = DVector::from_element(n + 1, f64::NEG_INFINITY);
                let mut hi = DVector::from_element(n + 1, f64::INFINITY);
                lo.rows_mut(0, n).copy_from(&be.omega.lo);
                hi.rows_mut(0, n).copy_from(&be.omega.hi);
                Some(Bounds { lo, hi })
            }
            _ => None,
        }
    }
}

/// `f(x) = (x1, x2)`, `g(x) = (1, x1)`.
pub fn counterexample_fg(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    (
        DVector::from_vec(vec![x[0], x[1]]),
        DVector::from_vec(vec![1.0, x[0]]),
    )
}

/// `V(x) = x2 - x1^2 / 2`, which grows along every trajectory of the
/// counterexample except those with `x1 = 0`, `u = 0`.
pub fn counterexample_v(x: &DVector<f64>) -> f64 {
    x[1] - 0.5 * x[0] * x[0]
}
