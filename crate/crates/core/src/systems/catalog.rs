//! Named example systems with a reference (relaxed) control.

use std::sync::Arc;

use nalgebra::{dvector, DMatrix, DVector};

use super::{Bounds, PolytopeField, SystemDescriptor};
use crate::bolza::BolzaProblem;
use crate::convex::ConvexBody;
use crate::trajectory::{ControlValue, PiecewiseControl};

#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub system: SystemDescriptor,
    pub x0: DVector<f64>,
    pub interval: (f64, f64),
    /// Control (for [`SystemDescriptor::rhs`]) generating the reference trajectory.
    pub reference: PiecewiseControl,
    /// Box used for sampling checks of the concavity conditions.
    pub check_box: Bounds,
}

pub fn catalog_names() -> &'static [&'static str] {
    &[
        "linear1d",
        "radial-square",
        "polytope-tri",
        "counterexample-6",
        "bolza-concave1d",
    ]
}

fn constant(interval: (f64, f64), u: DVector<f64>) -> PiecewiseControl {
    PiecewiseControl::constant(interval.0, interval.1, ControlValue::Vector(u))
}

/// Looks up a catalog system by name.
pub fn catalog(name: &str) -> Option<CatalogEntry> {
    let interval = (0.0, 1.0);
    Some(match name {
        // x' = x + u, u in [-1, 1]; u = 0 runs from 1 to e
        "linear1d" => CatalogEntry {
            name: "linear1d",
            system: SystemDescriptor::LinearControl {
                a: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
                b: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
                u: ConvexBody::segment(dvector![-1.0], dvector![1.0]).ok()?,
            },
            x0: dvector![1.0],
            interval,
            reference: constant(interval, dvector![0.0]),
            check_box: Bounds::cube(1, 2.0),
        },
        "radial-square" => CatalogEntry {
            name: "radial-square",
            system: SystemDescriptor::Radial {
                phi: Arc::new(|_, x: &DVector<f64>| 1.0 + x.norm_squared()),
                u: ConvexBody::unit_square(),
            },
            x0: dvector![0.1, -0.2],
            interval,
            reference: constant(interval, dvector![0.5, 0.5]),
            check_box: Bounds::cube(2, 1.0),
        },
        "polytope-tri" => CatalogEntry {
            name: "polytope-tri",
            system: polytope_triangle(),
            x0: dvector![0.0, 0.0],
            interval,
            reference: constant(interval, dvector![0.5, 0.25, 0.25]),
            check_box: Bounds::cube(2, 1.0),
        },
        "counterexample-6" => CatalogEntry {
            name: "counterexample-6",
            system: SystemDescriptor::Counterexample62,
            x0: dvector![0.0, 1.0],
            interval,
            reference: constant(interval, dvector![0.0]),
            check_box: Bounds::new(dvector![-0.5, 0.5], dvector![0.5, 1.5]),
        },
        "bolza-concave1d" => {
            let problem = BolzaProblem::concave_1d();
            let system = problem.extend_to_mayer(9).ok()?;
            CatalogEntry {
                name: "bolza-concave1d",
                system,
                x0: dvector![0.0, 0.0],
                interval: (0.0, problem.horizon),
                reference: constant((0.0, problem.horizon), dvector![0.0, 0.0]),
                check_box: {
                    let om = problem.omega();
                    Bounds::new(om.lo.push(-1.0), om.hi.push(1.0))
                },
            }
        }
        _ => return None,
    })
}

/// Equilateral triangle `b(t) + s(x) T` with `s(x) = 1 + |x|^2 / 2`, `b(t) = (t/10, 0)`.
fn polytope_triangle() -> SystemDescriptor {
    let r3 = 3f64.sqrt() / 2.0;
    let shape = [dvector![1.0, 0.0], dvector![-0.5, r3], dvector![-0.5, -r3]];
    let b = |t: f64| dvector![0.1 * t, 0.0];
    let s = |x: &DVector<f64>| 1.0 + 0.5 * x.norm_squared();
    let vertex_maps = shape
        .iter()
        .map(|v| {
            let v = v.clone();
            Arc::new(move |t: f64, x: &DVector<f64>| b(t) + &v * s(x)) as super::VectorField
        })
        .collect();
    // facet j is opposite vertex j; every facet sits at distance 1/2 from the center
    let normals = vec![dvector![-1.0, 0.0], dvector![0.5, -r3], dvector![0.5, r3]];
    let facet_values = normals
        .iter()
        .map(|w| {
            let w = w.clone();
            Arc::new(move |t: f64, x: &DVector<f64>| w.dot(&b(t)) + 0.5 * s(x)) as super::ScalarField
        })
        .collect();
    SystemDescriptor::PolytopeField(PolytopeField {
        dim: 2,
        vertex_maps,
        facet_normals: Arc::new(move |_| normals.clone()),
        facet_values,
        incidence: vec![vec![1, 2], vec![0, 2], vec![0, 1]],
    })
}
