//! Affine selections for the concavity conditions (C1) and (C2).
//!
//! Radii `rho` and `delta` are measured: the largest `R 2^-j` on which
//! sampled membership `A z + c in F(t, z)` holds.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{subgradient, Bounds, SystemDescriptor, SystemError};
use crate::convex::{ConvexBody, ExtremePoints};
use crate::variance::{h, max_variance_law_projected, HValue};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionOptions {
    /// Largest radius tried when measuring `rho` / `delta`.
    pub radius: f64,
    /// Number of halvings tried below `radius`.
    pub levels: u32,
    /// Sampled points per radius.
    pub samples: usize,
    /// Membership tolerance for sampled points; at radius `r` the check uses
    /// `min(tol, 1e-6 r)`, floored at `1e-13`, so shrinking the radius cannot
    /// hide a violation proportional to `r`.
    pub tol: f64,
    /// Tolerance accepted for the target `y in F(t, x)`.
    pub input_tol: f64,
    pub seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            radius: 1.0,
            levels: 40,
            samples: 50,
            tol: 1e-8,
            input_tol: 1e-7,
            seed: 0x5eed,
        }
    }
}

/// `z -> A z + c`, valid on `B(x, validity_radius)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineSelection {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `f64::INFINITY` when the selection is valid everywhere.
    pub validity_radius: f64,
}

impl AffineSelection {
    pub fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.c
    }
}

/// `n + 1` (or fewer) affine maps `z -> A' z + c_i` sharing the linear part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpsSelectionFan {
    pub a: DMatrix<f64>,
    pub c: Vec<DVector<f64>>,
    pub theta: Vec<f64>,
    pub delta: f64,
    pub eps: f64,
    /// Inward pull applied to the extreme points.
    pub eps_prime: f64,
    /// `h(A' x + c_i, F(t, x))`.
    pub h_values: Vec<f64>,
    /// Extreme points `y_i` the fan points were pulled from.
    pub extreme_points: Vec<DVector<f64>>,
}

impl EpsSelectionFan {
    pub fn eval(&self, i: usize, z: &DVector<f64>) -> DVector<f64> {
        &self.a * z + &self.c[i]
    }

    /// `A' z + sum theta_i c_i`.
    pub fn mean(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = &self.a * z;
        for (w, c) in self.theta.iter().zip(&self.c) {
            out += c * *w;
        }
        out
    }
}

/// Sample points of `B(x, r)`: the `2n` axis points and random points, half
/// of them on the sphere.
pub(crate) fn sample_ball(x: &DVector<f64>, r: f64, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = x.len();
    let mut out = Vec::with_capacity(count.max(2 * n));
    for i in 0..n {
        for s in [-1.0, 1.0] {
            let mut z = x.clone();
            z[i] += s * r;
            out.push(z);
        }
    }
    let mut k = 0;
    while out.len() < count {
        let d = random_direction(n, rng);
        let scale = if k % 2 == 0 { 1.0 } else { rng.gen::<f64>().powf(1.0 / n as f64) };
        out.push(x + d * (r * scale));
        k += 1;
    }
    out
}

pub(crate) fn random_direction(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let d = DVector::from_fn(n, |_, _| {
            let u1: f64 = rng.gen::<f64>().max(1e-300);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let norm = d.norm();
        if norm > 1e-12 {
            return d / norm;
        }
    }
}

/// Dual vectors `w*_l` in `span{w_l}` with `w*_l · w_m = delta_lm`.
fn dual_basis(ws: &[DVector<f64>]) -> Option<Vec<DVector<f64>>> {
    if ws.is_empty() {
        return Some(Vec::new());
    }
    let w = DMatrix::from_columns(ws);
    let g = w.transpose() * &w;
    let inv = g.try_inverse()?;
    let dual = w * inv;
    Some(dual.column_iter().map(|c| c.into_owned()).collect())
}

/// Greedy maximal linearly independent subset of `ws[idx]`, in order.
fn independent(ws: &[DVector<f64>], idx: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut picked = Vec::new();
    for j in idx {
        let mut r = ws[j].clone();
        for b in &basis {
            r -= b * b.dot(&r);
        }
        if r.norm() > 1e-9 * ws[j].norm().max(1.0) {
            basis.push(r.normalize());
            picked.push(j);
        }
    }
    picked
}

fn dual_matrix(
    ws: &[DVector<f64>],
    chosen: &[usize],
    xis: &[DVector<f64>],
) -> Option<DMatrix<f64>> {
    let n = xis[0].len();
    let sel: Vec<DVector<f64>> = chosen.iter().map(|&j| ws[j].clone()).collect();
    let duals = dual_basis(&sel)?;
    let mut a = DMatrix::zeros(n, n);
    for (d, &j) in duals.iter().zip(chosen) {
        a += d * xis[j].transpose();
    }
    Some(a)
}

impl super::PolytopeField {
    fn facet_subgradients(&self, t: f64, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.facet_values
            .iter()
            .map(|psi| subgradient(|z| psi(t, z), x))
            .collect()
    }

    /// `J_i` measured at `(t, x)`: facets `j` with `w_j · y_i = psi_j`.
    pub fn active_incidence(&self, t: f64, x: &DVector<f64>) -> Vec<Vec<usize>> {
        let ws = (self.facet_normals)(t);
        self.vertex_maps
            .iter()
            .map(|y| {
                let yi = y(t, x);
                ws.iter()
                    .zip(&self.facet_values)
                    .enumerate()
                    .filter(|(_, (w, psi))| {
                        let v = psi(t, x);
                        (w.dot(&yi) - v).abs() <= 1e-9 * (1.0 + v.abs())
                    })
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect()
    }
}

fn bolza_matrix(
    be: &super::BolzaExtended,
    t: f64,
    x: &DVector<f64>,
    with_xi: bool,
) -> DMatrix<f64> {
    let n = be.n();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&(be.a)(t));
    if with_xi {
        let xs = x.rows(0, n).into_owned();
        let xi = subgradient(|z| (be.alpha)(t, z), &xs);
        for j in 0..n {
            a[(n, j)] = xi[j];
        }
    }
    a
}

impl SystemDescriptor {
    /// Projects `y` onto `F(t, x)` after checking it lies within `input_tol`.
    fn target(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        opts: &SelectionOptions,
    ) -> Result<(ConvexBody, DVector<f64>), SystemError> {
        let body = self.f_of(t, x)?;
        if y.len() != body.dim() {
            return Err(SystemError::Dimension {
                expected: body.dim(),
                got: y.len(),
            });
        }
        let p = body.project(y);
        let d = (&p - y).norm();
        if d > opts.input_tol {
            return Err(SystemError::NotInF { distance: d });
        }
        Ok((body, p))
    }

    /// Linear part of the (C1) selection through `y`, and whether it is global.
    fn c1_matrix(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, bool), SystemError> {
        let n = self.dim();
        Ok(match self {
            SystemDescriptor::LinearControl { a, .. } => (a(t), true),
            SystemDescriptor::Radial { phi, .. } => {
                let u = y / phi(t, x);
                let xi = subgradient(|z| phi(t, z), x);
                (u * xi.transpose(), false)
            }
            SystemDescriptor::PolytopeField(p) => {
                let verts: Vec<DVector<f64>> = p.vertex_maps.iter().map(|m| m(t, x)).collect();
                let law = max_variance_law_projected(&verts, y);
                let ws = (p.facet_normals)(t);
                let xis = p.facet_subgradients(t, x);
                let mut a = DMatrix::zeros(n, n);
                for (i, w) in &law.support {
                    let chosen = independent(&ws, p.incidence[*i].iter().copied());
                    if chosen.len() < n {
                        return Err(SystemError::DegenerateDualBasis { vertex: *i });
                    }
                    let ai = dual_matrix(&ws, &chosen, &xis)
                        .ok_or(SystemError::DegenerateDualBasis { vertex: *i })?;
                    a += ai * *w;
                }
                (a, false)
            }
            SystemDescriptor::Counterexample62 => (counterexample_matrix(x, y), true),
            SystemDescriptor::AffineShift { base, a, b } => {
                let shift = a(t) * x + b(t);
                let (ab, global) = base.c1_matrix(t, x, &(y - shift))?;
                (ab + a(t), global)
            }
            SystemDescriptor::BolzaExtended(be) => {
                let y0 = y[be.n()];
                (bolza_matrix(be, t, x, y0 < be.m - 1.0), false)
            }
        })
    }

    /// Shared linear part `A'` of the (C2) fan through `y`, and whether it is global.
    fn c2_matrix(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, bool), SystemError> {
        Ok(match self {
            SystemDescriptor::PolytopeField(p) => {
                let ws = (p.facet_normals)(t);
                let active: Vec<usize> = ws
                    .iter()
                    .zip(&p.facet_values)
                    .enumerate()
                    .filter(|(_, (w, psi))| {
                        let v = psi(t, x);
                        w.dot(y) >= v - 1e-9 * (1.0 + v.abs())
                    })
                    .map(|(j, _)| j)
                    .collect();
                let chosen = independent(&ws, active);
                let xis = p.facet_subgradients(t, x);
                let a = dual_matrix(&ws, &chosen, &xis).ok_or(SystemError::DegenerateDualBasis { vertex: 0 })?;
                (a, false)
            }
            SystemDescriptor::AffineShift { base, a, b } => {
                let shift = a(t) * x + b(t);
                let (ab, global) = base.c2_matrix(t, x, &(y - shift))?;
                (ab + a(t), global)
            }
            SystemDescriptor::BolzaExtended(be) => {
                let y0 = y[be.n()];
                (bolza_matrix(be, t, x, y0 < be.m - 1e-12), false)
            }
            // frozen (C1) linear part; the fan points are not on the line
            // through y, so this is where (C2) breaks down
            SystemDescriptor::Counterexample62 => (self.c1_matrix(t, x, y)?.0, false),
            _ => self.c1_matrix(t, x, y)?,
        })
    }

    /// Largest `R 2^-j` on which every map keeps `A z + c_i in F(t, z)` at sampled `z`.
    fn measure_radius(
        &self,
        t: f64,
        x: &DVector<f64>,
        a: &DMatrix<f64>,
        cs: &[DVector<f64>],
        opts: &SelectionOptions,
    ) -> Result<Option<f64>, SystemError> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for j in 0..=opts.levels {
            let r = opts.radius * 0.5f64.powi(j as i32);
            let tol = opts.tol.min(1e-6 * r).max(1e-13);
            let mut ok = true;
            'pts: for z in sample_ball(x, r, opts.samples, &mut rng) {
                let body = match self.f_of(t, &z) {
                    Ok(b) => b,
                    Err(SystemError::Domain(_)) => {
                        ok = false;
                        break 'pts;
                    }
                    Err(e) => return Err(e),
                };
                let az = a * &z;
                for c in cs {
                    if !body.contains(&(&az + c), tol) {
                        ok = false;
                        break 'pts;
                    }
                }
            }
            if ok {
                return Ok(Some(r));
            }
        }
        Ok(None)
    }

    /// Affine selection `z -> A z + c` through `y in F(t, x)`, condition (C1).
    pub fn affine_selection_c1(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        opts: &SelectionOptions,
    ) -> Result<AffineSelection, SystemError> {
        let (_, y) = self.target(t, x, y, opts)?;
        let (a, global) = self.c1_matrix(t, x, &y)?;
        let c = &y - &a * x;
        let validity_radius = if global {
            f64::INFINITY
        } else {
            self.measure_radius(t, x, &a, std::slice::from_ref(&c), opts)?
                .ok_or_else(|| SystemError::Infeasible("no radius keeps the selection inside F".into()))?
        };
        Ok(AffineSelection {
            a,
            c,
            validity_radius,
        })
    }

    /// Fan of affine maps through `y` whose values at `x` have `h <= eps`, condition (C2).
    pub fn eps_selections_c2(
        &self,
        t: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        eps: f64,
        opts: &SelectionOptions,
    ) -> Result<EpsSelectionFan, SystemError> {
        if !(eps > 0.0) {
            return Err(SystemError::Infeasible(format!("eps = {eps} must be positive")));
        }
        let (body, y) = self.target(t, x, y, opts)?;
        let (points, theta) = decompose(&body, &self.ext_f(t, x)?, &y);

        let h_at = |s: f64| -> Vec<f64> {
            points
                .iter()
                .map(|p| {
                    let q = p + (&y - p) * s;
                    match h(&q, &body, opts.input_tol) {
                        Ok(HValue::Finite(v)) => v,
                        _ => f64::INFINITY,
                    }
                })
                .collect()
        };
        let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        let eps_prime = if points.len() == 1 {
            0.0
        } else if max(&h_at(1.0)) <= eps {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if max(&h_at(mid)) <= eps {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            if lo == 0.0 {
                return Err(SystemError::Infeasible("no inward pull meets eps".into()));
            }
            lo
        };
        let h_values = h_at(eps_prime);
        let (a, global) = self.c2_matrix(t, x, &y)?;
        let ax = &a * x;
        let c: Vec<DVector<f64>> = points.iter().map(|p| p + (&y - p) * eps_prime - &ax).collect();
        let delta = if global {
            f64::INFINITY
        } else {
            self.measure_radius(t, x, &a, &c, opts)?.ok_or_else(|| {
                SystemError::Infeasible(format!(
                    "fan leaves F(t, z) for every sampled radius down to {:.1e}",
                    opts.radius * 0.5f64.powi(opts.levels as i32)
                ))
            })?
        };
        Ok(EpsSelectionFan {
            a,
            c,
            theta,
            delta,
            eps,
            eps_prime,
            h_values,
            extreme_points: points,
        })
    }
}

/// `A = [[1, 0], [omega, 1]]` with `y = f(x) + g(x) omega`.
fn counterexample_matrix(x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let (f, g) = super::counterexample_fg(x);
    let omega = (y - f).dot(&g) / g.norm_squared();
    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, omega, 1.0])
}

/// Writes `y` as a convex combination of at most `n + 1` extreme points
/// (an optimal basic solution of the `h` program).
pub fn decompose(body: &ConvexBody, ext: &ExtremePoints, y: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<f64>) {
    match ext {
        ExtremePoints::Finite(v) => {
            let law = max_variance_law_projected(v, y);
            let points = law.support.iter().map(|(i, _)| v[*i].clone()).collect();
            let total: f64 = law.support.iter().map(|(_, w)| w).sum();
            let theta = law.support.iter().map(|(_, w)| w / total).collect();
            (points, theta)
        }
        ExtremePoints::Sphere { center, radius } => {
            let d = y - center;
            let r = d.norm();
            if *radius - r <= 1e-14 * radius.max(1.0) {
                return (vec![body.project(y)], vec![1.0]);
            }
            let dir = if r > 1e-14 {
                d / r
            } else {
                DVector::from_fn(y.len(), |i, _| if i == 0 { 1.0 } else { 0.0 })
            };
            // y = center + s dir with s in (-radius, radius)
            let w_plus = 0.5 * (1.0 + r / radius);
            (
                vec![center + &dir * *radius, center - &dir * *radius],
                vec![w_plus, 1.0 - w_plus],
            )
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConcavityWitness {
    pub condition: String,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub eps: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ConcavityReport {
    pub samples: usize,
    pub c1_pass: usize,
    pub c1_fail: usize,
    pub c2_pass: usize,
    pub c2_fail: usize,
    /// Smallest finite `rho`; `None` when every selection was global.
    pub min_rho: Option<f64>,
    /// Smallest finite `delta`; `None` when every fan was global.
    pub min_delta: Option<f64>,
    pub witnesses: Vec<ConcavityWitness>,
}

impl ConcavityReport {
    pub fn c1_holds(&self) -> bool {
        self.c1_fail == 0 && self.c1_pass > 0
    }

    pub fn c2_holds(&self) -> bool {
        self.c2_fail == 0 && self.c2_pass > 0
    }
}

fn random_target(ext: &ExtremePoints, k: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match ext {
        ExtremePoints::Finite(v) => {
            if k % 5 == 4 {
                return v[rng.gen_range(0..v.len())].clone();
            }
            let w: Vec<f64> = v.iter().map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let s: f64 = w.iter().sum();
            let mut y = DVector::zeros(v[0].len());
            for (p, wi) in v.iter().zip(&w) {
                y += p * (wi / s);
            }
            y
        }
        ExtremePoints::Sphere { center, radius } => {
            let n = center.len();
            let d = random_direction(n, rng);
            let s = if k % 5 == 4 { 1.0 } else { rng.gen::<f64>().powf(1.0 / n as f64) };
            center + d * (radius * s)
        }
    }
}

/// Sampling surrogate for the hypotheses (C1) and (C2) over `[t0, t1] x domain`.
pub fn verify_concavity_conditions(
    system: &SystemDescriptor,
    times: (f64, f64),
    domain: &Bounds,
    n_samples: usize,
    eps_grid: &[f64],
    opts: &SelectionOptions,
) -> ConcavityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut report = ConcavityReport {
        samples: n_samples,
        ..Default::default()
    };
    let fold_min = |cur: Option<f64>, v: f64| -> Option<f64> {
        if v.is_finite() {
            Some(cur.map_or(v, |c: f64| c.min(v)))
        } else {
            cur
        }
    };
    for k in 0..n_samples {
        let t = times.0 + (times.1 - times.0) * rng.gen::<f64>();
        let x = DVector::from_fn(domain.dim(), |i, _| {
            domain.lo[i] + (domain.hi[i] - domain.lo[i]) * rng.gen::<f64>()
        });
        let ext = match system.ext_f(t, &x) {
            Ok(e) => e,
            Err(e) => {
                report.c1_fail += 1;
                report.witnesses.push(witness("C1", t, &x, &x, None, e.to_string()));
                continue;
            }
        };
        let y = random_target(&ext, k, &mut rng);
        match system.affine_selection_c1(t, &x, &y, opts) {
            Ok(sel) => {
                let residual = (sel.eval(&x) - system.f_of(t, &x).unwrap().project(&y)).norm();
                if residual <= 1e-10 {
                    report.c1_pass += 1;
                    report.min_rho = fold_min(report.min_rho, sel.validity_radius);
                } else {
                    report.c1_fail += 1;
                    report
                        .witnesses
                        .push(witness("C1", t, &x, &y, None, format!("residual {residual:.3e}")));
                }
            }
            Err(e) => {
                report.c1_fail += 1;
                report.witnesses.push(witness("C1", t, &x, &y, None, e.to_string()));
            }
        }
        for &eps in eps_grid {
            match system.eps_selections_c2(t, &x, &y, eps, opts) {
                Ok(fan) => {
                    let body = system.f_of(t, &x).unwrap();
                    let target = body.project(&y);
                    let residual = (fan.mean(&x) - &target).norm();
                    let sum: f64 = fan.theta.iter().sum();
                    let h_ok = (0..fan.c.len()).all(|i| {
                        matches!(h(&fan.eval(i, &x), &body, opts.input_tol), Ok(HValue::Finite(v)) if v <= eps + 1e-9)
                    });
                    if residual <= 1e-10 && (sum - 1.0).abs() <= 1e-12 && h_ok {
                        report.c2_pass += 1;
                        report.min_delta = fold_min(report.min_delta, fan.delta);
                    } else {
                        report.c2_fail += 1;
                        report.witnesses.push(witness(
                            "C2",
                            t,
                            &x,
                            &y,
                            Some(eps),
                            format!("post-check failed: residual {residual:.3e}, weight sum {sum}"),
                        ));
                    }
                }
                Err(e) => {
                    report.c2_fail += 1;
                    report.witnesses.push(witness("C2", t, &x, &y, Some(eps), e.to_string()));
                }
            }
        }
    }
    report
}

fn witness(
    condition: &str,
    t: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
    eps: Option<f64>,
    reason: String,
) -> ConcavityWitness {
    ConcavityWitness {
        condition: condition.to_string(),
        t,
        x: x.iter().copied().collect(),
        y: y.iter().copied().collect(),
        eps,
        reason,
    }
}
