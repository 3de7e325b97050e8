//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use bangbang::bolza::{BolzaProblem, OracleMode, RelaxedOptions};
use bangbang::convex::ConvexBody;
use bangbang::exchange::{exchange, exchange_at_level, BundleCell, CellKind, ExchangeOptions, SelectionBundle};
use bangbang::harness::{run_scenario, Command, ExperimentConfig};
use bangbang::purify::{
    purify, reference_trajectory, v_deficit, v_identity_integral, CellFallback, PurifyOptions,
};
use bangbang::systems::{
    catalog, verify_concavity_conditions, SelectionOptions, SystemDescriptor, SystemError,
};
use bangbang::trajectory::ControlValue;
use bangbang::variance::{h, simplex_oracle, two_point_oracle, HValue};
use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(no: usize, name: &str, o: &Outcome) {
    println!(
        "criterion {no} [{name}]: {} ({})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
}

fn hv(y: &DVector<f64>, body: &ConvexBody) -> f64 {
    match h(y, body, 1e-9).expect("h evaluates") {
        HValue::Finite(v) => v,
        HValue::MinusInfinity => f64::NEG_INFINITY,
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let u1: f64 = rng.gen::<f64>().max(1e-300);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

fn convex_combo(v: &[DVector<f64>], rng: &mut ChaCha8Rng) -> DVector<f64> {
    let w: Vec<f64> = v.iter().map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    v.iter().zip(&w).fold(DVector::zeros(v[0].len()), |acc, (p, c)| acc + p * (c / s))
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut vz, mut cheb, mut equi, mut conc, mut ball, mut orc): (f64, f64, f64, f64, f64, f64) =
        (0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0);
    let mut bodies = Vec::new();
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(n + 1..=10);
        let pts: Vec<DVector<f64>> = (0..m).map(|_| gaussian(n, &mut rng) * 2.0).collect();
        bodies.push(ConvexBody::polytope(pts).expect("random polytope"));
    }
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let c = gaussian(n, &mut rng);
        let r = rng.gen_range(0.1..3.0);
        bodies.push(ConvexBody::ball(c, r).unwrap());
    }
    for body in &bodies {
        let n = body.dim();
        let r = body.chebyshev_radius();
        let inner: Vec<DVector<f64>> = match body.vertices() {
            Some(v) => {
                for p in &v {
                    vz = vz.max(hv(p, body).abs());
                }
                v
            }
            None => {
                let ConvexBody::Ball { center, radius } = body else { unreachable!() };
                let mut v = Vec::new();
                for _ in 0..6 {
                    let d = gaussian(n, &mut rng).normalize();
                    let p = center + &d * *radius;
                    vz = vz.max(hv(&p, body).abs());
                    v.push(p);
                }
                v
            }
        };
        for _ in 0..4 {
            let y1 = convex_combo(&inner, &mut rng);
            let y2 = convex_combo(&inner, &mut rng);
            let (h1, h2) = (hv(&y1, body), hv(&y2, body));
            cheb = cheb.max(h1 - r);
            let lam: f64 = rng.gen();
            let mid = &y1 * lam + &y2 * (1.0 - lam);
            conc = conc.max(lam * h1 + (1.0 - lam) * h2 - hv(&mid, body));
            let s = rng.gen_range(0.2..3.0);
            let c = gaussian(n, &mut rng);
            let moved = body.translate_scale(&c, s).unwrap();
            equi = equi.max((hv(&(&c + &y1 * s), &moved) - s * h1).abs());
            if let ConvexBody::Ball { center, radius } = body {
                let exact = (radius * radius - (&y1 - center).norm_squared()).max(0.0).sqrt();
                ball = ball.max((h1 - exact).abs());
            }
        }
    }
    // exhaustive-law oracles on segments and simplices
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let seg = vec![gaussian(n, &mut rng), gaussian(n, &mut rng)];
        let y = convex_combo(&seg, &mut rng);
        let body = ConvexBody::polytope(seg.clone()).unwrap();
        orc = orc.max((hv(&y, &body) - two_point_oracle(&seg, &y).unwrap()).abs());
        let simplex: Vec<DVector<f64>> = (0..=n).map(|_| gaussian(n, &mut rng) * 2.0).collect();
        let vol = DMatrix::from_columns(&simplex[1..].iter().map(|p| p - &simplex[0]).collect::<Vec<_>>())
            .determinant()
            .abs();
        if vol < 1e-2 {
            continue;
        }
        let y = convex_combo(&simplex, &mut rng);
        let body = ConvexBody::polytope(simplex.clone()).unwrap();
        orc = orc.max((hv(&y, &body) - simplex_oracle(&simplex, &y).unwrap()).abs());
    }
    let pass = vz <= 1e-9 && cheb <= 1e-7 && equi <= 1e-9 && conc <= 1e-7 && ball <= 1e-6 && orc <= 1e-8;
    Outcome {
        pass,
        detail: format!(
            "vertex {vz:.1e} <= 1e-9, chebyshev excess {cheb:.1e} <= 1e-7, equivariance {equi:.1e} <= 1e-9, \
             concavity {conc:.1e} <= 1e-7, ball {ball:.1e} <= 1e-6, oracle {orc:.1e} <= 1e-8"
        ),
    }
}

/// `x' = x + u`, `u in {-1, 1}`, relaxed weights (1/2, 1/2), `cells` base cells on `[s, e]`.
fn linear1d_bundle(s: f64, e: f64, cells: usize) -> SelectionBundle {
    let cell = BundleCell::new(
        DMatrix::from_element(1, 1, 1.0),
        vec![dvector![-1.0], dvector![1.0]],
        vec![0.5, 0.5],
        CellKind::Fan,
    );
    SelectionBundle::new(s, e, vec![cell; cells]).unwrap()
}

fn criterion_2() -> Outcome {
    let k = 4;
    let mut worst: f64 = 0.0;
    let mut max_level = 0;
    let mut ok = true;
    let opts = ExchangeOptions {
        tol: 1e-6,
        min_level: 0,
        max_refine: 12,
    };
    for j in 0..k {
        let (s, e) = (j as f64 / k as f64, (j + 1) as f64 / k as f64);
        let b = linear1d_bundle(s, e, 4);
        match exchange(&b, &dvector![s.exp()], &dvector![e.exp()], &opts) {
            Ok(r) => {
                worst = worst.max(r.endpoint_error);
                max_level = max_level.max(r.level);
            }
            Err(_) => ok = false,
        }
    }
    let b = linear1d_bundle(0.0, 1.0, 4);
    let target = dvector![1f64.exp()];
    let errs: Vec<f64> = (2..=8)
        .map(|l| exchange_at_level(&b, &dvector![1.0], &target, l).endpoint_error)
        .collect();
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Outcome {
        pass: ok && worst <= 1e-6 && max_level <= 12 && min_ratio >= 1.8,
        detail: format!(
            "{k} intervals, max endpoint error {worst:.2e} <= 1e-6 at level {max_level} <= 12, \
             min halving ratio {min_ratio:.3} >= 1.8 over levels 2..8"
        ),
    }
}

fn criterion_3_and_4() -> (Outcome, Outcome) {
    let mut pass3 = true;
    let mut pass4 = true;
    let mut checked4 = 0;
    let mut worst_c0_margin = f64::NEG_INFINITY;
    let mut worst_ep: f64 = 0.0;
    let mut worst_bound_ratio: f64 = 0.0;
    let mut decay = Vec::new();
    for name in ["linear1d", "radial-square", "polytope-tri"] {
        let e = catalog(name).unwrap();
        let reference = reference_trajectory(&e, 4096).unwrap();
        for k in [4, 8, 16, 32] {
            for eps in [1e-3, 1e-4] {
                let p = purify(&e.system, &reference, k, eps, &PurifyOptions::default()).unwrap();
                let r = &p.report;
                if r.all_tol_met {
                    checked4 += 1;
                    let ratio = r.l_after.powi(2) / r.final_bound;
                    worst_bound_ratio = worst_bound_ratio.max(ratio);
                    pass4 &= r.l_after.powi(2) <= r.final_bound;
                } else if name != "polytope-tri" {
                    pass4 = false;
                }
                if name == "polytope-tri" {
                    continue;
                }
                let (a, b) = r.interval;
                let bound = 2.0 * r.m_bound * (b - a) / k as f64 + 1e-4;
                worst_c0_margin = worst_c0_margin.max(r.c0_distance - bound);
                let pins = (0..=k).map(|j| {
                    let t = a + (b - a) * j as f64 / k as f64;
                    (p.trajectory.state_at(t) - reference.state_at(t)).norm()
                });
                let ep = pins.fold(r.max_endpoint_error, f64::max);
                worst_ep = worst_ep.max(ep);
                pass3 &= r.c0_distance <= bound && ep <= 1e-6;
                if k == 32 && eps == 1e-4 {
                    pass3 &= r.l_after <= 0.05 * r.l_before;
                    decay.push(format!("{name} {:.2e}/{:.2e}", r.l_after, r.l_before));
                }
            }
        }
    }
    (
        Outcome {
            pass: pass3,
            detail: format!(
                "linear1d, radial-square, k in 4..32: max c0 - (2M(b-a)/k + 1e-4) = {worst_c0_margin:.2e} <= 0, \
                 endpoints {worst_ep:.1e} <= 1e-6, L_after/L_before at k=32 eps=1e-4: {}",
                decay.join(", ")
            ),
        },
        Outcome {
            pass: pass4 && checked4 > 0,
            detail: format!(
                "{checked4} runs with every exchange within tolerance, max L_after^2 / (eps((b-a)+M^2)) = \
                 {worst_bound_ratio:.2e} <= 1"
            ),
        },
    )
}

fn criterion_5() -> Outcome {
    let e = catalog("counterexample-6").unwrap();
    let sys = &e.system;
    let reference = reference_trajectory(&e, 4096).unwrap();
    let opts = PurifyOptions {
        fallback: CellFallback::ExtremeFan,
        min_level: 2,
        max_level: 2,
        ..PurifyOptions::default()
    };
    let mut pass = true;
    let mut min_def = f64::INFINITY;
    let mut max_diff: f64 = 0.0;
    let mut bang = true;
    for k in [4, 8, 16, 32, 64] {
        let p = purify(sys, &reference, k, 1e-3, &opts).unwrap();
        bang &= p
            .control
            .values
            .iter()
            .all(|v| matches!(v, ControlValue::Vector(u) if u[0].abs() == 1.0));
        let d = v_deficit(sys, &p.trajectory).unwrap();
        let id = v_identity_integral(&p.control, &e.x0, e.interval, p.trajectory.len() - 1).unwrap();
        min_def = min_def.min(d);
        max_diff = max_diff.max((d - id).abs());
        pass &= d > 0.0 && (d - id).abs() <= 1e-6;
    }
    pass &= bang;
    // (C2) at sampled interior targets
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut infeasible, total) = (0, 200);
    for _ in 0..total {
        let t: f64 = rng.gen();
        let x = dvector![rng.gen_range(-0.5..0.5), rng.gen_range(0.5..1.5)];
        let s: f64 = rng.gen_range(-0.9..0.9);
        let y = dvector![x[0] + s, x[1] + x[0] * s];
        if let Err(SystemError::Infeasible(_)) = sys.eps_selections_c2(t, &x, &y, 1e-3, &SelectionOptions::default()) {
            infeasible += 1;
        }
    }
    let frac = infeasible as f64 / total as f64;
    let zero = v_deficit(sys, &reference).unwrap();
    pass &= frac >= 0.95 && zero.abs() <= 1e-8;
    Outcome {
        pass,
        detail: format!(
            "k in 4..64 bang-bang {bang}, min v_deficit {min_def:.2e} > 0, |deficit - identity| {max_diff:.1e} <= 1e-6, \
             C2 infeasible at {:.1}% >= 95%, u=0 deficit {zero:.1e} <= 1e-8",
            100.0 * frac
        ),
    }
}

fn criterion_6() -> Outcome {
    let p = BolzaProblem::concave_1d();
    let grid = vec![dvector![-1.0], dvector![0.0], dvector![1.0]];
    let exhaustive = p.brute_force_oracle(8, &grid, OracleMode::Exhaustive { limit: 1 << 20 }).unwrap();
    let beam = p.brute_force_oracle(64, &grid, OracleMode::Beam { width: 32 }).unwrap();
    let relaxed = p.solve_relaxed(32, 9, &RelaxedOptions::default()).unwrap();
    let s = p.purify_and_extract(9, &relaxed, 32, 1e-4, &PurifyOptions::default()).unwrap();
    let limit = -1.0 / 3.0;
    let pass = (s.cost - limit).abs() <= 1e-3
        && s.cost >= beam.cost - 1e-6
        && s.bang_fraction >= 0.99
        && s.below_m_fraction >= 0.99;
    Outcome {
        pass,
        detail: format!(
            "oracle N=8 {:.6}, N=64 beam {:.6}, relaxed {:.6}, purified {:.6} (|gap to -1/3| {:.1e} <= 1e-3), \
             |u*|=1 on {:.1}%, x0' < M on {:.1}%",
            exhaustive.cost,
            beam.cost,
            relaxed.cost,
            s.cost,
            (s.cost - limit).abs(),
            100.0 * s.bang_fraction,
            100.0 * s.below_m_fraction
        ),
    }
}

fn criterion_7() -> Outcome {
    let opts = SelectionOptions::default();
    let eps = [1e-2, 1e-3];
    let run = |name: &str| {
        let e = catalog(name).unwrap();
        verify_concavity_conditions(&e.system, e.interval, &e.check_box, 200, &eps, &opts)
    };
    let radial = run("radial-square");
    let tri = run("polytope-tri");
    let counter = run("counterexample-6");
    let e = catalog("polytope-tri").unwrap();
    let SystemDescriptor::PolytopeField(field) = &e.system else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut stable = true;
    for _ in 0..200 {
        let t: f64 = rng.gen();
        let x = DVector::from_fn(2, |i, _| rng.gen_range(e.check_box.lo[i]..e.check_box.hi[i]));
        let mut j = field.active_incidence(t, &x);
        for l in &mut j {
            l.sort();
        }
        stable &= j == field.incidence;
    }
    let pass = radial.c1_holds()
        && radial.c2_holds()
        && tri.c1_holds()
        && tri.c2_holds()
        && stable
        && counter.c1_holds()
        && !counter.c2_holds()
        && counter.witnesses.iter().any(|w| w.condition == "C2");
    Outcome {
        pass,
        detail: format!(
            "radial C1 {}/{} C2 {}/{}; triangle C1 {}/{} C2 {}/{} incidence stable {stable}; \
             counterexample C1 {}/{} C2 fails {} with {} witnesses",
            radial.c1_pass,
            radial.samples,
            radial.c2_pass,
            radial.samples * eps.len(),
            tri.c1_pass,
            tri.samples,
            tri.c2_pass,
            tri.samples * eps.len(),
            counter.c1_pass,
            counter.samples,
            counter.c2_fail,
            counter.witnesses.len()
        ),
    }
}

fn criterion_8() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.scenario = "radial-square".into();
    cfg.k_list = vec![4, 8];
    cfg.samples = 40;
    let commands = [
        Command::HEval,
        Command::Purify,
        Command::Convergence,
        Command::Counterexample,
        Command::Bolza,
        Command::VerifyConcavity,
    ];
    let mut same = 0;
    let mut total = 0;
    for c in commands {
        let a = run_scenario(c, &cfg).unwrap();
        let b = run_scenario(c, &cfg).unwrap();
        for (x, y) in a.artifacts.iter().zip(&b.artifacts) {
            total += 1;
            if x.name == y.name && x.body == y.body {
                same += 1;
            }
        }
    }
    Outcome {
        pass: same == total && total > 0,
        detail: format!("{same}/{total} artifact bodies byte-identical across two runs"),
    }
}

#[test]
fn acceptance() {
    let (o3, o4) = criterion_3_and_4();
    let outcomes = [
        ("h-functional", criterion_1()),
        ("lyapunov-exchange", criterion_2()),
        ("purification-bound", o3),
        ("final-likelihood-estimate", o4),
        ("counterexample", criterion_5()),
        ("bolza", criterion_6()),
        ("concavity-verifier", criterion_7()),
        ("determinism", criterion_8()),
    ];
    for (i, (name, o)) in outcomes.iter().enumerate() {
        report(i + 1, name, o);
    }
    let failed: Vec<usize> = outcomes
        .iter()
        .enumerate()
        .filter(|(_, (_, o))| !o.pass)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
