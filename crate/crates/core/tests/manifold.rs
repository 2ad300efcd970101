mod common;

use chebtaylor::bundle::{solve_bundle, BundleOptions, Stability};
use chebtaylor::bvp::{solve_affine, field_series_jacobian};
use chebtaylor::manifold::{build_manifold, choose_scale, conjugacy_error, forcing_direct, homological_system, solve_manifold};
use chebtaylor::{FlowOptions, Formulation, Mesh, Model, ModelKind, NewtonOptions, NewtonReport, Orbit, PeriodicPiecewise};
use common::{crtbp_orbit, dist, lorenz_orbit, manifold};
use nalgebra::{DMatrix, DVector, Matrix3};

/// Same orbit traversed backwards, as an orbit of the reversed field. Exact on a uniform mesh.
fn reversed(orbit: &Orbit) -> Orbit {
    let g = &orbit.gamma;
    let d = g.mesh.d();
    let mut out = PeriodicPiecewise::zeros(g.mesh.clone(), g.dim, g.m);
    for i in 0..d {
        for j in 0..g.dim {
            let src = g.piece(d - 1 - i, j);
            for (k, c) in out.piece_mut(i, j).iter_mut().enumerate() {
                *c = if k % 2 == 0 { src[k] } else { -src[k] };
            }
        }
    }
    let model = Model { field: orbit.model.field.reversed(), ..orbit.model.clone() };
    Orbit { model, gamma: out, ..orbit.clone() }
}

#[test]
fn linear_model_has_no_higher_orders() {
    let a = vec![1.0, 2.0, 0.0, 2.0, -1.0, 0.0, 0.0, 0.0, -3.0];
    let model = Model::build(&ModelKind::Linear { a }).unwrap();
    let gamma = PeriodicPiecewise::zeros(Mesh::uniform(3, 0.4).unwrap(), 3, 8);
    let orbit = Orbit { model, formulation: Formulation::AutonomousPoincare, gamma, beta: 0.0, report: NewtonReport::default(), warnings: vec![] };
    for stability in [Stability::Stable, Stability::Unstable] {
        let man = build_manifold(&orbit, stability, 6, &BundleOptions::default()).unwrap();
        for alpha in 2..=6 {
            assert!(man.coeff(alpha).coeffs.iter().all(|&c| c == 0.0));
        }
        let profile = man.decay_profile();
        assert!(profile[2..].iter().flatten().all(|&x| x == 0.0));
    }
}

#[test]
fn forcing_routes_agree_and_lorenz_first_row_vanishes() {
    let orbit = lorenz_orbit("AB", 6, 20);
    let man = manifold(&orbit, Stability::Unstable, 8, 1.0, None);
    let field = orbit.field();
    let scal = field.scalar_values();
    let g = &orbit.gamma;
    let dg: Vec<DMatrix<f64>> = (0..6).map(|i| field_series_jacobian(&field, &scal, g.domain(i), 20).0).collect();
    for alpha in 2..=8 {
        let lower: Vec<&PeriodicPiecewise> = (0..alpha).map(|a| man.coeff(a)).collect();
        let forcing = forcing_direct(&field, &lower, alpha).unwrap();
        for dom in &forcing {
            // Lorenz's first equation is linear.
            assert!(dom[..21].iter().all(|&c| c == 0.0));
        }
        let sys = homological_system(&orbit, man.lambda, alpha, dg.clone(), forcing);
        let (z, _) = solve_affine(&sys, &NewtonOptions::default()).unwrap();
        let scale = man.coeff(alpha).coeffs.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let diff = z.iter().zip(&man.coeff(alpha).coeffs).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(diff <= 1e-10 * scale.max(1e-300), "alpha {alpha}: {diff:e} against {scale:e}");
    }
}

#[test]
fn chart_constraints_at_the_zero_section() {
    let orbit = lorenz_orbit("AB", 10, 30);
    let man = manifold(&orbit, Stability::Unstable, 10, 1.0, None);
    let h = 1e-6;
    for s in 0..40 {
        let t = man.period() * (s as f64 + 0.3) / 40.0;
        assert_eq!(man.eval(t, 0.0).unwrap(), orbit.eval(t));
        let (p, m) = (man.eval(t, h).unwrap(), man.eval(t, -h).unwrap());
        let v = man.bundle.v.eval(t);
        for j in 0..3 {
            assert!(((p[j] - m[j]) / (2.0 * h) - v[j]).abs() <= 1e-4);
        }
    }
    assert!(man.eval(0.1, 1.0 + 1e-12).is_err());
}

#[test]
fn scale_covariance() {
    let orbit = lorenz_orbit("AB", 8, 30);
    let a = manifold(&orbit, Stability::Unstable, 12, 1.0, None);
    let b = manifold(&orbit, Stability::Unstable, 12, 4.0, None);
    let c = manifold(&orbit, Stability::Unstable, 12, 2.0, None);
    for alpha in 0..=12 {
        let s4 = 2f64.powi(alpha as i32);
        let s2 = 2f64.powf(alpha as f64 / 2.0);
        for ((x, y), z) in a.coeff(alpha).coeffs.iter().zip(&b.coeff(alpha).coeffs).zip(&c.coeff(alpha).coeffs) {
            assert!((y - s4 * x).abs() <= 1e-6 * (s4 * x).abs().max(1e-12 * s4), "alpha {alpha}");
            assert!((z - s2 * x).abs() <= 1e-6 * (s2 * x).abs().max(1e-12 * s2), "alpha {alpha}");
        }
    }
}

/// Second-variation oracle for `A_2(0)` on the unstable manifold of a Lorenz orbit:
/// differentiating `Phi_tau(P(0, s)) = P(0, e^{lambda tau} s)` twice at `s = 0`.
#[test]
fn second_order_matches_variational_jet() {
    let orbit = lorenz_orbit("AB", 10, 50);
    let man = manifold(&orbit, Stability::Unstable, 4, 1.0, None);
    let (sig, rho, beta) = (10.0, 28.0, 8.0 / 3.0);
    let jac = |x: &[f64]| Matrix3::new(-sig, sig, 0.0, rho - x[2], -1.0, -x[0], x[1], x[0], -beta);
    let hess = |y: &[f64]| [0.0, -2.0 * y[0] * y[2], 2.0 * y[0] * y[1]];
    // State: x (3), monodromy columns (9), first variation y (3), second variation w (3).
    let rhs = |u: &[f64]| -> Vec<f64> {
        let x = &u[0..3];
        let j = jac(x);
        let mut out = vec![sig * (x[1] - x[0]), rho * x[0] - x[0] * x[2] - x[1], x[0] * x[1] - beta * x[2]];
        for c in 0..3 {
            let col = nalgebra::Vector3::new(u[3 + c * 3], u[4 + c * 3], u[5 + c * 3]);
            out.extend((j * col).iter());
        }
        let y = nalgebra::Vector3::new(u[12], u[13], u[14]);
        out.extend((j * y).iter());
        let w = nalgebra::Vector3::new(u[15], u[16], u[17]);
        let h = hess(&u[12..15]);
        out.extend((j * w).iter().zip(h).map(|(a, b)| a + b));
        out
    };
    let mut u = orbit.eval(0.0);
    u.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    u.extend(man.bundle.v.eval(0.0));
    u.extend([0.0; 3]);
    let steps = 40_000;
    let hstep = orbit.period() / steps as f64;
    for _ in 0..steps {
        let k1 = rhs(&u);
        let k2 = rhs(&u.iter().zip(&k1).map(|(a, b)| a + 0.5 * hstep * b).collect::<Vec<_>>());
        let k3 = rhs(&u.iter().zip(&k2).map(|(a, b)| a + 0.5 * hstep * b).collect::<Vec<_>>());
        let k4 = rhs(&u.iter().zip(&k3).map(|(a, b)| a + hstep * b).collect::<Vec<_>>());
        for q in 0..u.len() {
            u[q] += hstep / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]);
        }
    }
    let monodromy = Matrix3::from_fn(|r, c| u[3 + c * 3 + r]);
    let mu = (man.lambda * orbit.period()).exp();
    let w = DVector::from_column_slice(&u[15..18]);
    let lhs = DMatrix::from_fn(3, 3, |r, c| if r == c { mu * mu } else { 0.0 } - monodromy[(r, c)]);
    let a2 = lhs.lu().solve(&w).unwrap() * 0.5;
    let got = man.coeff(2).eval(0.0);
    for j in 0..3 {
        assert!((got[j] - a2[j]).abs() <= 1e-7 * a2.amax(), "{got:?} vs {a2:?}");
    }
}

#[test]
fn table_grade_lorenz_manifold() {
    let orbit = lorenz_orbit("AB", 50, 10);
    let man = manifold(&orbit, Stability::Stable, 100, 250.0, Some(9));
    assert!(man.invariance_defect(50, 17) <= 1e-6);

    // At K = 250 the worst domain only drops about twenty decades; the smallest K of the sweep
    // shows the full decay.
    let small = manifold(&orbit, Stability::Stable, 100, 50.0, Some(9));
    let profile = small.decay_profile();
    for i in 0..50 {
        assert_eq!(profile[0][i], orbit.gamma.tail_norm(i));
        assert!(profile[1][i].log10() - profile[100][i].log10() >= 30.0, "domain {i}: {:e} {:e}", profile[1][i], profile[100][i]);
    }

    let flow = FlowOptions::tight();
    let mut last = 0.0;
    for t0 in [1e-5, 1e-2, 1.0] {
        let e = conjugacy_error(&man, t0, 40, &flow).unwrap().max;
        assert!(e >= last, "t0 = {t0}: {e:e} < {last:e}");
        last = e;
    }
    assert_eq!(conjugacy_error(&man, 0.0, 40, &flow).unwrap().max, 0.0);
    assert!(conjugacy_error(&man, -1.0, 40, &flow).unwrap_err().is_config());

    let cut = man.truncated(95).unwrap();
    // |f| <= |a_0| + 2 sum |a_k| bounds a Chebyshev series by twice its coefficient sum.
    let bound: f64 = (96..=100).map(|a| 2.0 * man.order_norm(a)).sum();
    for s in 0..50 {
        let t = man.period() * s as f64 / 50.0;
        assert!(dist(&man.eval(t, 1.0).unwrap(), &cut.eval(t, 1.0).unwrap()) <= bound);
    }
    assert!(man.truncated(101).is_err());
}

#[test]
fn choose_scale_terminates() {
    let orbit = lorenz_orbit("ABB", 10, 30);
    let r = choose_scale(&orbit, Stability::Unstable, 50, 1e-16, &BundleOptions::default()).unwrap();
    assert!(r.probes <= 15, "{} probes", r.probes);
    let v = r.manifold.order_norm(50).log10();
    assert!((v + 16.0).abs() <= 3.0, "{v}");
}

#[test]
fn lifted_manifold_stays_consistent() {
    let orbit = crtbp_orbit(1, 3.17, 8, 50);
    let man = manifold(&orbit, Stability::Stable, 50, 5.0, Some(10));
    let lift = &orbit.model.lift;
    for s in 0..40 {
        for sigma in [-1.0, -0.3, 0.5, 1.0] {
            let p = man.eval(man.period() * s as f64 / 40.0, sigma).unwrap();
            assert!(lift.consistency(&p) <= 1e-8, "{s} {sigma}: {:e}", lift.consistency(&p));
        }
    }
}

#[test]
fn unstable_manifold_is_stable_manifold_of_reversed_field() {
    let orbit = lorenz_orbit("AB", 10, 40);
    let unstable = manifold(&orbit, Stability::Unstable, 8, 1.0, None);
    let rev = reversed(&orbit);
    let b = solve_bundle(&rev, Stability::Stable, &BundleOptions::default()).unwrap();
    let stable = solve_manifold(&rev, &b, 8, &NewtonOptions::default()).unwrap();
    assert!((stable.lambda + unstable.lambda).abs() <= 1e-9);
    let tau = orbit.period();
    let (vs, vu) = (stable.bundle.v.eval(0.0), unstable.bundle.v.eval(0.0));
    let dot: f64 = vs.iter().zip(&vu).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // P_s(t, sigma) = P_u(tau - t, c sigma) with c fixed by the two bundles.
    let c = norm(&vs) / norm(&vu) * dot.signum();
    for q in 1..40 {
        let t = tau * q as f64 / 40.0;
        for sigma in [-0.4, 0.25, 0.4] {
            let a = stable.eval(t, sigma).unwrap();
            let b = unstable.eval(tau - t, c * sigma).unwrap();
            assert!(dist(&a, &b) <= 1e-8, "t = {t}, sigma = {sigma}");
        }
    }
}
