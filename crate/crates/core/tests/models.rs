mod common;

use approx::assert_abs_diff_eq;
use chebtaylor::models::{check_lift, crfbp, crfbp_primaries, crtbp, crtbp_energy, kepler, lorenz};
use chebtaylor::orbit::crtbp_libration;
use chebtaylor::{LiftMap, Model, ModelKind};
use common::{fd_jacobian, rk4, PAPER_MASSES};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const MU: f64 = 0.0123;

/// Planar CRTBP written out by hand: `(x, x', y, y')`.
fn crtbp_by_hand(mu: f64, u: &[f64]) -> [f64; 4] {
    let (x, vx, y, vy) = (u[0], u[1], u[2], u[3]);
    let r1 = ((x + mu).powi(2) + y * y).sqrt();
    let r2 = ((x - 1.0 + mu).powi(2) + y * y).sqrt();
    [
        vx,
        2.0 * vy + x - (1.0 - mu) * (x + mu) / r1.powi(3) - mu * (x - 1.0 + mu) / r2.powi(3),
        vy,
        -2.0 * vx + y - (1.0 - mu) * y / r1.powi(3) - mu * y / r2.powi(3),
    ]
}

fn potential(masses: [f64; 3], p: &[[f64; 3]; 3], x: f64, y: f64, z: f64) -> f64 {
    let mut o = 0.5 * (x * x + y * y);
    for (m, q) in masses.iter().zip(p) {
        o += m / ((x - q[0]).powi(2) + (y - q[1]).powi(2) + (z - q[2]).powi(2)).sqrt();
    }
    o
}

fn random_planar(rng: &mut StdRng) -> Vec<f64> {
    vec![rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
}

#[test]
fn lorenz_examples() {
    let f = lorenz(10.0, 27.0, 8.0 / 3.0);
    assert_eq!(f.eval(&[0.0; 3]), vec![0.0; 3]);
    let v = f.eval(&[1.0, 1.0, 1.0]);
    assert_abs_diff_eq!(v[0], 0.0);
    assert_abs_diff_eq!(v[1], 25.0, epsilon = 1e-14);
    assert_abs_diff_eq!(v[2], -5.0 / 3.0, epsilon = 1e-14);
}

#[test]
fn crtbp_projection_matches_hand_field() {
    let (f, lift) = crtbp(MU).unwrap();
    let mut rng = StdRng::seed_from_u64(7);
    let mut taken = 0;
    while taken < 20 {
        let u = random_planar(&mut rng);
        if !lift.guard(&u, 0.05) {
            continue;
        }
        taken += 1;
        let big = f.eval(&lift.lift(&u));
        let hand = crtbp_by_hand(MU, &u);
        for j in 0..4 {
            assert_abs_diff_eq!(big[j], hand[j], epsilon = 1e-10 * hand[j].abs().max(1.0));
        }
        assert_eq!(lift.project(&lift.lift(&u)), u);
    }
}

#[test]
fn crtbp_jacobi_integral_along_arc() {
    let (f, lift) = crtbp(MU).unwrap();
    let u0 = [0.8, 0.0, 0.0, 0.1];
    let v0 = lift.lift(&u0);
    let e0 = crtbp_energy(MU, &v0);
    let mut v = v0;
    for _ in 0..10 {
        v = rk4(&f, &v, 0.1, 400);
        assert!((crtbp_energy(MU, &v) - e0).abs() < 1e-8);
    }
}

#[test]
fn crtbp_l1_is_an_equilibrium() {
    // Bisection on Omega_x along the axis between the primaries.
    let ox = |x: f64| x - (1.0 - MU) * (x + MU) / (x + MU).abs().powi(3) - MU * (x - 1.0 + MU) / (x - 1.0 + MU).abs().powi(3);
    let (mut a, mut b) = (-MU + 1e-3, 1.0 - MU - 1e-3);
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if ox(a) * ox(c) <= 0.0 {
            b = c;
        } else {
            a = c;
        }
    }
    let xl = 0.5 * (a + b);
    assert_abs_diff_eq!(crtbp_libration(MU, 1).unwrap(), xl, epsilon = 1e-10);
    let (f, lift) = crtbp(MU).unwrap();
    let g = f.eval(&lift.lift(&[xl, 0.0, 0.0, 0.0]));
    for v in &g[..4] {
        assert!(v.abs() < 1e-10);
    }
}

#[test]
fn crfbp_equal_masses_form_centered_triangle() {
    let p = crfbp_primaries(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0).unwrap();
    let d = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let s = d(p[0], p[1]);
    assert_abs_diff_eq!(d(p[1], p[2]), s, epsilon = 1e-12);
    assert_abs_diff_eq!(d(p[2], p[0]), s, epsilon = 1e-12);
    for c in 0..2 {
        assert_abs_diff_eq!(p.iter().map(|q| q[c]).sum::<f64>(), 0.0, epsilon = 1e-12);
    }
}

#[test]
fn crfbp_paper_masses_center_of_mass() {
    let (m1, m2, m3) = PAPER_MASSES;
    let p = crfbp_primaries(m1, m2, m3).unwrap();
    for c in 0..3 {
        assert_abs_diff_eq!(m1 * p[0][c] + m2 * p[1][c] + m3 * p[2][c], 0.0, epsilon = 1e-12);
    }
    assert!(crfbp_primaries(0.0003, 0.0010, 0.9987).is_err());
    assert!(crfbp_primaries(0.5, 0.3, 0.3).is_err());
}

#[test]
fn crfbp_field_reproduces_potential_gradient() {
    let (m1, m2, m3) = PAPER_MASSES;
    let (f, lift, p) = crfbp(m1, m2, m3).unwrap();
    let masses = [m1, m2, m3];
    let mut rng = StdRng::seed_from_u64(11);
    let mut taken = 0;
    while taken < 20 {
        let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.3..1.3)).collect();
        if !lift.guard(&u, 0.05) {
            continue;
        }
        taken += 1;
        let (x, y, z) = (u[0], u[2], u[4]);
        let mut om = [x, y, 0.0];
        for (m, q) in masses.iter().zip(&p) {
            let r3 = ((x - q[0]).powi(2) + (y - q[1]).powi(2) + (z - q[2]).powi(2)).powf(1.5);
            om[0] -= m * (x - q[0]) / r3;
            om[1] -= m * (y - q[1]) / r3;
            om[2] -= m * (z - q[2]) / r3;
        }
        let g = f.eval(&lift.lift(&u));
        assert_abs_diff_eq!(g[1] - 2.0 * u[3], om[0], epsilon = 1e-10 * om[0].abs().max(1.0));
        assert_abs_diff_eq!(g[3] + 2.0 * u[1], om[1], epsilon = 1e-10 * om[1].abs().max(1.0));
        assert_abs_diff_eq!(g[5], om[2], epsilon = 1e-10 * om[2].abs().max(1.0));
        // And the gradient really is that of the potential.
        let h = 1e-5;
        let fd = (potential(masses, &p, x + h, y, z) - potential(masses, &p, x - h, y, z)) / (2.0 * h);
        assert!((fd - om[0]).abs() < 1e-6 * om[0].abs().max(1.0));
    }
}

#[test]
fn kepler_examples() {
    let (f, lift) = kepler(1.0).unwrap();
    let x = [1.0, 0.0];
    let r = lift.lift(&x);
    assert_eq!(f.eval(&r), vec![0.0, -1.0, 0.0]);
    // DR f = (f, -z^2 sign(x) x') = (0, -1, 0) at rest.
    assert_eq!(lift.original_field(&x, &f), vec![0.0, -1.0]);
    assert!(kepler(0.0).is_err());
}

#[test]
fn kepler_trajectory_stays_on_the_lift_graph() {
    let (f, lift) = kepler(1.0).unwrap();
    let v0 = lift.lift(&[1.0, 0.3]);
    let v = rk4(&f, &v0, 1.0, 4000);
    assert!(v[0] > 0.1);
    assert!(lift.consistency(&v) < 1e-8);
}

#[test]
fn lifts_are_infinitesimal_conjugacies() {
    // Draws keep a 0.1 distance from the singular set, where the extrapolated differences
    // still start from a usable step.
    let mut rng = StdRng::seed_from_u64(3);
    let (kf, kl) = kepler(1.0).unwrap();
    let draw = |n: usize, lift: &LiftMap, rng: &mut StdRng| {
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        lift.guard(&x, 0.1).then_some(x)
    };
    let r = check_lift(&kl, &kf, 50, || draw(2, &kl, &mut rng)).unwrap();
    assert!(r <= 1e-8, "kepler {r:e}");
    let (cf, cl) = crtbp(MU).unwrap();
    let r = check_lift(&cl, &cf, 50, || draw(4, &cl, &mut rng)).unwrap();
    assert!(r <= 1e-8, "crtbp {r:e}");
    let (m1, m2, m3) = PAPER_MASSES;
    let (ff, fl, _) = crfbp(m1, m2, m3).unwrap();
    let r = check_lift(&fl, &ff, 50, || draw(6, &fl, &mut rng)).unwrap();
    assert!(r <= 1e-8, "crfbp {r:e}");
    let lf = lorenz(10.0, 28.0, 8.0 / 3.0);
    let id = LiftMap::Identity { d: 3 };
    let r = check_lift(&id, &lf, 10, || draw(3, &id, &mut rng)).unwrap();
    assert!(r <= 1e-8, "identity {r:e}");
}

#[test]
fn check_lift_errors() {
    let (f, lift) = kepler(1.0).unwrap();
    assert!(check_lift(&lift, &f, 0, || Some(vec![1.0, 0.0])).is_err());
    // Every draw sits on the singular set.
    assert!(check_lift(&lift, &f, 3, || Some(vec![0.0, 1.0])).is_err());
}

fn models() -> Vec<Model> {
    let (m1, m2, m3) = PAPER_MASSES;
    [
        ModelKind::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 },
        ModelKind::Crtbp { mu: MU },
        ModelKind::Crfbp { m1, m2, m3 },
        ModelKind::Kepler { mass: 1.0 },
    ]
    .iter()
    .map(|k| Model::build(k).unwrap())
    .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn lorenz_divergence_is_constant(x in prop::collection::vec(-30.0f64..30.0, 3)) {
        let f = lorenz(10.0, 28.0, 8.0 / 3.0);
        prop_assert!((f.divergence(&x) + (10.0 + 1.0 + 8.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_differences(seed in 0u64..1000) {
        let mut rng = StdRng::seed_from_u64(seed);
        for model in models() {
            let x: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let j = model.field.jacobian(&x);
            let fd = fd_jacobian(&model.field, &x);
            let scale = fd.iter().flatten().fold(1.0f64, |a, v| a.max(v.abs()));
            for r in 0..x.len() {
                for c in 0..x.len() {
                    prop_assert!((j[(r, c)] - fd[r][c]).abs() <= 1e-6 * scale, "{} ({r},{c})", model.name());
                }
            }
        }
    }

    #[test]
    fn projection_of_lift_is_identity(u in prop::collection::vec(-2.0f64..2.0, 6)) {
        let (m1, m2, m3) = PAPER_MASSES;
        let (f, lift, _) = crfbp(m1, m2, m3).unwrap();
        prop_assume!(lift.guard(&u, 1e-2));
        prop_assert_eq!(lift.project(&lift.lift(&u)), u.clone());
        let g = f.eval(&lift.lift(&u));
        let orig = lift.original_field(&u, &f);
        for j in 0..6 {
            prop_assert!((g[j] - orig[j]).abs() <= 1e-10 * orig[j].abs().max(1.0));
        }
    }
}
