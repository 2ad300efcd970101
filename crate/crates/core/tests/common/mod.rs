#![allow(dead_code)]

use chebtaylor::bundle::{BundleOptions, Stability};
use chebtaylor::manifold::build_manifold;
use chebtaylor::orbit::{seed_guess, seed_orbit, solve_orbit, SeedHint};
use chebtaylor::{Formulation, ManifoldParam, Mesh, Model, ModelKind, NewtonOptions, Orbit, OrbitProblem, PolyField};

pub const PAPER_MASSES: (f64, f64, f64) = (0.9987, 0.0010, 0.0003);
pub const CRFBP_PROPORTIONS: [f64; 4] = [0.0907, 0.607, 0.22, 0.0823];

pub fn lorenz() -> Model {
    Model::build(&ModelKind::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }).unwrap()
}

pub fn crtbp_model() -> Model {
    Model::build(&ModelKind::Crtbp { mu: 0.0123 }).unwrap()
}

pub fn crfbp_model() -> Model {
    let (m1, m2, m3) = PAPER_MASSES;
    Model::build(&ModelKind::Crfbp { m1, m2, m3 }).unwrap()
}

/// Classical fourth-order Runge-Kutta with a fixed step, independent of the library integrator.
pub fn rk4(f: &PolyField, x0: &[f64], t: f64, steps: usize) -> Vec<f64> {
    let h = t / steps as f64;
    let mut x = x0.to_vec();
    let axpy = |x: &[f64], k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    for _ in 0..steps {
        let k1 = f.eval(&x);
        let k2 = f.eval(&axpy(&x, &k1, h / 2.0));
        let k3 = f.eval(&axpy(&x, &k2, h / 2.0));
        let k4 = f.eval(&axpy(&x, &k3, h));
        for i in 0..x.len() {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    x
}

pub fn fd_jacobian(f: &PolyField, x: &[f64]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut j = vec![vec![0.0; n]; n];
    for c in 0..n {
        let h = 1e-6 * x[c].abs().max(1.0);
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[c] += h;
        xm[c] -= h;
        let (fp, fm) = (f.eval(&xp), f.eval(&xm));
        for r in 0..n {
            j[r][c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    j
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn solve(model: &Model, hint: SeedHint, formulation: Formulation, proportions: &[f64], m: usize) -> Orbit {
    let seed = seed_orbit(model, &hint).unwrap();
    let mesh = Mesh::new(proportions.to_vec(), seed.period / 2.0).unwrap();
    let guess = seed_guess(model, &seed, mesh.proportions(), m).unwrap();
    let p = OrbitProblem { model: model.clone(), formulation, mesh, m, newton: NewtonOptions::default() };
    solve_orbit(&p, &guess).unwrap()
}

pub fn lorenz_orbit(word: &str, d: usize, m: usize) -> Orbit {
    solve(&lorenz(), SeedHint::LorenzWord { word: word.into() }, Formulation::AutonomousPoincare, &vec![1.0 / d as f64; d], m)
}

pub fn crtbp_orbit(point: usize, energy: f64, d: usize, m: usize) -> Orbit {
    solve(
        &crtbp_model(),
        SeedHint::Lyapunov { point, energy },
        Formulation::SymmetricFixedEnergy { energy },
        &vec![1.0 / d as f64; d],
        m,
    )
}

pub fn crfbp_orbit(m: usize) -> Orbit {
    solve(
        &crfbp_model(),
        SeedHint::PlanarLyapunov { guess: [-1.0, 0.0], lambda: 0.0538 },
        Formulation::MultiplierPoincare,
        &CRFBP_PROPORTIONS,
        m,
    )
}

pub fn manifold(orbit: &Orbit, stability: Stability, n: usize, k: f64, k0: Option<usize>) -> ManifoldParam {
    build_manifold(orbit, stability, n, &BundleOptions { k, k0, ..Default::default() }).unwrap()
}
