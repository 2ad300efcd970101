//! Fixtures shared by the benchmarks.

use chebtaylor::bundle::{BundleOptions, Stability};
use chebtaylor::manifold::build_manifold;
use chebtaylor::orbit::{build_system, seed_guess, seed_orbit, SeedHint};
use chebtaylor::{Formulation, ManifoldParam, Mesh, Model, ModelKind, NewtonOptions, Orbit, OrbitProblem, ResidualSystem};

pub fn lorenz_problem(word: &str, d: usize, m: usize) -> (OrbitProblem, chebtaylor::PeriodicPiecewise) {
    let model = Model::build(&ModelKind::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }).unwrap();
    let seed = seed_orbit(&model, &SeedHint::LorenzWord { word: word.into() }).unwrap();
    let mesh = Mesh::uniform(d, seed.period / 2.0).unwrap();
    let guess = seed_guess(&model, &seed, mesh.proportions(), m).unwrap();
    (OrbitProblem { model, formulation: Formulation::AutonomousPoincare, mesh, m, newton: NewtonOptions::default() }, guess)
}

pub fn lorenz_system(word: &str, d: usize, m: usize) -> (ResidualSystem, Vec<f64>) {
    let (p, guess) = lorenz_problem(word, d, m);
    build_system(&p, &guess).unwrap()
}

pub fn lorenz_orbit(word: &str, d: usize, m: usize) -> Orbit {
    let (p, guess) = lorenz_problem(word, d, m);
    chebtaylor::orbit::solve_orbit(&p, &guess).unwrap()
}

pub fn lorenz_manifold(d: usize, m: usize, n: usize) -> ManifoldParam {
    let orbit = lorenz_orbit("AB", d, m);
    build_manifold(&orbit, Stability::Unstable, n, &BundleOptions::default()).unwrap()
}
