//! Periodic orbits (Taylor order zero) under the supported formulations,
//! plus integration-based initial guesses.

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bvp::{newton_solve, BoundaryRow, Extra, NewtonOptions, NewtonReport, PhaseRow, ResidualSystem, Rhs};
use crate::cheb::{lobatto_coefficients, lobatto_points, Mesh, PeriodicPiecewise, Side};
use crate::error::{Error, Result};
use crate::flow::{flow, flow_samples, flow_with_stm, integrate_to_event, FlowOptions};
use crate::models::{LiftMap, Model, ModelKind, PolyField};

/// How the order-zero system is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Formulation {
    /// Periodicity rows, unknown half-period, Poincare row.
    AutonomousPoincare,
    /// CRTBP reversibility rows with the half-period fixed.
    SymmetricFixedL,
    /// CRTBP reversibility rows, unknown half-period, Jacobi-constant row.
    SymmetricFixedEnergy { energy: f64 },
    /// CRFBP: fixed half-period, unknown multiplier `beta`, Poincare row.
    MultiplierPoincare,
}

#[derive(Clone, Debug)]
pub struct OrbitProblem {
    pub model: Model,
    pub formulation: Formulation,
    /// Mesh; its `l` is the fixed half-period or the initial value of the unknown one.
    pub mesh: Mesh,
    pub m: usize,
    pub newton: NewtonOptions,
}

/// A converged periodic orbit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Orbit {
    pub model: Model,
    pub formulation: Formulation,
    /// Chebyshev coefficients; `gamma.mesh.l` is the converged half-period.
    pub gamma: PeriodicPiecewise,
    /// Multiplier at the solution (CRFBP), zero otherwise.
    pub beta: f64,
    pub report: NewtonReport,
    pub warnings: Vec<String>,
}

impl Orbit {
    pub fn half_period(&self) -> f64 {
        self.gamma.mesh.l
    }

    pub fn period(&self) -> f64 {
        self.gamma.mesh.period()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.gamma.eval(t)
    }

    /// The field the orbit solves, with the multiplier set to its converged value.
    pub fn field(&self) -> PolyField {
        let mut f = self.model.field.clone();
        if let Some(s) = f.scalar_index("beta") {
            f.scalars[s].1 = self.beta;
        }
        f
    }
}

fn check_lifted(model: &Model, what: &str) -> Result<()> {
    if !matches!(model.kind, ModelKind::Crtbp { .. }) {
        return Err(Error::Config(format!("{what} formulation needs the CRTBP model, got {}", model.name())));
    }
    Ok(())
}

/// Lift rows for the appended coordinates: `v_w(0)^2 |q(0) - p_w|^2 - 1`.
fn lift_rows(lift: &LiftMap) -> Vec<(usize, BoundaryRow)> {
    match lift {
        LiftMap::Identity { .. } => vec![],
        LiftMap::Kepler { .. } => {
            vec![(2, BoundaryRow::InverseDistanceSquared { component: 2, coords: vec![0], point: vec![0.0] })]
        }
        LiftMap::Crtbp { mu } => vec![
            (4, BoundaryRow::InverseDistanceSquared { component: 4, coords: vec![0, 2], point: vec![-mu, 0.0] }),
            (5, BoundaryRow::InverseDistanceSquared { component: 5, coords: vec![0, 2], point: vec![1.0 - mu, 0.0] }),
        ],
        LiftMap::Crfbp { primaries, .. } => (0..3)
            .map(|i| {
                (
                    6 + i,
                    BoundaryRow::InverseDistanceSquared {
                        component: 6 + i,
                        coords: vec![0, 2, 4],
                        point: primaries[i].to_vec(),
                    },
                )
            })
            .collect(),
    }
}

/// Builds the residual system and the unknown vector for a guess.
pub fn build_system(problem: &OrbitProblem, guess: &PeriodicPiecewise) -> Result<(ResidualSystem, Vec<f64>)> {
    let model = &problem.model;
    let dim = model.dim();
    if guess.dim != dim {
        return Err(Error::Config(format!("guess has {} components, model has {dim}", guess.dim)));
    }
    let guess = if guess.m != problem.m || guess.mesh.proportions() != problem.mesh.proportions() {
        guess.resample(problem.mesh.with_l(guess.mesh.l), problem.m)
    } else {
        guess.clone()
    };
    let mut boundary = vec![BoundaryRow::Periodic; dim];
    let mut phase = Vec::new();
    let mut extras = Vec::new();
    let mut tail = Vec::new();
    let mut mesh = problem.mesh.clone();
    let d = mesh.d();
    let poincare = |g: &PeriodicPiecewise| {
        let p0: Vec<f64> = (0..dim).map(|j| g.endpoint(0, j, Side::Left)).collect();
        let pdot = model.field.eval(&p0);
        PhaseRow::Poincare { p0, pdot }
    };
    match &problem.formulation {
        Formulation::AutonomousPoincare => {
            for (j, row) in lift_rows(&model.lift) {
                boundary[j] = row;
            }
            phase.push(poincare(&guess));
            extras.push(Extra::HalfPeriod);
            tail.push(guess.mesh.l);
        }
        Formulation::SymmetricFixedL | Formulation::SymmetricFixedEnergy { .. } => {
            check_lifted(model, "symmetric")?;
            let ModelKind::Crtbp { mu } = model.kind else { unreachable!() };
            boundary[0] = BoundaryRow::Value { domain: d - 1, side: Side::Right, component: 1, value: 0.0 };
            boundary[1] = BoundaryRow::Value { domain: d - 1, side: Side::Right, component: 2, value: 0.0 };
            boundary[2] = BoundaryRow::Value { domain: 0, side: Side::Left, component: 1, value: 0.0 };
            boundary[3] = BoundaryRow::Value { domain: 0, side: Side::Left, component: 2, value: 0.0 };
            boundary[4] = BoundaryRow::InverseDistance { component: 4, base: 0, offset: mu };
            boundary[5] = BoundaryRow::InverseDistance { component: 5, base: 0, offset: mu - 1.0 };
            if let Formulation::SymmetricFixedEnergy { energy } = problem.formulation {
                phase.push(PhaseRow::Energy { mu, value: energy });
                extras.push(Extra::HalfPeriod);
                tail.push(guess.mesh.l);
            }
        }
        Formulation::MultiplierPoincare => {
            let Some(s) = model.field.scalar_index("beta") else {
                return Err(Error::Config(format!("model {} has no multiplier slot", model.name())));
            };
            for (j, row) in lift_rows(&model.lift) {
                boundary[j] = row;
            }
            phase.push(poincare(&guess));
            extras.push(Extra::Scalar(s));
            tail.push(model.field.scalars[s].1);
        }
    }
    if extras.contains(&Extra::HalfPeriod) {
        mesh = mesh.with_l(guess.mesh.l);
    }
    let sys = ResidualSystem {
        mesh,
        dim,
        m: problem.m,
        rhs: Rhs::Field(model.field.clone()),
        boundary,
        phase,
        extras,
    };
    sys.validate()?;
    let mut z = guess.coeffs.clone();
    z.extend(tail);
    Ok((sys, z))
}

/// Newton solve from a guess on any mesh; the guess is resampled if needed.
pub fn solve_orbit(problem: &OrbitProblem, guess: &PeriodicPiecewise) -> Result<Orbit> {
    let (sys, z0) = build_system(problem, guess)?;
    let (z, report) = newton_solve(&sys, &z0, &problem.newton)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.residual });
    }
    info!("orbit converged in {} iterations, residual {:.2e}", report.iterations, report.residual);
    let l = sys.half_period(&z);
    let scal = sys.scalars(&z);
    let beta = problem.model.field.scalar_index("beta").map(|s| scal[s]).unwrap_or(0.0);
    let nc = sys.n_coeffs();
    let gamma = PeriodicPiecewise::from_coeffs(sys.mesh.with_l(l), sys.dim, sys.m, z[..nc].to_vec())?;
    let mut warnings = Vec::new();
    if !matches!(problem.model.lift, LiftMap::Identity { .. }) {
        let n = 400;
        let closest = (0..n)
            .map(|s| gamma.eval(gamma.mesh.period() * s as f64 / n as f64))
            .flat_map(|v| problem.model.lift.distances(&v))
            .fold(f64::INFINITY, f64::min);
        if closest < 1e-3 {
            warnings.push(format!("orbit passes within {closest:.2e} of a primary"));
        }
    }
    Ok(Orbit { model: problem.model.clone(), formulation: problem.formulation.clone(), gamma, beta, report, warnings })
}

/// Max mismatch between `gamma(t_{n+1})` and the flow of `gamma(t_n)` over
/// `n_samples` equal sub-intervals of one period.
pub fn validate_orbit(orbit: &Orbit, n_samples: usize, opts: &FlowOptions) -> Result<f64> {
    let field = orbit.field();
    let tau = orbit.period();
    let n = n_samples.max(1);
    let dt = tau / n as f64;
    let mut worst: f64 = 0.0;
    for s in 0..n {
        let x = orbit.eval(s as f64 * dt);
        let y = flow(&field, &x, dt, opts)?.y;
        let target = orbit.eval((s + 1) as f64 * dt);
        let e = y.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Symbol sequence of a Lorenz orbit: signs of `x` at downward crossings of `z = rho - 1`.
pub fn lorenz_word(orbit: &Orbit, samples: usize) -> String {
    let ModelKind::Lorenz { rho, .. } = orbit.model.kind else { return String::new() };
    let tau = orbit.period();
    let mut word = String::new();
    let mut prev = orbit.eval(0.0);
    for s in 1..=samples {
        let cur = orbit.eval(tau * s as f64 / samples as f64);
        if prev[2] > rho - 1.0 && cur[2] <= rho - 1.0 {
            word.push(if cur[0] > 0.0 { 'A' } else { 'B' });
        }
        prev = cur;
    }
    word
}

/// What the seeding routine should look for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedHint {
    /// Lorenz orbit by symbol sequence, e.g. `"ABB"`.
    LorenzWord { word: String },
    /// CRTBP Lyapunov orbit about a collinear point (1, 2 or 3) at a Jacobi constant.
    Lyapunov { point: usize, energy: f64 },
    /// CRFBP planar Lyapunov orbit about the equilibrium nearest `guess`,
    /// continued in amplitude until the unstable exponent drops to `lambda`.
    PlanarLyapunov { guess: [f64; 2], lambda: f64 },
    /// A given lifted initial state and period.
    Point { x0: Vec<f64>, period: f64 },
}

/// Initial state (lifted) and period of a near-periodic trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub x0: Vec<f64>,
    pub period: f64,
    /// Return-map gap after refinement.
    pub gap: f64,
}

fn rhs(field: &PolyField) -> impl FnMut(f64, &[f64], &mut [f64]) + '_ {
    let scal = field.scalar_values();
    move |_, y, dy| field.eval_into(y, &scal, dy)
}

pub fn seed_orbit(model: &Model, hint: &SeedHint) -> Result<Seed> {
    match (hint, &model.kind) {
        (SeedHint::LorenzWord { word }, ModelKind::Lorenz { rho, .. }) => lorenz_seed(&model.field, *rho, word),
        (SeedHint::Lyapunov { point, energy }, ModelKind::Crtbp { mu }) => crtbp_lyapunov_seed(model, *mu, *point, *energy),
        (SeedHint::PlanarLyapunov { guess, lambda }, ModelKind::Crfbp { .. }) => crfbp_lyapunov_seed(model, *guess, *lambda),
        (SeedHint::Point { x0, period }, _) => {
            if x0.len() != model.dim() || !(*period > 0.0) {
                return Err(Error::Seed("point hint needs a full state and a positive period".into()));
            }
            let speed = model.field.eval(x0).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if speed < 1e-10 {
                return Err(Error::Seed("hint is an equilibrium, not a periodic orbit".into()));
            }
            let end = flow(&model.field, x0, *period, &FlowOptions::tight())?.y;
            let gap = end.iter().zip(x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(Seed { x0: x0.clone(), period: *period, gap })
        }
        _ => Err(Error::Config(format!("seed hint {hint:?} does not apply to model {}", model.name()))),
    }
}

/// Samples the trajectory through `seed.x0` on the mesh (with `L = period / 2`).
pub fn seed_guess(model: &Model, seed: &Seed, proportions: &[f64], m: usize) -> Result<PeriodicPiecewise> {
    let mesh = Mesh::new(proportions.to_vec(), seed.period / 2.0)?;
    let pts = lobatto_points(m);
    let mut times = Vec::with_capacity(mesh.d() * m);
    for i in 0..mesh.d() {
        for &s in &pts {
            times.push((mesh.time_of(i, s), i, s));
        }
    }
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ts: Vec<f64> = times.iter().map(|t| t.0).collect();
    let states = flow_samples(&model.field, &seed.x0, 0.0, &ts, &FlowOptions::tight())?;
    let dim = model.dim();
    let mut out = PeriodicPiecewise::zeros(mesh.clone(), dim, m);
    for i in 0..mesh.d() {
        let mut vals = vec![vec![0.0; m]; dim];
        for (q, &s) in pts.iter().enumerate() {
            let idx = times.iter().position(|t| t.1 == i && t.2 == s).expect("sample present");
            for j in 0..dim {
                vals[j][q] = states[idx][j];
            }
        }
        for j in 0..dim {
            out.piece_mut(i, j).copy_from_slice(&lobatto_coefficients(&vals[j]));
        }
    }
    Ok(out)
}

/// Close returns to the section `z = rho - 1` (upward), refined by periodic shooting.
fn lorenz_seed(field: &PolyField, rho: f64, word: &str) -> Result<Seed> {
    let n = word.len();
    if n == 0 || !word.chars().all(|c| c == 'A' || c == 'B') {
        return Err(Error::Seed(format!("bad symbol word {word:?}")));
    }
    let section = rho - 1.0;
    let opts = FlowOptions { rtol: 1e-11, atol: 1e-11, ..FlowOptions::default() };
    let mut f = rhs(field);
    let mut x = vec![1.0, 1.0, 20.0];
    let mut t = 0.0;
    let mut hits: Vec<(f64, Vec<f64>)> = Vec::new();
    while hits.len() < 2500 {
        match integrate_to_event(&mut f, t, &x, t + 50.0, |y| y[2] - section, 1, 0, &opts)? {
            Some((th, xh)) => {
                // Step off the section before searching again.
                let r = crate::flow::integrate(&mut f, th, &xh, th + 1e-3, &opts)?;
                t = r.t;
                x = r.y;
                hits.push((th, xh));
            }
            None => return Err(Error::Seed("trajectory stopped crossing the section".into())),
        }
    }
    let sym: Vec<char> = hits.iter().map(|h| if h.1[0] > 0.0 { 'A' } else { 'B' }).collect();
    let swapped: String = word.chars().map(|c| if c == 'A' { 'B' } else { 'A' }).collect();
    let rotations = |w: &str| -> Vec<String> { (0..n).map(|k| format!("{}{}", &w[k..], &w[..k])).collect() };
    let mut best: Option<(f64, usize)> = None;
    // The time origin sits on the crossing that starts the word as written; rotations and the
    // mirror image under x -> -x are fallbacks.
    for targets in [vec![word.to_string()], rotations(word), rotations(&swapped)] {
        for i in 100..hits.len() - n {
            let w: String = sym[i..i + n].iter().collect();
            if !targets.contains(&w) {
                continue;
            }
            let d = ((hits[i + n].1[0] - hits[i].1[0]).powi(2) + (hits[i + n].1[1] - hits[i].1[1]).powi(2)).sqrt();
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, i));
            }
        }
        if best.is_some() {
            break;
        }
    }
    let (d, i) = best.ok_or_else(|| Error::Seed(format!("no close return with word {word}")))?;
    debug!("close return for {word}: gap {d:.2e}");
    let (mut px, mut py, mut period) = (hits[i].1[0], hits[i].1[1], hits[i + n].0 - hits[i].0);
    let tight = FlowOptions::tight();
    let mut gap = f64::INFINITY;
    for _ in 0..30 {
        let x0 = [px, py, section];
        let (y, phi) = flow_with_stm(field, &x0, period, &tight)?;
        let r = Vector3::new(y[0] - px, y[1] - py, y[2] - section);
        gap = r.amax();
        if gap < 1e-11 {
            break;
        }
        let g = field.eval(&y);
        let j = Matrix3::new(
            phi[(0, 0)] - 1.0,
            phi[(0, 1)],
            g[0],
            phi[(1, 0)],
            phi[(1, 1)] - 1.0,
            g[1],
            phi[(2, 0)],
            phi[(2, 1)],
            g[2],
        );
        let dx = j.lu().solve(&(-r)).ok_or_else(|| Error::Seed("singular shooting Jacobian".into()))?;
        px += dx[0];
        py += dx[1];
        period += dx[2];
    }
    if gap > 1e-3 {
        return Err(Error::Seed(format!("shooting left a return gap of {gap:.2e}")));
    }
    Ok(Seed { x0: vec![px, py, section], period, gap })
}

/// Collinear libration point `L_k` of the CRTBP (k = 1, 2, 3).
pub fn crtbp_libration(mu: f64, k: usize) -> Result<f64> {
    let ox = |x: f64| {
        let r1 = (x + mu).abs();
        let r2 = (x - 1.0 + mu).abs();
        x - (1.0 - mu) * (x + mu) / r1.powi(3) - mu * (x - 1.0 + mu) / r2.powi(3)
    };
    let (mut a, mut b) = match k {
        1 => (-mu + 1e-6, 1.0 - mu - 1e-6),
        2 => (1.0 - mu + 1e-6, 2.0),
        3 => (-2.0, -mu - 1e-6),
        _ => return Err(Error::Config(format!("no collinear point L{k}"))),
    };
    let (fa, fb) = (ox(a), ox(b));
    if fa.signum() == fb.signum() {
        return Err(Error::Seed(format!("no sign change bracketing L{k}")));
    }
    for _ in 0..200 {
        let c = 0.5 * (a + b);
        if ox(c).signum() == fa.signum() {
            a = c;
        } else {
            b = c;
        }
    }
    Ok(0.5 * (a + b))
}

/// Half-period shooting: start at `(x0, 0, 0, ydot0)` and stop at the next `y = 0` crossing.
fn crtbp_half(model: &Model, x0: f64, yd0: f64, opts: &FlowOptions) -> Result<(f64, Vec<f64>)> {
    let state = model.lift.lift(&[x0, 0.0, 0.0, yd0]);
    let dir = if yd0 < 0.0 { 1 } else { -1 };
    let mut f = rhs(&model.field);
    integrate_to_event(&mut f, 0.0, &state, 20.0, |y| y[2], dir, 0, opts)?
        .ok_or_else(|| Error::Seed("no return to the x axis".into()))
}

fn crtbp_correct(model: &Model, x0: f64, mut yd0: f64) -> Result<(f64, f64)> {
    let opts = FlowOptions::tight();
    for _ in 0..40 {
        let (t, u) = crtbp_half(model, x0, yd0, &opts)?;
        if u[1].abs() < 1e-12 {
            return Ok((yd0, t));
        }
        let h = 1e-8;
        let (_, u2) = crtbp_half(model, x0, yd0 + h, &opts)?;
        let slope = (u2[1] - u[1]) / h;
        if slope == 0.0 {
            break;
        }
        yd0 -= u[1] / slope;
    }
    Err(Error::Seed("symmetric shooting did not converge".into()))
}

/// Central-difference Jacobian of the planar field `(x, xdot, y, ydot)` seen through the lift.
fn planar_linearization(model: &Model, base: [f64; 4]) -> DMatrix<f64> {
    let d = model.lift.d();
    let g = |u: &[f64; 4]| {
        let mut x = vec![0.0; d];
        x[..4].copy_from_slice(u);
        model.field.eval(&model.lift.lift(&x))
    };
    let h = 1e-6;
    let mut a = DMatrix::zeros(4, 4);
    for c in 0..4 {
        let (mut p, mut m) = (base, base);
        p[c] += h;
        m[c] -= h;
        let (gp, gm) = (g(&p), g(&m));
        for r in 0..4 {
            a[(r, c)] = (gp[r] - gm[r]) / (2.0 * h);
        }
    }
    a
}

fn crtbp_lyapunov_seed(model: &Model, mu: f64, point: usize, energy: f64) -> Result<Seed> {
    let xl = crtbp_libration(mu, point)?;
    let e_of = |x: f64, yd: f64| model.energy(&model.lift.lift(&[x, 0.0, 0.0, yd])).unwrap_or(0.0);
    if !(energy < e_of(xl, 0.0) - 1e-12) {
        return Err(Error::Seed(format!(
            "Jacobi constant {energy} is not below the libration value {:.6}; the orbit degenerates to the equilibrium",
            e_of(xl, 0.0)
        )));
    }
    let a4 = planar_linearization(model, [xl, 0.0, 0.0, 0.0]);
    let ev = crate::bundle::eigenvalues(&a4)?;
    let omega = ev.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if omega == 0.0 {
        return Err(Error::Seed("libration point has no center direction".into()));
    }
    // For x = a cos(wt) the linear system gives ydot(0) = -a (w^2 + Omega_xx) / 2.
    let ratio = -(omega * omega + a4[(1, 0)]) / 2.0;
    // Start on the crossing facing the small primary; this fixes the time origin of the orbit.
    let side = (1.0 - mu - xl).signum();
    let mut a = 1e-4;
    let (mut yd, mut t) = crtbp_correct(model, xl + side * a, ratio * side * a)?;
    let mut e = e_of(xl + side * a, yd);
    let da = 2e-4;
    let (mut pa, mut pe) = (a, e);
    let mut guard = 0;
    while e > energy {
        guard += 1;
        if guard > 5000 {
            return Err(Error::Seed("energy target not reached by amplitude continuation".into()));
        }
        pa = a;
        pe = e;
        let pyd = yd;
        yd = pyd * (a + da) / a;
        a += da;
        let r = crtbp_correct(model, xl + side * a, yd)?;
        yd = r.0;
        t = r.1;
        e = e_of(xl + side * a, yd);
    }
    // Secant on the amplitude.
    for _ in 0..40 {
        if (e - energy).abs() < 1e-13 {
            break;
        }
        let an = pa + (a - pa) * (energy - pe) / (e - pe);
        let r = crtbp_correct(model, xl + side * an, yd)?;
        pa = a;
        pe = e;
        a = an;
        yd = r.0;
        t = r.1;
        e = e_of(xl + side * a, yd);
    }
    let x0 = model.lift.lift(&[xl + side * a, 0.0, 0.0, yd]);
    let end = flow(&model.field, &x0, 2.0 * t, &FlowOptions::tight())?.y;
    let gap = end.iter().zip(&x0).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    Ok(Seed { x0, period: 2.0 * t, gap })
}

/// Equilibrium of the planar CRFBP nearest `guess` (Newton with a finite-difference Hessian).
pub fn crfbp_equilibrium(model: &Model, guess: [f64; 2]) -> Result<[f64; 2]> {
    let LiftMap::Crfbp { masses, primaries } = &model.lift else {
        return Err(Error::Config("CRFBP equilibrium needs the CRFBP model".into()));
    };
    let grad = |p: [f64; 2]| {
        let (ox, oy, _) = crate::models::crfbp_gradient(masses, primaries, p[0], p[1], 0.0);
        [ox, oy]
    };
    let mut p = guess;
    for _ in 0..100 {
        let g = grad(p);
        if g[0].abs().max(g[1].abs()) < 1e-15 {
            break;
        }
        let h = 1e-7;
        let gx = grad([p[0] + h, p[1]]);
        let gxm = grad([p[0] - h, p[1]]);
        let gy = grad([p[0], p[1] + h]);
        let gym = grad([p[0], p[1] - h]);
        let j = nalgebra::Matrix2::new(
            (gx[0] - gxm[0]) / (2.0 * h),
            (gy[0] - gym[0]) / (2.0 * h),
            (gx[1] - gxm[1]) / (2.0 * h),
            (gy[1] - gym[1]) / (2.0 * h),
        );
        let d = j.lu().solve(&nalgebra::Vector2::new(-g[0], -g[1])).ok_or_else(|| Error::Seed("flat potential".into()))?;
        p = [p[0] + d[0], p[1] + d[1]];
    }
    let g = grad(p);
    if g[0].abs().max(g[1].abs()) > 1e-10 {
        return Err(Error::Seed("equilibrium search did not converge".into()));
    }
    Ok(p)
}

/// Largest real Floquet multiplier of the trajectory through `x0` over `period`, as an exponent.
pub fn leading_exponent(field: &PolyField, x0: &[f64], period: f64) -> Result<f64> {
    let (_, phi) = flow_with_stm(field, x0, period, &FlowOptions::tight())?;
    let ev = crate::bundle::eigenvalues(&phi)?;
    let best = ev.iter().filter(|c| c.im.abs() < 1e-8 * c.norm().max(1.0)).map(|c| c.re.abs()).fold(0.0, f64::max);
    Ok(best.ln() / period)
}

fn crfbp_lyapunov_seed(model: &Model, guess: [f64; 2], lambda: f64) -> Result<Seed> {
    let q = crfbp_equilibrium(model, guess)?;
    let field = &model.field;
    let lift = &model.lift;
    let state = |a: f64, xd: f64, yd: f64| lift.lift(&[q[0] + a, xd, q[1], yd, 0.0, 0.0]);
    let a4 = planar_linearization(model, [q[0], 0.0, q[1], 0.0]);
    let eig = crate::bundle::eigenvalues(&a4)?;
    let omega = eig.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if omega == 0.0 {
        return Err(Error::Seed("equilibrium has no center direction".into()));
    }
    // Eigenvector for i*omega from the null space of (A - i w I), via the complex SVD-free route:
    // solve the real 8x8 system with one component pinned.
    let mut big = DMatrix::zeros(8, 8);
    for r in 0..4 {
        for c in 0..4 {
            big[(r, c)] = a4[(r, c)];
            big[(r + 4, c + 4)] = a4[(r, c)];
        }
        big[(r, r + 4)] = omega;
        big[(r + 4, r)] = -omega;
    }
    // Pin Re(v0) = 1, Im(v0) = 0 by replacing two rows.
    let mut rhsv = DVector::zeros(8);
    for c in 0..8 {
        big[(0, c)] = 0.0;
        big[(4, c)] = 0.0;
    }
    big[(0, 0)] = 1.0;
    big[(4, 4)] = 1.0;
    rhsv[0] = 1.0;
    let v = big.lu().solve(&rhsv).ok_or_else(|| Error::Seed("center eigenvector not found".into()))?;
    // v = re + i im with (A re = -w im, A im = w re). Choose the phase where the y offset vanishes.
    let (re, im) = (v.rows(0, 4).into_owned(), v.rows(4, 4).into_owned());
    let phi = re[2].atan2(im[2]);
    let w_re = &re * phi.cos() - &im * phi.sin();
    let scale = 1.0 / w_re[0];

    let flow_opts = FlowOptions::tight();
    let residual = |a: f64, z: &Vector3<f64>| -> Result<(Vector3<f64>, Matrix3<f64>)> {
        let x0 = state(a, z[0], z[1]);
        let (y, phi) = flow_with_stm(field, &x0, z[2], &flow_opts)?;
        let g = field.eval(&y);
        let r = Vector3::new(y[0] - x0[0], y[1] - x0[1], y[2] - x0[2]);
        // Columns: d/d xdot0, d/d ydot0 (lifted coordinates do not depend on velocities), d/dT.
        let j = Matrix3::new(
            phi[(0, 1)],
            phi[(0, 3)],
            g[0],
            phi[(1, 1)] - 1.0,
            phi[(1, 3)],
            g[1],
            phi[(2, 1)],
            phi[(2, 3)],
            g[2],
        );
        Ok((r, j))
    };
    let newton = |a: f64, mut z: Vector3<f64>| -> Result<Vector3<f64>> {
        for _ in 0..30 {
            let (r, j) = residual(a, &z)?;
            if r.amax() < 1e-12 {
                return Ok(z);
            }
            let dz = j.lu().solve(&(-r)).ok_or_else(|| Error::Seed("singular continuation step".into()))?;
            z += dz;
        }
        let (r, _) = residual(a, &z)?;
        if r.amax() < 1e-9 {
            Ok(z)
        } else {
            Err(Error::Seed(format!("continuation corrector stalled at amplitude {a} (gap {:.2e})", r.amax())))
        }
    };
    let mut a = 2e-3;
    let mut z = newton(a, Vector3::new(w_re[1] * scale * a, w_re[3] * scale * a, 2.0 * std::f64::consts::PI / omega))?;
    let lam_of = |a: f64, z: &Vector3<f64>| leading_exponent(field, &state(a, z[0], z[1]), z[2]);
    let mut lam = lam_of(a, &z)?;
    if lam <= lambda {
        return Err(Error::Seed(format!("exponent {lam:.4} already below the target near the equilibrium")));
    }
    let da = 2e-3;
    let mut hist: Vec<(f64, Vector3<f64>, f64)> = vec![(a, z, lam)];
    while lam > lambda {
        if a > 1.5 {
            return Err(Error::Seed("exponent target not reached by amplitude continuation".into()));
        }
        let pred = if hist.len() >= 2 {
            let (p, q) = (&hist[hist.len() - 1].1, &hist[hist.len() - 2].1);
            2.0 * p - q
        } else {
            Vector3::new(z[0] * (a + da) / a, z[1] * (a + da) / a, z[2])
        };
        a += da;
        z = newton(a, pred)?;
        lam = lam_of(a, &z)?;
        hist.push((a, z, lam));
    }
    // Secant on the amplitude for the exponent target.
    let n = hist.len();
    let (mut a0, mut z0, mut l0) = hist[n - 2];
    let (mut a1, mut z1, mut l1) = hist[n - 1];
    for _ in 0..30 {
        if (l1 - lambda).abs() < 1e-10 || (a1 - a0).abs() < 1e-14 {
            break;
        }
        let an = a1 + (a1 - a0) * (lambda - l1) / (l1 - l0);
        let zp = z1 + (z1 - z0) * ((an - a1) / (a1 - a0));
        let zn = newton(an, zp)?;
        let ln = lam_of(an, &zn)?;
        (a0, z0, l0) = (a1, z1, l1);
        (a1, z1, l1) = (an, zn, ln);
    }
    debug!("CRFBP Lyapunov seed: amplitude {a1:.6}, period {:.10}, exponent {l1:.6}", z1[2]);
    let mut x0 = state(a1, z1[0], z1[1]);
    let (r, _) = residual(a1, &z1)?;
    // Slide the origin onto the nearby y = 0 crossing.
    for _ in 0..8 {
        let g = field.eval(&x0);
        if x0[2].abs() < 1e-14 || g[2] == 0.0 {
            break;
        }
        let dt = -x0[2] / g[2];
        if dt.abs() > z1[2] / 4.0 {
            break;
        }
        x0 = flow(field, &x0, dt, &flow_opts)?.y;
    }
    Ok(Seed { x0, period: z1[2], gap: r.amax() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn libration_points_are_equilibria() {
        let mu = 0.0123;
        let (f, lift) = crate::models::crtbp(mu).unwrap();
        for k in 1..=3 {
            let x = crtbp_libration(mu, k).unwrap();
            let v = f.eval(&lift.lift(&[x, 0.0, 0.0, 0.0]));
            assert!(v[..4].iter().all(|c| c.abs() < 1e-12), "L{k}: {v:?}");
        }
    }

    #[test]
    fn equilibrium_hint_is_rejected() {
        let model = Model::build(&ModelKind::Lorenz { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }).unwrap();
        let e = seed_orbit(&model, &SeedHint::Point { x0: vec![0.0; 3], period: 1.0 });
        assert!(matches!(e, Err(Error::Seed(_))));
    }
}
