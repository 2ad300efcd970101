//! The Floquet normal bundle `v` and exponent `lambda` (Taylor order one).

use log::info;
use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::bvp::{field_series_jacobian, newton_solve, BoundaryRow, Extra, NewtonOptions, NewtonReport, PhaseRow, ResidualSystem, Rhs};
use crate::cheb::{lobatto_coefficients, lobatto_points, PeriodicPiecewise};
use crate::error::{Error, Result};
use crate::flow::{flow_with_stm, integrate, FlowOptions};
use crate::orbit::Orbit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    /// Sign of `lambda` for this side.
    pub fn sign(self) -> f64 {
        match self {
            Stability::Stable => -1.0,
            Stability::Unstable => 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FloquetBundle {
    pub lambda: f64,
    pub v: PeriodicPiecewise,
    pub k: f64,
    pub k0: usize,
    pub stability: Stability,
    pub report: NewtonReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleOptions {
    /// Normalization constant `K`.
    pub k: f64,
    /// Truncation index of the normalization; `None` means `min(10, m - 1)`.
    pub k0: Option<usize>,
    pub newton: NewtonOptions,
}

impl Default for BundleOptions {
    fn default() -> Self {
        BundleOptions { k: 1.0, k0: None, newton: NewtonOptions::default() }
    }
}

/// Monodromy matrix of the orbit from `gamma(0)` over one period.
pub fn monodromy(orbit: &Orbit) -> Result<DMatrix<f64>> {
    let x0 = orbit.eval(0.0);
    Ok(flow_with_stm(&orbit.field(), &x0, orbit.period(), &FlowOptions::tight())?.1)
}

/// Eigenvalues with a bounded Schur iteration; the unbounded one can cycle on
/// monodromy matrices with repeated unit multipliers.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    for eps in [f64::EPSILON, 1e-13, 1e-11] {
        if let Some(s) = nalgebra::Schur::try_new(a.clone(), eps, 20_000) {
            return Ok(s.complex_eigenvalues().iter().copied().collect());
        }
    }
    Err(Error::NotHyperbolic("eigenvalue iteration did not converge".into()))
}

pub fn multipliers(phi: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    eigenvalues(phi)
}

/// The real multiplier on the requested side of the unit circle and its eigenvector.
pub fn floquet_pair(phi: &DMatrix<f64>, stability: Stability) -> Result<(f64, Vec<f64>)> {
    let mu = multipliers(phi)?;
    let pick = match stability {
        Stability::Unstable => mu.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())),
        Stability::Stable => mu.iter().min_by(|a, b| a.norm().total_cmp(&b.norm())),
    }
    .copied()
    .ok_or_else(|| Error::NotHyperbolic("empty monodromy".into()))?;
    if pick.im.abs() > 1e-8 * pick.norm().max(1.0) {
        return Err(Error::NotHyperbolic(format!("dominant multiplier {pick} is complex")));
    }
    if (pick.norm() - 1.0).abs() < 1e-9 {
        return Err(Error::NotHyperbolic(format!("multiplier {pick} is on the unit circle")));
    }
    if pick.re < 0.0 {
        return Err(Error::NotHyperbolic(format!(
            "multiplier {:.6} is negative; the bundle is not orientable",
            pick.re
        )));
    }
    let n = phi.nrows();
    let shifted = phi - DMatrix::identity(n, n) * pick.re;
    let svd = shifted.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::NotHyperbolic("eigenvector extraction failed".into()))?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let mut v: Vec<f64> = vt.row(imin).iter().copied().collect();
    // Sign gauge: first component positive, or the largest entry when the first vanishes.
    let big = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
    let lead = if v[0].abs() > 1e-6 * big.abs() { v[0] } else { big };
    if lead < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok((pick.re, v))
}

/// Sum of squares of the first `k0 + 1` coefficients of every component on the first domain.
fn normalization(v: &PeriodicPiecewise, k0: usize) -> f64 {
    (0..v.dim).map(|j| v.piece(0, j)[..=k0].iter().map(|x| x * x).sum::<f64>()).sum()
}

fn resolve_k0(k0: Option<usize>, m: usize) -> Result<usize> {
    let k0 = k0.unwrap_or(10.min(m - 1));
    if k0 >= m {
        return Err(Error::Config(format!("normalization index k0 = {k0} must be below m = {m}")));
    }
    Ok(k0)
}

/// Monodromy eigenpair propagated along the orbit by `v' = Dg(gamma) v - lambda v`.
pub fn seed_bundle(orbit: &Orbit, stability: Stability, k: f64, k0: Option<usize>) -> Result<(PeriodicPiecewise, f64)> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("normalization constant must be positive, got {k}")));
    }
    let gamma = &orbit.gamma;
    let k0 = resolve_k0(k0, gamma.m)?;
    let tau = orbit.period();
    // Stable multipliers can sit below rounding, so read them off the backward monodromy.
    let (mu, v0) = match stability {
        Stability::Unstable => floquet_pair(&monodromy(orbit)?, stability)?,
        Stability::Stable => {
            let back = flow_with_stm(&orbit.field(), &orbit.eval(0.0), -tau, &FlowOptions::tight())?.1;
            let (mu, v) = floquet_pair(&back, Stability::Unstable)?;
            (1.0 / mu, v)
        }
    };
    let lambda = mu.ln() / tau;
    let field = orbit.field();
    let scal = field.scalar_values();
    let dim = gamma.dim;
    let mesh = gamma.mesh.clone();
    let pts = lobatto_points(gamma.m);
    let mut v = PeriodicPiecewise::zeros(mesh.clone(), dim, gamma.m);
    let opts = FlowOptions::tight();
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let j = field.jacobian_with(&gamma.eval(t), &scal);
        for r in 0..dim {
            dy[r] = (0..dim).map(|c| j[(r, c)] * y[c]).sum::<f64>() - lambda * y[r];
        }
    };
    let (mut t, mut y) = (0.0, v0);
    for i in 0..mesh.d() {
        // Lobatto points run from +1 to -1; integrate forward in time and store in place.
        let mut vals = vec![vec![0.0; gamma.m]; dim];
        for (q, &s) in pts.iter().enumerate().rev() {
            let ti = mesh.time_of(i, s);
            if ti != t {
                y = integrate(rhs, t, &y, ti, &opts)?.y;
                t = ti;
            }
            for j in 0..dim {
                vals[j][q] = y[j];
            }
        }
        for j in 0..dim {
            v.piece_mut(i, j).copy_from_slice(&lobatto_coefficients(&vals[j]));
        }
    }
    let s = normalization(&v, k0);
    if s == 0.0 {
        return Err(Error::NotHyperbolic("seed bundle vanishes on the first domain".into()));
    }
    Ok((v.scaled((k / s).sqrt()), lambda))
}

/// The order-one system for a given orbit, with `v` and `lambda` unknown.
pub fn bundle_system(orbit: &Orbit, lambda0: f64, k: f64, k0: usize) -> ResidualSystem {
    let gamma = &orbit.gamma;
    let field = orbit.field();
    let scal = field.scalar_values();
    let dg = (0..gamma.mesh.d()).map(|i| field_series_jacobian(&field, &scal, gamma.domain(i), gamma.m).0).collect();
    ResidualSystem {
        mesh: gamma.mesh.clone(),
        dim: gamma.dim,
        m: gamma.m,
        rhs: Rhs::Homological { alpha: 1, lambda: lambda0, dg, forcing: vec![] },
        boundary: vec![BoundaryRow::Periodic; gamma.dim],
        phase: vec![PhaseRow::Normalization { k0, k }],
        extras: vec![Extra::Lambda],
    }
}

/// Newton solve of the eigenvalue problem from a monodromy seed.
pub fn solve_bundle(orbit: &Orbit, stability: Stability, opts: &BundleOptions) -> Result<FloquetBundle> {
    let k0 = resolve_k0(opts.k0, orbit.gamma.m)?;
    let (seed, lambda0) = seed_bundle(orbit, stability, opts.k, Some(k0))?;
    solve_bundle_from(orbit, stability, &seed, lambda0, opts.k, k0, &opts.newton)
}

pub fn solve_bundle_from(
    orbit: &Orbit,
    stability: Stability,
    seed: &PeriodicPiecewise,
    lambda0: f64,
    k: f64,
    k0: usize,
    newton: &NewtonOptions,
) -> Result<FloquetBundle> {
    let sys = bundle_system(orbit, lambda0, k, k0);
    let mut z = seed.coeffs.clone();
    z.push(lambda0);
    let (z, report) = newton_solve(&sys, &z, newton)?;
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.residual });
    }
    let lambda = sys.lambda(&z);
    if lambda.abs() < 1e-8 {
        return Err(Error::Degenerate(lambda.abs()));
    }
    if lambda.signum() != stability.sign() {
        return Err(Error::NotHyperbolic(format!("converged exponent {lambda} is on the wrong side for {stability:?}")));
    }
    info!("{stability:?} bundle: lambda = {lambda:.12}, residual {:.2e}", report.residual);
    let v = PeriodicPiecewise::from_coeffs(seed.mesh.clone(), seed.dim, seed.m, z[..sys.n_coeffs()].to_vec())?;
    Ok(FloquetBundle { lambda, v, k, k0, stability, report })
}

/// Max over `samples` times of `|v' - Dg(gamma) v + lambda v|`, with `v'` from the spectral derivative.
pub fn eigen_defect(orbit: &Orbit, bundle: &FloquetBundle, samples: usize) -> f64 {
    let field = orbit.field();
    let scal = field.scalar_values();
    let tau = orbit.period();
    let mut worst: f64 = 0.0;
    for s in 0..samples {
        let t = tau * (s as f64 + 0.37) / samples as f64;
        let j = field.jacobian_with(&orbit.eval(t), &scal);
        let v = bundle.v.eval(t);
        let dv = bundle.v.eval_deriv(t);
        for r in 0..v.len() {
            let rhs: f64 = (0..v.len()).map(|c| j[(r, c)] * v[c]).sum::<f64>() - bundle.lambda * v[r];
            worst = worst.max((dv[r] - rhs).abs());
        }
    }
    worst
}

/// Multipliers with modulus at least one from the forward monodromy and the rest as
/// reciprocals of the dominant backward ones, so contracting multipliers keep their relative accuracy.
pub fn two_sided_multipliers(orbit: &Orbit) -> Result<Vec<Complex<f64>>> {
    let by_modulus = |v: &mut Vec<Complex<f64>>| v.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut fwd = multipliers(&monodromy(orbit)?)?;
    by_modulus(&mut fwd);
    let back = flow_with_stm(&orbit.field(), &orbit.eval(0.0), -orbit.period(), &FlowOptions::tight())?.1;
    let mut bwd = multipliers(&back)?;
    by_modulus(&mut bwd);
    let mut out: Vec<Complex<f64>> = fwd.into_iter().take_while(|mu| mu.norm() > 1.0 - 1e-3).collect();
    let rest = bwd.len() - out.len();
    out.extend(bwd.into_iter().take(rest).map(|nu| nu.inv()));
    Ok(out)
}

/// `(product of multipliers, exp of the divergence integral over one period)`.
pub fn liouville_pair(orbit: &Orbit) -> Result<(f64, f64)> {
    let prod = two_sided_multipliers(orbit)?.iter().fold(Complex::new(1.0, 0.0), |a, b| a * b).re;
    let field = orbit.field();
    let gamma = &orbit.gamma;
    let r = integrate(|t, _, dy| dy[0] = field.divergence(&gamma.eval(t)), 0.0, &[0.0], orbit.period(), &FlowOptions::tight())?;
    Ok((prod, r.y[0].exp()))
}

/// Largest `|mu * mu' - 1|` over multipliers paired largest-with-smallest modulus.
pub fn reciprocal_pairing_defect(orbit: &Orbit) -> Result<f64> {
    let mut mu = multipliers(&monodromy(orbit)?)?;
    mu.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let n = mu.len();
    Ok((0..n / 2).map(|i| (mu[i] * mu[n - 1 - i]).norm() - 1.0).fold(0.0, |a: f64, x| a.max(x.abs())))
}
