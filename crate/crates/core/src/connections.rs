//! Connecting orbits built on two parameterized manifolds: short connections
//! (direct chart intersection), shooting connections and conjugacy extensions.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::Stability;
use crate::error::{Error, Result};
use crate::flow::{flow, flow_samples, FlowOptions};
use crate::manifold::ManifoldParam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    Short,
    Bvp,
    Homoclinic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectionResult {
    /// Phase on the unstable chart, wrapped into `[0, tau_u)`.
    pub theta_u: f64,
    pub sigma_u: f64,
    /// Phase on the stable chart, wrapped into `[0, tau_s)`.
    pub theta_s: f64,
    pub sigma_s: f64,
    /// Time of flight (zero for short connections).
    pub t: f64,
    pub kind: ConnectionKind,
    pub residual: f64,
    pub iterations: usize,
}

fn check_pair(stable: &ManifoldParam, unstable: &ManifoldParam) -> Result<()> {
    if stable.stability() != Stability::Stable || unstable.stability() != Stability::Unstable {
        return Err(Error::Config("connection needs one stable and one unstable manifold".into()));
    }
    if stable.orbit.model != unstable.orbit.model {
        return Err(Error::Config("manifolds belong to different models".into()));
    }
    let m = &stable.orbit.model;
    if let (Some(es), Some(eu)) = (m.energy(&stable.orbit.eval(0.0)), m.energy(&unstable.orbit.eval(0.0))) {
        if (es - eu).abs() > 1e-8 {
            return Err(Error::Config(format!(
                "orbits lie on different energy levels ({es:.12} vs {eu:.12}); no connection can exist"
            )));
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Least-squares Gauss-Newton step `J dx = -r` (minimum norm when underdetermined).
fn gn_step(j: &DMatrix<f64>, r: &[f64]) -> Result<DVector<f64>> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.solve(&(-DVector::from_column_slice(r)), 1e-13 * smax.max(1e-300))
        .map_err(|e| {
            debug!("least-squares solve failed: {e}");
            Error::Singular { cond: f64::INFINITY }
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShortOptions {
    /// Boundary circle(s) of the unstable chart to try.
    pub sigma_u: Vec<f64>,
    /// Grid sizes for the seed scan: phases on each chart, and sigma levels on the stable chart.
    pub grid_theta: usize,
    pub grid_sigma: usize,
    /// Number of best grid pairs refined by Newton.
    pub candidates: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ShortOptions {
    fn default() -> Self {
        ShortOptions { sigma_u: vec![1.0, -1.0], grid_theta: 400, grid_sigma: 41, candidates: 24, tol: 1e-9, max_iter: 40 }
    }
}

/// Newton on `S(theta_s, sigma_s, theta_u) = P(theta_s, sigma_s) - Q(theta_u, sigma_u)`.
pub fn refine_short(
    stable: &ManifoldParam,
    unstable: &ManifoldParam,
    sigma_u: f64,
    x0: [f64; 3],
    tol: f64,
    max_iter: usize,
) -> Result<ConnectionResult> {
    let mut x = x0;
    let residual = |x: &[f64; 3]| diff(&stable.eval_unchecked(x[0], x[1]), &unstable.eval_unchecked(x[2], sigma_u));
    let mut r = residual(&x);
    let mut it = 0;
    while norm(&r) > tol && it < max_iter {
        let (pt, ps) = stable.eval_derivatives(x[0], x[1]);
        let (qt, _) = unstable.eval_derivatives(x[2], sigma_u);
        let dim = r.len();
        let mut j = DMatrix::zeros(dim, 3);
        for i in 0..dim {
            j[(i, 0)] = pt[i];
            j[(i, 1)] = ps[i];
            j[(i, 2)] = -qt[i];
        }
        let dx = gn_step(&j, &r)?;
        for k in 0..3 {
            x[k] += dx[k];
        }
        r = residual(&x);
        it += 1;
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { iterations: it, residual: f64::INFINITY });
        }
    }
    let res = norm(&r);
    if res > tol {
        return Err(Error::NotConverged { iterations: it, residual: res });
    }
    if x[1].abs() > 1.0 {
        return Err(Error::EscapedChart(format!("converged sigma_s = {} lies outside the stable chart", x[1])));
    }
    Ok(ConnectionResult {
        theta_u: x[2].rem_euclid(unstable.period()),
        sigma_u,
        theta_s: x[0].rem_euclid(stable.period()),
        sigma_s: x[1],
        t: 0.0,
        kind: ConnectionKind::Short,
        residual: res,
        iterations: it,
    })
}

/// All distinct short connections found from a grid scan, sorted by `|sigma_s|`.
pub fn short_connections(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &ShortOptions) -> Result<Vec<ConnectionResult>> {
    check_pair(stable, unstable)?;
    let (ts, tu) = (stable.period(), unstable.period());
    let nt = opts.grid_theta.max(8);
    let ns = opts.grid_sigma.max(3);
    let pcloud: Vec<(f64, f64, Vec<f64>)> = (0..nt)
        .flat_map(|a| (0..ns).map(move |b| (a, b)))
        .map(|(a, b)| {
            let th = ts * a as f64 / nt as f64;
            let sg = -1.0 + 2.0 * b as f64 / (ns - 1) as f64;
            (th, sg, stable.eval_unchecked(th, sg))
        })
        .collect();
    let same_orbit = stable.orbit.gamma == unstable.orbit.gamma;
    let mut found: Vec<ConnectionResult> = Vec::new();
    for &su in &opts.sigma_u {
        if su.abs() != 1.0 {
            return Err(Error::Config("short connections start on a boundary circle, sigma_u = +-1".into()));
        }
        let mut pairs: Vec<(f64, [f64; 3])> = (0..nt)
            .into_par_iter()
            .map(|c| {
                let thu = tu * c as f64 / nt as f64;
                let q = unstable.eval_unchecked(thu, su);
                let (best, (th, sg, _)) = pcloud
                    .iter()
                    .map(|p| (norm(&diff(&p.2, &q)), p))
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .expect("nonempty grid");
                (best, [*th, *sg, thu])
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, x0) in pairs.into_iter().take(opts.candidates) {
            match refine_short(stable, unstable, su, x0, opts.tol, opts.max_iter) {
                Ok(c) => {
                    // On a single orbit the zero section matches itself trivially.
                    if same_orbit && c.sigma_s.abs() < 1e-12 {
                        continue;
                    }
                    let dup = found.iter().any(|f| {
                        f.sigma_u == c.sigma_u && (f.theta_u - c.theta_u).abs() < 1e-7 && (f.theta_s - c.theta_s).abs() < 1e-7
                    });
                    if !dup {
                        found.push(c);
                    }
                }
                Err(e) => debug!("short-connection candidate from {x0:?} rejected: {e}"),
            }
        }
    }
    found.sort_by(|a, b| a.sigma_s.abs().total_cmp(&b.sigma_s.abs()));
    Ok(found)
}

/// The short connection closest to the stable orbit (smallest `|sigma_s|`).
pub fn short_connection(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &ShortOptions) -> Result<ConnectionResult> {
    let all = short_connections(stable, unstable, opts)?;
    let best = all.into_iter().next().ok_or_else(|| Error::NotConverged { iterations: 0, residual: f64::INFINITY })?;
    info!(
        "short connection: theta_s {:.12}, sigma_s {:.3e}, theta_u {:.12} (sigma_u {}), residual {:.2e}",
        best.theta_s, best.sigma_s, best.theta_u, best.sigma_u, best.residual
    );
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BvpOptions {
    pub sigma_u: f64,
    /// `Some(s)` pins `sigma_s = s`; `None` leaves it free (minimum-norm steps).
    pub sigma_s: Option<f64>,
    /// Boundary points integrated for the seed.
    pub seeds: usize,
    pub t_max: f64,
    /// Sampling step along seed trajectories.
    pub dt: f64,
    /// Phases sampled on the stable chart for the seed.
    pub grid_theta: usize,
    /// Seeds refined by Newton, best first.
    pub candidates: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub flow: FlowOptions,
}

impl Default for BvpOptions {
    fn default() -> Self {
        BvpOptions {
            sigma_u: -1.0,
            sigma_s: Some(1.0),
            seeds: 40,
            t_max: 10.0,
            dt: 0.01,
            grid_theta: 2000,
            candidates: 8,
            tol: 1e-8,
            max_iter: 40,
            fd_step: 1e-7,
            flow: FlowOptions::tight(),
        }
    }
}

struct Shooting<'a> {
    stable: &'a ManifoldParam,
    unstable: &'a ManifoldParam,
    sigma_u: f64,
    sigma_s: Option<f64>,
    flow: FlowOptions,
}

impl Shooting<'_> {
    /// Unknowns `(theta_u, theta_s, T)` or `(theta_u, theta_s, T, sigma_s)`.
    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let ss = self.sigma_s.unwrap_or_else(|| x[3]);
        let start = self.unstable.eval_unchecked(x[0], self.sigma_u);
        let end = flow(&self.stable.orbit.field(), &start, x[2], &self.flow)?.y;
        Ok(diff(&end, &self.stable.eval_unchecked(x[1], ss)))
    }

    fn jacobian(&self, x: &[f64], r0: &[f64], rel: f64) -> Result<DMatrix<f64>> {
        let n = x.len();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|k| -> Result<Vec<f64>> {
                let h = rel * x[k].abs().max(1.0);
                let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
                xp[k] += h;
                xm[k] -= h;
                let (rp, rm) = (self.residual(&xp)?, self.residual(&xm)?);
                Ok(rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
            })
            .collect::<Result<_>>()?;
        let mut j = DMatrix::zeros(r0.len(), n);
        for (k, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                j[(i, k)] = *v;
            }
        }
        Ok(j)
    }
}

/// Gauss-Newton on the shooting map from a given seed.
pub fn refine_bvp(
    stable: &ManifoldParam,
    unstable: &ManifoldParam,
    seed: &[f64],
    opts: &BvpOptions,
) -> Result<ConnectionResult> {
    let sh = Shooting { stable, unstable, sigma_u: opts.sigma_u, sigma_s: opts.sigma_s, flow: opts.flow };
    let expect = if opts.sigma_s.is_some() { 3 } else { 4 };
    if seed.len() != expect {
        return Err(Error::Contract(format!("shooting seed needs {expect} entries")));
    }
    let mut x = seed.to_vec();
    let mut r = sh.residual(&x)?;
    let mut it = 0;
    while norm(&r) > opts.tol && it < opts.max_iter {
        let j = sh.jacobian(&x, &r, opts.fd_step)?;
        let dx = gn_step(&j, &r)?;
        debug!("shooting iter {it}: x {x:?} residual {:.3e}", norm(&r));
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + step * b).collect();
            if let Ok(rt) = sh.residual(&trial) {
                if norm(&rt) < norm(&r) {
                    x = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        it += 1;
        if !accepted {
            break;
        }
        if x[2] < 0.0 {
            return Err(Error::NegativeTime(x[2]));
        }
    }
    let res = norm(&r);
    if res > opts.tol {
        return Err(Error::NotConverged { iterations: it, residual: res });
    }
    let sigma_s = opts.sigma_s.unwrap_or(x.get(3).copied().unwrap_or(0.0));
    if sigma_s.abs() > 1.0 + 1e-12 {
        return Err(Error::EscapedChart(format!("sigma_s = {sigma_s} outside the stable chart")));
    }
    let same = stable.orbit.gamma == unstable.orbit.gamma;
    Ok(ConnectionResult {
        theta_u: x[0].rem_euclid(unstable.period()),
        sigma_u: opts.sigma_u,
        theta_s: x[1].rem_euclid(stable.period()),
        sigma_s,
        t: x[2],
        kind: if same { ConnectionKind::Homoclinic } else { ConnectionKind::Bvp },
        residual: res,
        iterations: it,
    })
}

/// Candidate seeds `(distance, [theta_u, theta_s, T])`: closest approaches of
/// trajectories from evenly spaced boundary points to the stable chart.
pub fn bvp_seeds(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &BvpOptions) -> Result<Vec<(f64, [f64; 3])>> {
    let ss = opts.sigma_s.unwrap_or(1.0);
    let ts = stable.period();
    let ng = opts.grid_theta.max(8);
    let target: Vec<(f64, Vec<f64>)> =
        (0..ng).map(|a| ts * a as f64 / ng as f64).map(|th| (th, stable.eval_unchecked(th, ss))).collect();
    let field = stable.orbit.field();
    let nsteps = (opts.t_max / opts.dt).ceil() as usize;
    let times: Vec<f64> = (1..=nsteps).map(|q| q as f64 * opts.dt).collect();
    let tu = unstable.period();
    let mut out: Vec<(f64, [f64; 3])> = (0..opts.seeds)
        .into_par_iter()
        .filter_map(|c| {
            let thu = tu * c as f64 / opts.seeds as f64;
            let x0 = unstable.eval_unchecked(thu, opts.sigma_u);
            // Trajectories that hit a singularity simply stop contributing.
            let states = flow_samples(&field, &x0, 0.0, &times, &opts.flow).ok()?;
            let mut best = (f64::INFINITY, [0.0; 3]);
            for (q, y) in states.iter().enumerate() {
                for (th, p) in &target {
                    let d = norm(&diff(y, p));
                    if d < best.0 {
                        best = (d, [thu, *th, times[q]]);
                    }
                }
            }
            Some(best)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

fn check_bvp(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &BvpOptions) -> Result<()> {
    check_pair(stable, unstable)?;
    if opts.sigma_u.abs() != 1.0 {
        return Err(Error::Config("sigma_u must be +1 or -1".into()));
    }
    Ok(())
}

fn seed_vector(s: &[f64; 3], opts: &BvpOptions) -> Vec<f64> {
    let mut x = s.to_vec();
    if opts.sigma_s.is_none() {
        x.push(1.0);
    }
    x
}

/// Shooting connection refined from the best seeds in turn; the first that converges wins.
pub fn bvp_connection(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &BvpOptions) -> Result<ConnectionResult> {
    check_bvp(stable, unstable, opts)?;
    let seeds = bvp_seeds(stable, unstable, opts)?;
    let mut last = Error::NotConverged { iterations: 0, residual: f64::INFINITY };
    for (d, s) in seeds.iter().take(opts.candidates) {
        match refine_bvp(stable, unstable, &seed_vector(s, opts), opts) {
            Ok(c) => {
                info!("connection: T = {:.12}, residual {:.2e} (seed gap {d:.2e})", c.t, c.residual);
                return Ok(c);
            }
            Err(e) => {
                debug!("seed {s:?} (gap {d:.2e}) failed: {e}");
                last = e;
            }
        }
    }
    Err(last)
}

/// Every distinct connection reached from the seeds, ordered by the gap of the first seed that found it.
pub fn bvp_connections(stable: &ManifoldParam, unstable: &ManifoldParam, opts: &BvpOptions) -> Result<Vec<ConnectionResult>> {
    check_bvp(stable, unstable, opts)?;
    let seeds = bvp_seeds(stable, unstable, opts)?;
    let found: Vec<Option<ConnectionResult>> = seeds
        .par_iter()
        .map(|(_, s)| refine_bvp(stable, unstable, &seed_vector(s, opts), opts).ok())
        .collect();
    let mut out: Vec<ConnectionResult> = Vec::new();
    for c in found.into_iter().flatten() {
        let dup = out.iter().any(|f| (f.t - c.t).abs() < 1e-6 && (f.theta_u - c.theta_u).abs() < 1e-6);
        if !dup {
            out.push(c);
        }
    }
    Ok(out)
}

/// Integration-free path along a chart given by the conjugacy `P(theta + t, e^{lambda t} sigma)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConjugacyPath {
    /// Time needed (positive); forward for stable charts, backward for unstable ones.
    pub t: f64,
    /// Signed times `t'` of the samples.
    pub times: Vec<f64>,
    pub params: Vec<(f64, f64)>,
    pub points: Vec<Vec<f64>>,
}

/// `t = ln(sigma_target / sigma_start) / lambda`.
pub fn conjugacy_time(lambda: f64, sigma_start: f64, sigma_target: f64) -> Result<f64> {
    if sigma_target == 0.0 || sigma_start == 0.0 {
        return Err(Error::Domain("sigma = 0 is reached only in infinite time".into()));
    }
    if lambda == 0.0 {
        return Err(Error::Degenerate(0.0));
    }
    if sigma_target.signum() != sigma_start.signum() {
        return Err(Error::Domain("conjugacy paths cannot cross sigma = 0".into()));
    }
    Ok((sigma_target / sigma_start).abs().ln() / lambda)
}

/// Samples `P(theta + t', e^{lambda t'} sigma_start)` from `sigma_start` to `sigma_target`.
pub fn extend_by_conjugacy(
    man: &ManifoldParam,
    theta: f64,
    sigma_start: f64,
    sigma_target: f64,
    samples: usize,
) -> Result<ConjugacyPath> {
    if sigma_start.abs() > 1.0 || sigma_target.abs() > 1.0 {
        return Err(Error::Domain("conjugacy endpoints must lie in the chart".into()));
    }
    let t = conjugacy_time(man.lambda, sigma_start, sigma_target)?;
    let n = samples.max(2);
    let mut times = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for q in 0..n {
        let tp = t * q as f64 / (n - 1) as f64;
        let s = sigma_start * (man.lambda * tp).exp();
        times.push(tp);
        params.push((theta + tp, s));
        points.push(man.eval(theta + tp, s.clamp(-1.0, 1.0))?);
    }
    Ok(ConjugacyPath { t: t.abs(), times, params, points })
}

/// Full connecting trajectory: unstable tail, integrated middle and stable tail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssembledTrajectory {
    /// `(segment, time, state)`; segments are 0 (unstable tail), 1 (flight), 2 (stable tail).
    pub rows: Vec<(u8, f64, Vec<f64>)>,
    /// Distance from the first point to the unstable orbit and from the last to the stable orbit.
    pub start_gap: f64,
    pub end_gap: f64,
}

pub fn assemble_trajectory(
    stable: &ManifoldParam,
    unstable: &ManifoldParam,
    c: &ConnectionResult,
    truncation: f64,
    samples: usize,
    opts: &FlowOptions,
) -> Result<AssembledTrajectory> {
    let n = samples.max(2);
    let mut rows = Vec::new();
    // Unstable tail, in forward time order ending at the chart boundary.
    let su = truncation.copysign(c.sigma_u);
    let tail_u = extend_by_conjugacy(unstable, c.theta_u, c.sigma_u, su, n)?;
    for q in (0..n).rev() {
        rows.push((0u8, tail_u.times[q], tail_u.points[q].clone()));
    }
    let start = unstable.eval(c.theta_u, c.sigma_u)?;
    if c.t > 0.0 {
        let times: Vec<f64> = (1..n).map(|q| c.t * q as f64 / (n - 1) as f64).collect();
        let field = stable.orbit.field();
        let mid = flow_samples(&field, &start, 0.0, &times, opts)?;
        rows.push((1, 0.0, start.clone()));
        for (t, y) in times.iter().zip(mid) {
            rows.push((1, *t, y));
        }
    }
    let ss = truncation.copysign(c.sigma_s);
    let tail_s = extend_by_conjugacy(stable, c.theta_s, c.sigma_s, ss, n)?;
    for q in 0..n {
        rows.push((2, c.t + tail_s.times[q], tail_s.points[q].clone()));
    }
    let first = &rows[0].2;
    let last = &rows[rows.len() - 1].2;
    let start_gap = norm(&diff(first, &unstable.orbit.eval(c.theta_u + tail_u.times[n - 1])));
    let end_gap = norm(&diff(last, &stable.orbit.eval(c.theta_s + tail_s.times[n - 1])));
    Ok(AssembledTrajectory { rows, start_gap, end_gap })
}
