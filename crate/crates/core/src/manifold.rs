//! Taylor coefficients `A_alpha` of the parameterization
//! `P(t, sigma) = sum_alpha A_alpha(t) sigma^alpha`, evaluation and diagnostics.

use std::collections::HashMap;

use log::{debug, info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{solve_bundle, BundleOptions, FloquetBundle, Stability};
use crate::bvp::{field_series_jacobian, solve_affine, BoundaryRow, NewtonOptions, ResidualSystem, Rhs};
use crate::cheb::{cauchy_conv, clenshaw, convolve, derivative, PeriodicPiecewise};
use crate::error::{Error, Result};
use crate::flow::{flow, FlowOptions};
use crate::models::PolyField;
use crate::orbit::Orbit;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifoldParam {
    pub orbit: Orbit,
    pub bundle: FloquetBundle,
    /// `A_2 .. A_N`.
    pub taylor: Vec<PeriodicPiecewise>,
    pub n: usize,
    pub lambda: f64,
    /// Condition estimate of each homological solve, indexed like `taylor`.
    pub conditions: Vec<f64>,
}

impl ManifoldParam {
    pub fn stability(&self) -> Stability {
        self.bundle.stability
    }

    pub fn period(&self) -> f64 {
        self.orbit.period()
    }

    /// `A_alpha` for `alpha = 0..=N`.
    pub fn coeff(&self, alpha: usize) -> &PeriodicPiecewise {
        match alpha {
            0 => &self.orbit.gamma,
            1 => &self.bundle.v,
            a => &self.taylor[a - 2],
        }
    }

    /// Same manifold cut at order `n`.
    pub fn truncated(&self, n: usize) -> Result<ManifoldParam> {
        if n > self.n || n < 1 {
            return Err(Error::Config(format!("cannot truncate an order-{} manifold to order {n}", self.n)));
        }
        let mut out = self.clone();
        out.taylor.truncate(n.saturating_sub(1));
        out.conditions.truncate(n.saturating_sub(1));
        out.n = n;
        Ok(out)
    }

    /// `P(t, sigma)`; `|sigma| > 1` is outside the chart.
    pub fn eval(&self, t: f64, sigma: f64) -> Result<Vec<f64>> {
        if !(sigma.abs() <= 1.0) {
            return Err(Error::Domain(format!("sigma = {sigma} is outside [-1, 1]")));
        }
        Ok(self.eval_unchecked(t, sigma))
    }

    /// Horner evaluation without the chart check (used inside Newton iterations).
    pub fn eval_unchecked(&self, t: f64, sigma: f64) -> Vec<f64> {
        let (i, s) = self.orbit.gamma.mesh.locate(t);
        let dim = self.orbit.gamma.dim;
        let mut out = vec![0.0; dim];
        for alpha in (0..=self.n).rev() {
            let a = self.coeff(alpha);
            for (j, o) in out.iter_mut().enumerate() {
                *o = *o * sigma + clenshaw(a.piece(i, j), s);
            }
        }
        out
    }

    /// `(d/dt P, d/dsigma P)` at `(t, sigma)`.
    pub fn eval_derivatives(&self, t: f64, sigma: f64) -> (Vec<f64>, Vec<f64>) {
        let mesh = &self.orbit.gamma.mesh;
        let (i, s) = mesh.locate(t);
        let li = mesh.li(i);
        let dim = self.orbit.gamma.dim;
        let (mut dt, mut ds) = (vec![0.0; dim], vec![0.0; dim]);
        for alpha in (0..=self.n).rev() {
            let a = self.coeff(alpha);
            for j in 0..dim {
                dt[j] = dt[j] * sigma + clenshaw(&derivative(a.piece(i, j)), s) / li;
                if alpha >= 1 {
                    ds[j] = ds[j] * sigma + alpha as f64 * clenshaw(a.piece(i, j), s);
                }
            }
        }
        (dt, ds)
    }

    /// `||a_alpha|| = max_i sum_j sum_k |a^{(i,j)}_{alpha,k}|`.
    pub fn order_norm(&self, alpha: usize) -> f64 {
        self.coeff(alpha).max_tail_norm()
    }

    /// Rows `alpha = 0..=N`, columns subdomains.
    pub fn decay_profile(&self) -> Vec<Vec<f64>> {
        (0..=self.n)
            .map(|a| {
                let c = self.coeff(a);
                (0..c.mesh.d()).map(|i| c.tail_norm(i)).collect()
            })
            .collect()
    }

    /// Max of `|P_t + lambda sigma P_sigma - g(P)|` over `samples` pseudo-random `(t, sigma)`.
    pub fn invariance_defect(&self, samples: usize, seed: u64) -> f64 {
        let field = self.orbit.field();
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let tau = self.period();
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let t = rng.gen_range(0.0..tau);
            let sigma = rng.gen_range(-1.0..=1.0);
            let p = self.eval_unchecked(t, sigma);
            let (dt, ds) = self.eval_derivatives(t, sigma);
            let g = field.eval(&p);
            for j in 0..p.len() {
                worst = worst.max((dt[j] + self.lambda * sigma * ds[j] - g[j]).abs());
            }
        }
        worst
    }
}

/// Suffix products `S^beta` of one sorted variable list on one domain, `beta = 0..=alpha`.
type SuffixTable = HashMap<Vec<usize>, Vec<Vec<f64>>>;

/// Cached Cauchy products of every monomial suffix, one table per subdomain.
struct ProductCache {
    keys: Vec<Vec<usize>>,
    tables: Vec<SuffixTable>,
}

impl ProductCache {
    fn new(field: &PolyField, d: usize) -> Self {
        let mut keys: Vec<Vec<usize>> = Vec::new();
        for t in &field.terms {
            for r in 0..t.vars.len() {
                let k = t.vars[r..].to_vec();
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        // Shorter suffixes first so each key can read its tail.
        keys.sort_by_key(|k| k.len());
        ProductCache { keys, tables: vec![HashMap::new(); d] }
    }

    /// Appends `S^alpha` for every key, computed with the current (possibly zero) `A_alpha`.
    fn push_order(&mut self, tower: &[&PeriodicPiecewise], alpha: usize) {
        let keys = &self.keys;
        self.tables.par_iter_mut().enumerate().for_each(|(i, table)| {
            for key in keys {
                let first = key[0];
                let value = if key.len() == 1 {
                    tower[alpha].piece(i, first).to_vec()
                } else {
                    let rest = &table[&key[1..]];
                    let mut acc: Vec<f64> = Vec::new();
                    for (gamma, a) in tower.iter().enumerate().take(alpha + 1) {
                        let a = a.piece(i, first);
                        let b = &rest[alpha - gamma];
                        let p = convolve(a, b, a.len() + b.len() - 1);
                        if acc.len() < p.len() {
                            acc.resize(p.len(), 0.0);
                        }
                        acc.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
                    }
                    acc
                };
                table.entry(key.clone()).or_default().push(value);
            }
        });
    }

    /// After `A_alpha` changes from zero to its solved value, updates `S^alpha` in place.
    fn update_order(&mut self, a0: &PeriodicPiecewise, a_alpha: &PeriodicPiecewise, alpha: usize) {
        let keys = &self.keys;
        self.tables.par_iter_mut().enumerate().for_each(|(i, table)| {
            let mut delta: HashMap<&[usize], Vec<f64>> = HashMap::new();
            for key in keys {
                let first = key[0];
                let d = if key.len() == 1 {
                    a_alpha.piece(i, first).to_vec()
                } else {
                    let rest0 = &table[&key[1..]][0];
                    let a = a_alpha.piece(i, first);
                    let mut acc = convolve(a, rest0, a.len() + rest0.len() - 1);
                    let drest = &delta[&key[1..]];
                    let b = a0.piece(i, first);
                    let p = convolve(b, drest, b.len() + drest.len() - 1);
                    if acc.len() < p.len() {
                        acc.resize(p.len(), 0.0);
                    }
                    acc.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
                    acc
                };
                delta.insert(key.as_slice(), d);
            }
            for key in keys {
                let d = &delta[key.as_slice()];
                let s = &mut table.get_mut(key).expect("key present")[alpha];
                if s.len() < d.len() {
                    s.resize(d.len(), 0.0);
                }
                s.iter_mut().zip(d).for_each(|(x, y)| *x += y);
            }
        });
    }

    /// `g_alpha` coefficients `c_0..c_m` per domain from the current `S^alpha` tables.
    fn forcing(&self, field: &PolyField, scalars: &[f64], m: usize, alpha: usize) -> Vec<Vec<f64>> {
        let dim = field.dim;
        self.tables
            .iter()
            .map(|table| {
                let mut c = vec![0.0; dim * (m + 1)];
                for t in &field.terms {
                    if t.vars.len() < 2 {
                        continue;
                    }
                    let w = field.term_weight(t, scalars);
                    let s = &table[&t.vars][alpha];
                    for k in 0..=m.min(s.len().saturating_sub(1)) {
                        c[t.target * (m + 1) + k] += w * s[k];
                    }
                }
                c
            })
            .collect()
    }
}

/// Reference `g_alpha` straight from the Cauchy-product definition (no caching).
///
/// `lower` holds `A_0 .. A_{alpha-1}`; `A_alpha` is treated as zero.
pub fn forcing_direct(field: &PolyField, lower: &[&PeriodicPiecewise], alpha: usize) -> Result<Vec<Vec<f64>>> {
    let a0 = lower.first().ok_or_else(|| Error::Contract("need at least A_0".into()))?;
    let (d, m, dim) = (a0.mesh.d(), a0.m, a0.dim);
    let scalars = field.scalar_values();
    (0..d)
        .map(|i| {
            let mut c = vec![0.0; dim * (m + 1)];
            for t in &field.terms {
                if t.vars.len() < 2 {
                    continue;
                }
                let towers: Vec<Vec<Vec<f64>>> =
                    t.vars.iter().map(|&v| lower.iter().map(|a| a.piece(i, v).to_vec()).collect()).collect();
                let refs: Vec<&[Vec<f64>]> = towers.iter().map(|t| t.as_slice()).collect();
                let p = cauchy_conv(&refs, alpha, m + 1)?;
                let w = field.term_weight(t, &scalars);
                for k in 0..=m {
                    c[t.target * (m + 1) + k] += w * p[k];
                }
            }
            Ok(c)
        })
        .collect()
}

/// The affine system for `A_alpha` given its forcing.
pub fn homological_system(
    orbit: &Orbit,
    lambda: f64,
    alpha: usize,
    dg: Vec<DMatrix<f64>>,
    forcing: Vec<Vec<f64>>,
) -> ResidualSystem {
    let g = &orbit.gamma;
    ResidualSystem {
        mesh: g.mesh.clone(),
        dim: g.dim,
        m: g.m,
        rhs: Rhs::Homological { alpha, lambda, dg, forcing },
        boundary: vec![BoundaryRow::Periodic; g.dim],
        phase: vec![],
        extras: vec![],
    }
}

fn orbit_dg(orbit: &Orbit) -> Vec<DMatrix<f64>> {
    let field = orbit.field();
    let scal = field.scalar_values();
    let g = &orbit.gamma;
    (0..g.mesh.d()).map(|i| field_series_jacobian(&field, &scal, g.domain(i), g.m).0).collect()
}

/// Solves the homological equations for `A_2 .. A_N` given the orbit and bundle.
pub fn solve_manifold(orbit: &Orbit, bundle: &FloquetBundle, n: usize, newton: &NewtonOptions) -> Result<ManifoldParam> {
    if n < 1 {
        return Err(Error::Config("Taylor order must be at least 1".into()));
    }
    if bundle.v.mesh != orbit.gamma.mesh || bundle.v.m != orbit.gamma.m {
        return Err(Error::Config("bundle and orbit live on different meshes".into()));
    }
    let field = orbit.field();
    let scal = field.scalar_values();
    let lambda = bundle.lambda;
    let g = &orbit.gamma;
    let dg = orbit_dg(orbit);
    let mut cache = ProductCache::new(&field, g.mesh.d());
    let zero = PeriodicPiecewise::zeros(g.mesh.clone(), g.dim, g.m);
    cache.push_order(&[g], 0);
    cache.push_order(&[g, &zero], 1);
    cache.update_order(g, &bundle.v, 1);
    let mut taylor: Vec<PeriodicPiecewise> = Vec::with_capacity(n.saturating_sub(1));
    let mut conditions = Vec::new();
    for alpha in 2..=n {
        {
            let mut tower: Vec<&PeriodicPiecewise> = vec![g, &bundle.v];
            tower.extend(taylor.iter());
            tower.push(&zero);
            cache.push_order(&tower, alpha);
        }
        let forcing = cache.forcing(&field, &scal, g.m, alpha);
        // Order alpha is resonant when alpha * lambda matches an exponent of the orbit; in
        // scope that never happens, but the conditioning is still surfaced.
        let sys = homological_system(orbit, lambda, alpha, dg.clone(), forcing);
        let (z, report) = solve_affine(&sys, newton)?;
        if !report.converged {
            warn!("order {alpha}: affine residual {:.2e} above tolerance", report.residual);
        }
        debug!("order {alpha}: residual {:.2e}, condition {:.2e}", report.residual, report.condition);
        let a = PeriodicPiecewise::from_coeffs(g.mesh.clone(), g.dim, g.m, z)?;
        cache.update_order(g, &a, alpha);
        conditions.push(report.condition);
        taylor.push(a);
    }
    let man = ManifoldParam { orbit: orbit.clone(), bundle: bundle.clone(), taylor, n, lambda, conditions };
    info!("manifold to order {n}: ||a_N|| = {:.3e}", man.order_norm(n));
    Ok(man)
}

/// Max and mean of the flow-conjugacy defect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyError {
    pub max: f64,
    pub mean: f64,
}

/// `|P(s + t, e^{lambda t} sigma) - Phi(P(s, sigma), t)|` over `n_samples` points with
/// `sigma = +-1` and `s` evenly spaced; `t = t0` for stable manifolds and `-t0` for unstable ones.
pub fn conjugacy_error(man: &ManifoldParam, t0: f64, n_samples: usize, opts: &FlowOptions) -> Result<ConjugacyError> {
    if !(t0 >= 0.0) {
        return Err(Error::Config(format!("test time must be non-negative, got {t0}")));
    }
    if t0 == 0.0 || n_samples == 0 {
        return Ok(ConjugacyError { max: 0.0, mean: 0.0 });
    }
    let t = match man.stability() {
        Stability::Stable => t0,
        Stability::Unstable => -t0,
    };
    let field = man.orbit.field();
    let tau = man.period();
    let half = n_samples.div_ceil(2);
    let pts: Vec<(f64, f64)> = (0..n_samples)
        .map(|q| {
            let sigma = if q % 2 == 0 { 1.0 } else { -1.0 };
            (tau * (q / 2) as f64 / half as f64, sigma)
        })
        .collect();
    let errs: Vec<f64> = pts
        .par_iter()
        .map(|&(s, sigma)| -> Result<f64> {
            let start = man.eval(s, sigma)?;
            let end = flow(&field, &start, t, opts)?.y;
            let target = man.eval(s + t, (man.lambda * t).exp() * sigma)?;
            Ok(end.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect::<Result<_>>()?;
    let max = errs.iter().copied().fold(0.0, f64::max);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok(ConjugacyError { max, mean })
}

/// Builds the full manifold (bundle plus tower) for one normalization constant.
pub fn build_manifold(orbit: &Orbit, stability: Stability, n: usize, bundle_opts: &BundleOptions) -> Result<ManifoldParam> {
    let bundle = solve_bundle(orbit, stability, bundle_opts)?;
    solve_manifold(orbit, &bundle, n, &bundle_opts.newton)
}

/// Outcome of [`choose_scale`].
#[derive(Clone, Debug)]
pub struct ScaleChoice {
    pub k: f64,
    pub manifold: ManifoldParam,
    pub probes: usize,
}

/// Bisection in `log K` until `||a_N||` lies within three decades of `target`.
pub fn choose_scale(orbit: &Orbit, stability: Stability, n: usize, target: f64, bundle_opts: &BundleOptions) -> Result<ScaleChoice> {
    if !(target > 0.0) || n < 2 {
        return Err(Error::Config("scale search needs a positive target and N >= 2".into()));
    }
    let goal = target.log10();
    let mut probes = 0;
    let mut probe = |lk: f64| -> Result<(f64, ManifoldParam)> {
        probes += 1;
        let opts = BundleOptions { k: 10f64.powf(lk), ..bundle_opts.clone() };
        let man = build_manifold(orbit, stability, n, &opts)?;
        let v = man.order_norm(n).log10();
        debug!("scale probe K = {:.4e}: log10 ||a_N|| = {v:.2}", opts.k);
        Ok((v, man))
    };
    let mut history: Vec<(f64, f64)> = Vec::new();
    let mut lo = bundle_opts.k.log10();
    let (mut vlo, mut man) = probe(lo)?;
    history.push((lo, vlo));
    if (vlo - goal).abs() <= 3.0 {
        return Ok(ScaleChoice { k: 10f64.powf(lo), manifold: man, probes: 1 });
    }
    // Expand a bracket two decades at a time.
    let step = if vlo < goal { 2.0 } else { -2.0 };
    let mut hi = lo;
    let mut vhi = vlo;
    while (vhi < goal) == (vlo < goal) {
        if history.len() >= 40 {
            return Err(Error::Validation(format!("no scale bracket found; probes (log K, log ||a_N||): {history:?}")));
        }
        lo = hi;
        vlo = vhi;
        hi += step;
        let (v, m) = probe(hi)?;
        vhi = v;
        man = m;
        history.push((hi, vhi));
        if (vhi - goal).abs() <= 3.0 {
            return Ok(ScaleChoice { k: 10f64.powf(hi), manifold: man, probes: history.len() });
        }
        if step > 0.0 && vhi < vlo || step < 0.0 && vhi > vlo {
            return Err(Error::Validation(format!("tail norm is not monotone in K; probes: {history:?}")));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let (v, m) = probe(mid)?;
        history.push((mid, v));
        if (v - goal).abs() <= 3.0 {
            return Ok(ScaleChoice { k: 10f64.powf(mid), manifold: m, probes: history.len() });
        }
        if (v < goal) == (vlo < goal) {
            lo = mid;
            vlo = v;
        } else {
            hi = mid;
        }
        if history.len() >= 40 {
            break;
        }
    }
    Err(Error::Validation(format!("scale search did not reach the target; probes: {history:?}")))
}
