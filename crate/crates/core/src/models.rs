//! Polynomial vector fields, the built-in problem instances and their lifts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One monomial `coeff * [scalar] * prod x_{vars}` contributing to component `target`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub target: usize,
    pub coeff: f64,
    /// Sorted component indices (0-based); empty for a constant term.
    pub vars: Vec<usize>,
    /// Optional multiplier slot (e.g. the CRFBP unfolding parameter).
    pub scalar: Option<usize>,
}

/// A polynomial vector field stored as a flat list of monomials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyField {
    pub dim: usize,
    pub terms: Vec<Term>,
    pub params: BTreeMap<String, f64>,
    /// Named multiplier slots and their current values.
    pub scalars: Vec<(String, f64)>,
}

impl PolyField {
    pub fn new(dim: usize) -> Self {
        PolyField { dim, terms: Vec::new(), params: BTreeMap::new(), scalars: Vec::new() }
    }

    pub fn add(&mut self, target: usize, coeff: f64, vars: &[usize]) {
        self.add_scaled(target, coeff, vars, None);
    }

    pub fn add_scaled(&mut self, target: usize, coeff: f64, vars: &[usize], scalar: Option<usize>) {
        let mut vars = vars.to_vec();
        vars.sort_unstable();
        assert!(target < self.dim && vars.iter().all(|&v| v < self.dim), "hyperscript out of range");
        self.terms.push(Term { target, coeff, vars, scalar });
    }

    pub fn scalar_values(&self) -> Vec<f64> {
        self.scalars.iter().map(|s| s.1).collect()
    }

    pub fn scalar_index(&self, name: &str) -> Option<usize> {
        self.scalars.iter().position(|s| s.0 == name)
    }

    #[inline]
    pub fn term_weight(&self, t: &Term, scalars: &[f64]) -> f64 {
        match t.scalar {
            Some(s) => t.coeff * scalars[s],
            None => t.coeff,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with(x, &self.scalar_values())
    }

    pub fn eval_with(&self, x: &[f64], scalars: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, scalars, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], scalars: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for t in &self.terms {
            let w = self.term_weight(t, scalars);
            if w == 0.0 {
                continue;
            }
            out[t.target] += w * t.vars.iter().map(|&v| x[v]).product::<f64>();
        }
    }

    /// Jacobian by formal differentiation of every monomial.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.jacobian_with(x, &self.scalar_values())
    }

    pub fn jacobian_with(&self, x: &[f64], scalars: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.dim, self.dim);
        for t in &self.terms {
            let w = self.term_weight(t, scalars);
            if w == 0.0 {
                continue;
            }
            for p in 0..t.vars.len() {
                let rest: f64 = t.vars.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, &v)| x[v]).product();
                j[(t.target, t.vars[p])] += w * rest;
            }
        }
        j
    }

    pub fn divergence(&self, x: &[f64]) -> f64 {
        self.jacobian(x).trace()
    }

    /// The same field with time reversed.
    pub fn reversed(&self) -> PolyField {
        let mut f = self.clone();
        f.terms.iter_mut().for_each(|t| t.coeff = -t.coeff);
        f
    }

    /// Largest number of factors in any monomial.
    pub fn degree(&self) -> usize {
        self.terms.iter().map(|t| t.vars.len()).max().unwrap_or(0)
    }
}

/// The appended-coordinate map `R` of an automatic-differentiation lift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiftMap {
    Identity { d: usize },
    /// `(x, y) -> (x, y, 1/|x|)`.
    Kepler { mass: f64 },
    /// `u -> (u, 1/r1, 1/r2)`.
    Crtbp { mu: f64 },
    /// `u in R^6 -> (u, 1/r1, 1/r2, 1/r3)`.
    Crfbp { masses: [f64; 3], primaries: [[f64; 3]; 3] },
}

impl LiftMap {
    /// Original dimension `d`.
    pub fn d(&self) -> usize {
        match self {
            LiftMap::Identity { d } => *d,
            LiftMap::Kepler { .. } => 2,
            LiftMap::Crtbp { .. } => 4,
            LiftMap::Crfbp { .. } => 6,
        }
    }

    /// Lifted dimension.
    pub fn dim(&self) -> usize {
        match self {
            LiftMap::Identity { d } => *d,
            LiftMap::Kepler { .. } => 3,
            LiftMap::Crtbp { .. } => 6,
            LiftMap::Crfbp { .. } => 9,
        }
    }

    /// Distances to the singular points, used for guards.
    pub fn distances(&self, x: &[f64]) -> Vec<f64> {
        match self {
            LiftMap::Identity { .. } => vec![],
            LiftMap::Kepler { .. } => vec![x[0].abs()],
            LiftMap::Crtbp { mu } => vec![(x[0] + mu).hypot(x[2]), (x[0] - 1.0 + mu).hypot(x[2])],
            LiftMap::Crfbp { primaries, .. } => primaries
                .iter()
                .map(|p| ((x[0] - p[0]).powi(2) + (x[2] - p[1]).powi(2) + (x[4] - p[2]).powi(2)).sqrt())
                .collect(),
        }
    }

    /// True away from the singular set.
    pub fn guard(&self, x: &[f64], radius: f64) -> bool {
        self.distances(x).iter().all(|&r| r > radius)
    }

    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x[..self.d()].to_vec();
        v.extend(self.distances(x).iter().map(|r| 1.0 / r));
        v
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        v[..self.d()].to_vec()
    }

    /// Indices of the appended coordinates within the lifted state.
    pub fn lifted_indices(&self) -> std::ops::Range<usize> {
        self.d()..self.dim()
    }

    /// Largest violation of `v_appended = R(pi(v))` at a lifted point.
    pub fn consistency(&self, v: &[f64]) -> f64 {
        let r = self.lift(&v[..self.d()]);
        self.lifted_indices().map(|j| (r[j] - v[j]).abs()).fold(0.0, f64::max)
    }

    /// The original (non-polynomial) field `f` in `d` dimensions.
    pub fn original_field(&self, x: &[f64], field: &PolyField) -> Vec<f64> {
        match self {
            LiftMap::Identity { .. } => field.eval(x),
            LiftMap::Kepler { mass } => vec![x[1], -mass * x[0] / x[0].abs().powi(3)],
            LiftMap::Crtbp { mu } => {
                let r1 = (x[0] + mu).hypot(x[2]).powi(3);
                let r2 = (x[0] - 1.0 + mu).hypot(x[2]).powi(3);
                vec![
                    x[1],
                    2.0 * x[3] + x[0] - (1.0 - mu) * (x[0] + mu) / r1 - mu * (x[0] - 1.0 + mu) / r2,
                    x[3],
                    -2.0 * x[1] + x[2] - (1.0 - mu) * x[2] / r1 - mu * x[2] / r2,
                ]
            }
            LiftMap::Crfbp { masses, primaries } => {
                let (ox, oy, oz) = crfbp_gradient(masses, primaries, x[0], x[2], x[4]);
                let beta = field.scalar_index("beta").map(|s| field.scalars[s].1).unwrap_or(0.0);
                vec![x[1], 2.0 * x[3] + ox + beta * x[1], x[3], -2.0 * x[1] + oy, x[5], oz]
            }
        }
    }
}

/// `(Omega_x, Omega_y, Omega_z)` of the four-body effective potential.
pub fn crfbp_gradient(masses: &[f64; 3], primaries: &[[f64; 3]; 3], x: f64, y: f64, z: f64) -> (f64, f64, f64) {
    let (mut ox, mut oy, mut oz) = (x, y, 0.0);
    for (m, p) in masses.iter().zip(primaries) {
        let r3 = ((x - p[0]).powi(2) + (y - p[1]).powi(2) + (z - p[2]).powi(2)).sqrt().powi(3);
        ox -= m * (x - p[0]) / r3;
        oy -= m * (y - p[1]) / r3;
        oz -= m * (z - p[2]) / r3;
    }
    (ox, oy, oz)
}

/// Built-in problem instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelKind {
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    Crtbp { mu: f64 },
    Crfbp { m1: f64, m2: f64, m3: f64 },
    Kepler { mass: f64 },
    /// `x' = A x` with `A` given row-major.
    Linear { a: Vec<f64> },
}

/// A polynomial field together with its lift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub field: PolyField,
    pub lift: LiftMap,
}

impl Model {
    pub fn build(kind: &ModelKind) -> Result<Model> {
        let (field, lift) = match *kind {
            ModelKind::Lorenz { sigma, rho, beta } => {
                if !(sigma > 0.0 && rho > 0.0 && beta > 0.0) {
                    return Err(Error::Config("Lorenz parameters must be positive".into()));
                }
                (lorenz(sigma, rho, beta), LiftMap::Identity { d: 3 })
            }
            ModelKind::Crtbp { mu } => crtbp(mu)?,
            ModelKind::Crfbp { m1, m2, m3 } => {
                let (f, l, _) = crfbp(m1, m2, m3)?;
                (f, l)
            }
            ModelKind::Kepler { mass } => kepler(mass)?,
            ModelKind::Linear { ref a } => {
                let n = (a.len() as f64).sqrt().round() as usize;
                if n * n != a.len() || n == 0 {
                    return Err(Error::Config("linear model needs a square matrix".into()));
                }
                (linear(&DMatrix::from_row_slice(n, n, a)), LiftMap::Identity { d: n })
            }
        };
        Ok(Model { kind: kind.clone(), field, lift })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Lorenz { .. } => "lorenz",
            ModelKind::Crtbp { .. } => "crtbp",
            ModelKind::Crfbp { .. } => "crfbp",
            ModelKind::Kepler { .. } => "kepler",
            ModelKind::Linear { .. } => "linear",
        }
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    /// Jacobi constant for CRTBP lifted states, `None` for other models.
    pub fn energy(&self, v: &[f64]) -> Option<f64> {
        match self.kind {
            ModelKind::Crtbp { mu } => Some(crtbp_energy(mu, v)),
            _ => None,
        }
    }
}

/// `(sigma (y - x), rho x - x z - y, x y - beta z)`.
pub fn lorenz(sigma: f64, rho: f64, beta: f64) -> PolyField {
    let mut f = PolyField::new(3);
    f.params.insert("sigma".into(), sigma);
    f.params.insert("rho".into(), rho);
    f.params.insert("beta".into(), beta);
    f.add(0, sigma, &[1]);
    f.add(0, -sigma, &[0]);
    f.add(1, rho, &[0]);
    f.add(1, -1.0, &[0, 2]);
    f.add(1, -1.0, &[1]);
    f.add(2, 1.0, &[0, 1]);
    f.add(2, -beta, &[2]);
    f
}

/// `x' = A x`.
pub fn linear(a: &DMatrix<f64>) -> PolyField {
    let n = a.nrows();
    let mut f = PolyField::new(n);
    for r in 0..n {
        for c in 0..n {
            if a[(r, c)] != 0.0 {
                f.add(r, a[(r, c)], &[c]);
            }
        }
    }
    f
}

/// Lifted CRTBP field; `v5 = 1/r1`, `v6 = 1/r2` (components 4 and 5 here).
pub fn crtbp(mu: f64) -> Result<(PolyField, LiftMap)> {
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Config(format!("CRTBP mass ratio must lie in (0,1), got {mu}")));
    }
    let nu = 1.0 - mu;
    let mut f = PolyField::new(6);
    f.params.insert("mu".into(), mu);
    f.add(0, 1.0, &[1]);

    f.add(1, 2.0, &[3]);
    f.add(1, 1.0, &[0]);
    f.add(1, -nu, &[0, 4, 4, 4]);
    f.add(1, -nu * mu, &[4, 4, 4]);
    f.add(1, -mu, &[0, 5, 5, 5]);
    f.add(1, mu * nu, &[5, 5, 5]);

    f.add(2, 1.0, &[3]);

    f.add(3, -2.0, &[1]);
    f.add(3, 1.0, &[2]);
    f.add(3, -nu, &[2, 4, 4, 4]);
    f.add(3, -mu, &[2, 5, 5, 5]);

    f.add(4, -1.0, &[0, 1, 4, 4, 4]);
    f.add(4, -mu, &[1, 4, 4, 4]);
    f.add(4, -1.0, &[2, 3, 4, 4, 4]);

    f.add(5, -1.0, &[0, 1, 5, 5, 5]);
    f.add(5, nu, &[1, 5, 5, 5]);
    f.add(5, -1.0, &[2, 3, 5, 5, 5]);
    Ok((f, LiftMap::Crtbp { mu }))
}

/// Jacobi constant `x^2 + y^2 + 2(1-mu)/r1 + 2 mu/r2 - xdot^2 - ydot^2` on lifted states.
pub fn crtbp_energy(mu: f64, v: &[f64]) -> f64 {
    v[0] * v[0] + v[2] * v[2] + 2.0 * (1.0 - mu) * v[4] + 2.0 * mu * v[5] - v[1] * v[1] - v[3] * v[3]
}

/// Gradient of [`crtbp_energy`] with respect to the lifted state.
pub fn crtbp_energy_gradient(mu: f64, v: &[f64]) -> [f64; 6] {
    [2.0 * v[0], -2.0 * v[1], 2.0 * v[2], -2.0 * v[3], 2.0 * (1.0 - mu), 2.0 * mu]
}

/// Equilateral primaries for masses `m1 >= m2 >= m3`, summing to one.
pub fn crfbp_primaries(m1: f64, m2: f64, m3: f64) -> Result<[[f64; 3]; 3]> {
    if !(m3 > 0.0 && m3 <= m2 && m2 <= m1) {
        return Err(Error::Contract(format!("masses must satisfy 0 < m3 <= m2 <= m1, got ({m1}, {m2}, {m3})")));
    }
    if (m1 + m2 + m3 - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("masses must sum to 1, got {}", m1 + m2 + m3)));
    }
    let s = (m2 * m2 + m2 * m3 + m3 * m3).sqrt();
    let k = m2 * (m3 - m2) + m1 * (m2 + 2.0 * m3);
    let q = (m2.powi(3) / (s * s)).sqrt();
    let x1 = -k.abs() * s / k;
    let x2 = k.abs() * ((m2 - m3) * m3 + m1 * (2.0 * m2 + m3)) / (2.0 * k * s);
    let y2 = -(3f64.sqrt()) * m3 / (2.0 * m2.powf(1.5)) * q;
    let x3 = k.abs() / (2.0 * s);
    let y3 = 3f64.sqrt() / (2.0 * m2.sqrt()) * q;
    Ok([[x1, 0.0, 0.0], [x2, y2, 0.0], [x3, y3, 0.0]])
}

/// Lifted nine-dimensional CRFBP field with the `beta` slot and the `alpha_i` parameters.
pub fn crfbp(m1: f64, m2: f64, m3: f64) -> Result<(PolyField, LiftMap, [[f64; 3]; 3])> {
    let p = crfbp_primaries(m1, m2, m3)?;
    let m = [m1, m2, m3];
    let mut f = PolyField::new(9);
    for (name, v) in [("m1", m1), ("m2", m2), ("m3", m3), ("alpha1", 0.0), ("alpha2", 0.0), ("alpha3", 0.0)] {
        f.params.insert(name.into(), v);
    }
    f.scalars.push(("beta".into(), 0.0));

    f.add(0, 1.0, &[1]);
    f.add(1, 2.0, &[3]);
    f.add(1, 1.0, &[0]);
    f.add(2, 1.0, &[3]);
    f.add(3, -2.0, &[1]);
    f.add(3, 1.0, &[2]);
    f.add(4, 1.0, &[5]);
    for i in 0..3 {
        let w = 6 + i;
        let (xi, yi, zi) = (p[i][0], p[i][1], p[i][2]);
        f.add(1, -m[i], &[0, w, w, w]);
        f.add(1, m[i] * xi, &[w, w, w]);
        f.add(3, -m[i], &[2, w, w, w]);
        f.add(3, m[i] * yi, &[w, w, w]);
        f.add(5, -m[i], &[4, w, w, w]);
        f.add(5, m[i] * zi, &[w, w, w]);
    }
    f.add_scaled(1, 1.0, &[1], Some(0));
    for i in 0..3 {
        let w = 6 + i;
        let (xi, yi, zi) = (p[i][0], p[i][1], p[i][2]);
        f.add(w, -1.0, &[0, 1, w, w, w]);
        f.add(w, -1.0, &[2, 3, w, w, w]);
        f.add(w, -1.0, &[4, 5, w, w, w]);
        f.add(w, xi, &[1, w, w, w]);
        f.add(w, yi, &[3, w, w, w]);
        f.add(w, zi, &[5, w, w, w]);
        f.add(w, f.params[&format!("alpha{}", i + 1)], &[w, w, w]);
    }
    Ok((f, LiftMap::Crfbp { masses: m, primaries: p }, p))
}

/// Lifted one-dimensional Kepler field `(y, -M z^3 x, -z^3 x y)` with `z = 1/|x|`.
pub fn kepler(mass: f64) -> Result<(PolyField, LiftMap)> {
    if !(mass > 0.0) {
        return Err(Error::Config(format!("Kepler mass must be positive, got {mass}")));
    }
    let mut f = PolyField::new(3);
    f.params.insert("M".into(), mass);
    f.add(0, 1.0, &[1]);
    f.add(1, -mass, &[0, 2, 2, 2]);
    f.add(2, -1.0, &[0, 1, 2, 2, 2]);
    Ok((f, LiftMap::Kepler { mass }))
}

/// Directional derivative of `R` at `x` along `u` by Ridders' extrapolation of central
/// differences. Returns the estimate with the smallest tableau error.
fn ridders_directional(lift: &LiftMap, x: &[f64], u: &[f64], h0: f64) -> Vec<f64> {
    const CON: f64 = 1.4;
    const NTAB: usize = 12;
    let central = |h: f64| {
        let xp: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - h * b).collect();
        let (rp, rm) = (lift.lift(&xp), lift.lift(&xm));
        rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<f64>>()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let mut h = h0;
    let mut prev: Vec<Vec<f64>> = vec![central(h)];
    let mut best = prev[0].clone();
    let mut err = f64::INFINITY;
    for _ in 1..NTAB {
        h /= CON;
        let mut row = vec![central(h)];
        let mut fac = CON * CON;
        for j in 1..=prev.len() {
            let next: Vec<f64> = row[j - 1].iter().zip(&prev[j - 1]).map(|(a, b)| (a * fac - b) / (fac - 1.0)).collect();
            fac *= CON * CON;
            let e = dist(&next, &row[j - 1]).max(dist(&next, &prev[j - 1]));
            if e <= err {
                err = e;
                best = next.clone();
            }
            row.push(next);
        }
        let last = row.len() - 1;
        if dist(&row[last], &prev[last - 1]) >= 2.0 * err {
            break;
        }
        prev = row;
    }
    best
}

/// Max over samples of `|DR(x) f(x) - F(R(x))|`, `DR f` by extrapolated differences along `f`.
///
/// Points are drawn by `sample`, which may return `None` to request another draw.
pub fn check_lift(
    lift: &LiftMap,
    field: &PolyField,
    samples: usize,
    mut sample: impl FnMut() -> Option<Vec<f64>>,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("check_lift needs at least one sample".into()));
    }
    let mut worst: f64 = 0.0;
    let mut taken = 0;
    let mut tries = 0;
    while taken < samples {
        tries += 1;
        if tries > 100 * samples + 1000 {
            return Err(Error::Sampling(format!("only {taken} guard-satisfying points in {tries} draws")));
        }
        let Some(x) = sample() else { continue };
        if !lift.guard(&x, 1e-3) {
            continue;
        }
        taken += 1;
        let f = lift.original_field(&x, field);
        let big = field.eval(&lift.lift(&x));
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dr = if norm == 0.0 {
            vec![0.0; lift.dim()]
        } else {
            let u: Vec<f64> = f.iter().map(|v| v / norm).collect();
            // Keep the widest stencil well inside the guard ball.
            let h0 = 0.1 * lift.distances(&x).iter().copied().fold(1.0, f64::min);
            ridders_directional(lift, &x, &u, h0).into_iter().map(|v| v * norm).collect()
        };
        let res = dr.iter().zip(&big).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(res);
    }
    Ok(worst)
}
