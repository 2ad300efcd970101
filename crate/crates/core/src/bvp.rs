//! Integrated Chebyshev residual systems on a multi-domain mesh and their Newton solver.
//!
//! Unknowns are the coefficients `a^{(i,j)}_k` (domain-major, component-minor,
//! `k` innermost) followed by the extra scalars. Residual rows use the same
//! ordering: row `(i, j, 0)` is the boundary row of piece `(i, j)`, rows
//! `(i, j, k >= 1)` are `2k a_k + L_i (c_{k+1} - c_{k-1})`, and the phase rows
//! come last.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cheb::{endpoint_sum, endpoint_weight, product_full, Mesh, Side};
use crate::error::{Error, Result};
use crate::models::{crtbp_energy, crtbp_energy_gradient, PolyField};

/// Scalar unknowns appended after the coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Extra {
    /// The half-period `L`.
    HalfPeriod,
    /// The Floquet exponent (order-one systems only).
    Lambda,
    /// A multiplier slot of the field (e.g. the CRFBP `beta`).
    Scalar(usize),
}

/// Replacement for the `k = 0` row of piece `(1, j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryRow {
    /// `right(D, j) - left(1, j)`.
    Periodic,
    /// `endpoint(domain, component, side) - value`.
    Value { domain: usize, side: Side, component: usize, value: f64 },
    /// `v_w(0) |v_b(0) + offset| - 1` (planar reciprocal distance on the symmetry axis).
    InverseDistance { component: usize, base: usize, offset: f64 },
    /// `v_w(0)^2 sum_c (v_c(0) - p_c)^2 - 1`.
    InverseDistanceSquared { component: usize, coords: Vec<usize>, point: Vec<f64> },
}

/// Scalar conditions appended after the coefficient rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PhaseRow {
    /// `pdot . p0 - sum_j pdot_j left(1, j)`.
    Poincare { p0: Vec<f64>, pdot: Vec<f64> },
    /// `sum_j sum_{k <= k0} (a^{(1,j)}_k)^2 - K`.
    Normalization { k0: usize, k: f64 },
    /// CRTBP Jacobi constant at the right end of the first piece, minus `value`.
    Energy { mu: f64, value: f64 },
}

/// The right-hand side `h` whose Chebyshev coefficients enter the `k >= 1` rows.
#[derive(Clone, Debug)]
pub enum Rhs {
    /// `h = g(A)` for a polynomial field (order zero).
    Field(PolyField),
    /// `h = Dg(gamma) A - alpha lambda A + g_alpha` with frozen lower orders.
    Homological {
        alpha: usize,
        lambda: f64,
        /// Per domain, `d c / d a` of size `M(m+1) x Mm`.
        dg: Vec<DMatrix<f64>>,
        /// Per domain, `M(m+1)` forcing coefficients (empty means zero).
        forcing: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug)]
pub struct ResidualSystem {
    pub mesh: Mesh,
    pub dim: usize,
    pub m: usize,
    pub rhs: Rhs,
    /// One entry per component, used for the `k = 0` rows of the first piece.
    pub boundary: Vec<BoundaryRow>,
    pub phase: Vec<PhaseRow>,
    pub extras: Vec<Extra>,
}

/// Residual and structured Jacobian at one point.
pub struct Linearization {
    pub residual: Vec<f64>,
    /// Per domain, `Mm x Mm` derivative of the local rows; `k = 0` rows are left zero.
    pub local: Vec<DMatrix<f64>>,
    /// Per domain, `Mm x ne` derivative of the local rows with respect to the extras.
    pub local_extra: Vec<DMatrix<f64>>,
    /// Row indices (into the residual) of the boundary and phase rows.
    pub global_rows: Vec<usize>,
    /// Dense derivative of those rows, `(DM + ne) x n`.
    pub global: DMatrix<f64>,
}

/// Chebyshev coefficients `c_0..c_m` of `g` on one domain, component-major.
pub fn field_series(field: &PolyField, scalars: &[f64], domain: &[f64], m: usize) -> Vec<f64> {
    let dim = field.dim;
    let mut c = vec![0.0; dim * (m + 1)];
    for t in &field.terms {
        let w = field.term_weight(t, scalars);
        if w == 0.0 {
            continue;
        }
        let base = t.target * (m + 1);
        if t.vars.is_empty() {
            c[base] += w;
            continue;
        }
        let factors: Vec<&[f64]> = t.vars.iter().map(|&v| &domain[v * m..(v + 1) * m]).collect();
        let p = product_full(&factors);
        for (k, ck) in c[base..base + m + 1].iter_mut().enumerate() {
            if k < p.len() {
                *ck += w * p[k];
            }
        }
    }
    c
}

/// Adds `w * d(q * a)_k / d a_l` for `k = 0..=m`, `l < m` into `out` at the given offsets.
///
/// `d(q*a)_k / d a_0 = q_k`, `d(q*a)_k / d a_l = q_{|k-l|} + q_{k+l}`.
pub(crate) fn add_product_derivative(out: &mut DMatrix<f64>, row0: usize, col0: usize, q: &[f64], w: f64, m: usize) {
    let get = |i: usize| if i < q.len() { q[i] } else { 0.0 };
    for k in 0..=m {
        out[(row0 + k, col0)] += w * get(k);
        for l in 1..m {
            let v = get(k.abs_diff(l)) + get(k + l);
            if v != 0.0 {
                out[(row0 + k, col0 + l)] += w * v;
            }
        }
    }
}

/// `d c / d a` on one domain (`M(m+1) x Mm`) and `d c / d scalars`.
pub fn field_series_jacobian(
    field: &PolyField,
    scalars: &[f64],
    domain: &[f64],
    m: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = field.dim;
    let mut jac = DMatrix::zeros(dim * (m + 1), dim * m);
    let mut js = DMatrix::zeros(dim * (m + 1), scalars.len());
    for t in &field.terms {
        let w = field.term_weight(t, scalars);
        let factors: Vec<&[f64]> = t.vars.iter().map(|&v| &domain[v * m..(v + 1) * m]).collect();
        if let Some(s) = t.scalar {
            let p = if factors.is_empty() { vec![1.0] } else { product_full(&factors) };
            for k in 0..=m.min(p.len() - 1) {
                js[(t.target * (m + 1) + k, s)] += t.coeff * p[k];
            }
        }
        if w == 0.0 {
            continue;
        }
        for p in 0..factors.len() {
            // Repeated factors are handled by the product rule, one position at a time.
            if p > 0 && t.vars[p] == t.vars[p - 1] {
                continue;
            }
            let mult = t.vars.iter().filter(|&&v| v == t.vars[p]).count() as f64;
            let others: Vec<&[f64]> = factors.iter().enumerate().filter(|&(q, _)| q != p).map(|(_, f)| *f).collect();
            let q = if others.is_empty() { vec![1.0] } else { product_full(&others) };
            add_product_derivative(&mut jac, t.target * (m + 1), t.vars[p] * m, &q, w * mult, m);
        }
    }
    (jac, js)
}

impl ResidualSystem {
    pub fn n_coeffs(&self) -> usize {
        self.mesh.d() * self.dim * self.m
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_coeffs() + self.extras.len()
    }

    /// Checks the row/unknown ledger and the row definitions.
    pub fn validate(&self) -> Result<()> {
        if self.boundary.len() != self.dim {
            return Err(Error::Config(format!(
                "{} boundary rows for {} components",
                self.boundary.len(),
                self.dim
            )));
        }
        if self.phase.len() != self.extras.len() {
            return Err(Error::Config(format!(
                "system is not square: {} phase rows but {} extra unknowns",
                self.phase.len(),
                self.extras.len()
            )));
        }
        if self.m < 2 {
            return Err(Error::Config("need at least two coefficients per piece".into()));
        }
        for b in &self.boundary {
            let ok = match b {
                BoundaryRow::Periodic => true,
                BoundaryRow::Value { domain, component, .. } => *domain < self.mesh.d() && *component < self.dim,
                BoundaryRow::InverseDistance { component, base, .. } => *component < self.dim && *base < self.dim,
                BoundaryRow::InverseDistanceSquared { component, coords, point } => {
                    *component < self.dim && coords.len() == point.len() && coords.iter().all(|&c| c < self.dim)
                }
            };
            if !ok {
                return Err(Error::Config(format!("boundary row out of range: {b:?}")));
            }
        }
        for p in &self.phase {
            match p {
                PhaseRow::Poincare { p0, pdot } if p0.len() != self.dim || pdot.len() != self.dim => {
                    return Err(Error::Config("Poincare section has the wrong dimension".into()))
                }
                PhaseRow::Normalization { k0, k } if *k0 >= self.m || !(*k > 0.0) => {
                    return Err(Error::Config(format!("normalization needs k0 < m and K > 0 (k0 = {k0}, K = {k})")))
                }
                PhaseRow::Energy { .. } if self.dim != 6 => {
                    return Err(Error::Config("energy row needs the six-dimensional CRTBP lift".into()))
                }
                _ => {}
            }
        }
        if self.extras.iter().filter(|e| **e == Extra::HalfPeriod).count() > 1 {
            return Err(Error::Config("half-period listed twice".into()));
        }
        for e in &self.extras {
            match (e, &self.rhs) {
                (Extra::Lambda, Rhs::Homological { alpha: 1, .. }) => {}
                (Extra::Lambda, _) => return Err(Error::Config("lambda is an unknown only at order one".into())),
                (Extra::Scalar(s), Rhs::Field(f)) if *s < f.scalars.len() => {}
                (Extra::Scalar(_), _) => return Err(Error::Config("unknown field scalar".into())),
                (Extra::HalfPeriod, _) => {}
            }
        }
        if let Rhs::Homological { dg, forcing, .. } = &self.rhs {
            if dg.len() != self.mesh.d() || !(forcing.is_empty() || forcing.len() == self.mesh.d()) {
                return Err(Error::Config("homological data does not match the mesh".into()));
            }
        }
        Ok(())
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.n_unknowns() {
            return Err(Error::Contract(format!("expected {} unknowns, got {}", self.n_unknowns(), z.len())));
        }
        Ok(())
    }

    pub fn half_period(&self, z: &[f64]) -> f64 {
        match self.extras.iter().position(|e| *e == Extra::HalfPeriod) {
            Some(p) => z[self.n_coeffs() + p],
            None => self.mesh.l,
        }
    }

    pub fn lambda(&self, z: &[f64]) -> f64 {
        match self.extras.iter().position(|e| *e == Extra::Lambda) {
            Some(p) => z[self.n_coeffs() + p],
            None => match &self.rhs {
                Rhs::Homological { lambda, .. } => *lambda,
                Rhs::Field(_) => 0.0,
            },
        }
    }

    /// Field scalar slots with unknown ones taken from `z`.
    pub fn scalars(&self, z: &[f64]) -> Vec<f64> {
        let Rhs::Field(f) = &self.rhs else { return vec![] };
        let mut s = f.scalar_values();
        for (p, e) in self.extras.iter().enumerate() {
            if let Extra::Scalar(idx) = e {
                s[*idx] = z[self.n_coeffs() + p];
            }
        }
        s
    }

    fn domain<'a>(&self, z: &'a [f64], i: usize) -> &'a [f64] {
        let n = self.dim * self.m;
        &z[i * n..(i + 1) * n]
    }

    /// `c_0..c_m` of `h` on domain `i`, component-major.
    pub fn domain_series(&self, z: &[f64], i: usize) -> Vec<f64> {
        let m = self.m;
        let a = self.domain(z, i);
        match &self.rhs {
            Rhs::Field(f) => field_series(f, &self.scalars(z), a, m),
            Rhs::Homological { alpha, dg, forcing, .. } => {
                let lam = self.lambda(z);
                let mut c = (&dg[i] * DVector::from_column_slice(a)).data.as_vec().clone();
                for j in 0..self.dim {
                    for k in 0..m {
                        c[j * (m + 1) + k] -= *alpha as f64 * lam * a[j * m + k];
                    }
                }
                if !forcing.is_empty() {
                    for (ci, fi) in c.iter_mut().zip(&forcing[i]) {
                        *ci += fi;
                    }
                }
                c
            }
        }
    }

    fn left0(&self, z: &[f64], j: usize) -> f64 {
        endpoint_sum(&z[j * self.m..(j + 1) * self.m], Side::Left)
    }

    fn piece_end(&self, z: &[f64], i: usize, j: usize, side: Side) -> f64 {
        let s = (i * self.dim + j) * self.m;
        endpoint_sum(&z[s..s + self.m], side)
    }

    /// The full residual vector.
    pub fn assemble(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let (d, dim, m) = (self.mesh.d(), self.dim, self.m);
        let l = self.half_period(z);
        let mut r = vec![0.0; self.n_unknowns()];
        let blocks: Vec<Vec<f64>> = (0..d)
            .into_par_iter()
            .map(|i| {
                let c = self.domain_series(z, i);
                let a = self.domain(z, i);
                let li = self.mesh.p(i) * l;
                let mut out = vec![0.0; dim * m];
                for j in 0..dim {
                    for k in 1..m {
                        let cj = &c[j * (m + 1)..(j + 1) * (m + 1)];
                        out[j * m + k] = 2.0 * k as f64 * a[j * m + k] + li * (cj[k + 1] - cj[k - 1]);
                    }
                }
                out
            })
            .collect();
        for (i, b) in blocks.into_iter().enumerate() {
            r[i * dim * m..(i + 1) * dim * m].copy_from_slice(&b);
        }
        for i in 0..d {
            for j in 0..dim {
                r[(i * dim + j) * m] = self.boundary_value(z, i, j);
            }
        }
        let nc = self.n_coeffs();
        for (p, row) in self.phase.iter().enumerate() {
            r[nc + p] = self.phase_value(z, row);
        }
        Ok(r)
    }

    fn boundary_value(&self, z: &[f64], i: usize, j: usize) -> f64 {
        let d = self.mesh.d();
        if i > 0 {
            return self.piece_end(z, i - 1, j, Side::Right) - self.piece_end(z, i, j, Side::Left);
        }
        match &self.boundary[j] {
            BoundaryRow::Periodic => self.piece_end(z, d - 1, j, Side::Right) - self.left0(z, j),
            BoundaryRow::Value { domain, side, component, value } => self.piece_end(z, *domain, *component, *side) - value,
            BoundaryRow::InverseDistance { component, base, offset } => {
                self.left0(z, *component) * (self.left0(z, *base) + offset).abs() - 1.0
            }
            BoundaryRow::InverseDistanceSquared { component, coords, point } => {
                let s: f64 = coords.iter().zip(point).map(|(&c, p)| (self.left0(z, c) - p).powi(2)).sum();
                self.left0(z, *component).powi(2) * s - 1.0
            }
        }
    }

    fn phase_value(&self, z: &[f64], row: &PhaseRow) -> f64 {
        let m = self.m;
        match row {
            PhaseRow::Poincare { p0, pdot } => {
                let dot: f64 = p0.iter().zip(pdot).map(|(a, b)| a * b).sum();
                dot - (0..self.dim).map(|j| pdot[j] * self.left0(z, j)).sum::<f64>()
            }
            PhaseRow::Normalization { k0, k } => {
                let mut s = 0.0;
                for j in 0..self.dim {
                    for kk in 0..=*k0 {
                        s += z[j * m + kk].powi(2);
                    }
                }
                s - k
            }
            PhaseRow::Energy { mu, value } => {
                let v: Vec<f64> = (0..6).map(|j| self.piece_end(z, 0, j, Side::Right)).collect();
                crtbp_energy(*mu, &v) - value
            }
        }
    }

    /// Adds `w * d endpoint(i, j, side) / d a` to a dense row.
    fn add_endpoint(&self, row: &mut [f64], i: usize, j: usize, side: Side, w: f64) {
        let s = (i * self.dim + j) * self.m;
        for l in 0..self.m {
            row[s + l] += w * endpoint_weight(l, side);
        }
    }

    fn boundary_gradient(&self, z: &[f64], i: usize, j: usize, row: &mut [f64]) {
        let d = self.mesh.d();
        if i > 0 {
            self.add_endpoint(row, i - 1, j, Side::Right, 1.0);
            self.add_endpoint(row, i, j, Side::Left, -1.0);
            return;
        }
        match &self.boundary[j] {
            BoundaryRow::Periodic => {
                self.add_endpoint(row, d - 1, j, Side::Right, 1.0);
                self.add_endpoint(row, 0, j, Side::Left, -1.0);
            }
            BoundaryRow::Value { domain, side, component, .. } => self.add_endpoint(row, *domain, *component, *side, 1.0),
            BoundaryRow::InverseDistance { component, base, offset } => {
                let vb = self.left0(z, *base) + offset;
                let vw = self.left0(z, *component);
                self.add_endpoint(row, 0, *component, Side::Left, vb.abs());
                self.add_endpoint(row, 0, *base, Side::Left, vw * vb.signum());
            }
            BoundaryRow::InverseDistanceSquared { component, coords, point } => {
                let vw = self.left0(z, *component);
                let s: f64 = coords.iter().zip(point).map(|(&c, p)| (self.left0(z, c) - p).powi(2)).sum();
                self.add_endpoint(row, 0, *component, Side::Left, 2.0 * vw * s);
                for (&c, p) in coords.iter().zip(point) {
                    self.add_endpoint(row, 0, c, Side::Left, vw * vw * 2.0 * (self.left0(z, c) - p));
                }
            }
        }
    }

    fn phase_gradient(&self, z: &[f64], phase: &PhaseRow, row: &mut [f64]) {
        let m = self.m;
        match phase {
            PhaseRow::Poincare { pdot, .. } => {
                for (j, pd) in pdot.iter().enumerate() {
                    self.add_endpoint(row, 0, j, Side::Left, -pd);
                }
            }
            PhaseRow::Normalization { k0, .. } => {
                for j in 0..self.dim {
                    for kk in 0..=*k0 {
                        row[j * m + kk] += 2.0 * z[j * m + kk];
                    }
                }
            }
            PhaseRow::Energy { mu, .. } => {
                let v: Vec<f64> = (0..6).map(|j| self.piece_end(z, 0, j, Side::Right)).collect();
                let g = crtbp_energy_gradient(*mu, &v);
                for (j, gj) in g.iter().enumerate() {
                    self.add_endpoint(row, 0, j, Side::Right, *gj);
                }
            }
        }
    }

    /// Derivative of `c` on domain `i` with respect to the domain's coefficients and the extras.
    fn domain_series_jacobian(&self, z: &[f64], i: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (dim, m) = (self.dim, self.m);
        let ne = self.extras.len();
        let a = self.domain(z, i);
        let mut dce = DMatrix::zeros(dim * (m + 1), ne);
        match &self.rhs {
            Rhs::Field(f) => {
                let (dc, ds) = field_series_jacobian(f, &self.scalars(z), a, m);
                for (p, e) in self.extras.iter().enumerate() {
                    if let Extra::Scalar(s) = e {
                        dce.set_column(p, &ds.column(*s));
                    }
                }
                (dc, dce)
            }
            Rhs::Homological { alpha, dg, .. } => {
                let lam = self.lambda(z);
                let mut dc = dg[i].clone();
                for j in 0..dim {
                    for k in 0..m {
                        dc[(j * (m + 1) + k, j * m + k)] -= *alpha as f64 * lam;
                    }
                }
                for (p, e) in self.extras.iter().enumerate() {
                    if *e == Extra::Lambda {
                        for j in 0..dim {
                            for k in 0..m {
                                dce[(j * (m + 1) + k, p)] = -(*alpha as f64) * a[j * m + k];
                            }
                        }
                    }
                }
                (dc, dce)
            }
        }
    }

    /// Residual plus block-structured analytic Jacobian.
    pub fn linearize(&self, z: &[f64]) -> Result<Linearization> {
        self.check_len(z)?;
        let residual = self.assemble(z)?;
        let (d, dim, m) = (self.mesh.d(), self.dim, self.m);
        let ne = self.extras.len();
        let l = self.half_period(z);
        let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..d)
            .into_par_iter()
            .map(|i| {
                let (dc, dce) = self.domain_series_jacobian(z, i);
                let li = self.mesh.p(i) * l;
                let n = dim * m;
                let mut loc = DMatrix::zeros(n, n);
                let mut ext = DMatrix::zeros(n, ne);
                let c = if self.extras.contains(&Extra::HalfPeriod) { self.domain_series(z, i) } else { vec![] };
                for j in 0..dim {
                    for k in 1..m {
                        let r = j * m + k;
                        let (up, down) = (j * (m + 1) + k + 1, j * (m + 1) + k - 1);
                        for col in 0..n {
                            loc[(r, col)] = li * (dc[(up, col)] - dc[(down, col)]);
                        }
                        loc[(r, r)] += 2.0 * k as f64;
                        for (p, e) in self.extras.iter().enumerate() {
                            ext[(r, p)] = match e {
                                Extra::HalfPeriod => self.mesh.p(i) * (c[up] - c[down]),
                                _ => li * (dce[(up, p)] - dce[(down, p)]),
                            };
                        }
                    }
                }
                (loc, ext)
            })
            .collect();
        let (local, local_extra): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();

        let n = self.n_unknowns();
        let ng = d * dim + ne;
        let mut global = DMatrix::zeros(ng, n);
        let mut global_rows = Vec::with_capacity(ng);
        let mut row = vec![0.0; n];
        for i in 0..d {
            for j in 0..dim {
                row.iter_mut().for_each(|x| *x = 0.0);
                self.boundary_gradient(z, i, j, &mut row);
                global.set_row(global_rows.len(), &nalgebra::RowDVector::from_row_slice(&row));
                global_rows.push((i * dim + j) * m);
            }
        }
        let nc = self.n_coeffs();
        for (p, ph) in self.phase.iter().enumerate() {
            row.iter_mut().for_each(|x| *x = 0.0);
            self.phase_gradient(z, ph, &mut row);
            global.set_row(global_rows.len(), &nalgebra::RowDVector::from_row_slice(&row));
            global_rows.push(nc + p);
        }
        Ok(Linearization { residual, local, local_extra, global_rows, global })
    }

    /// Dense analytic Jacobian.
    pub fn jacobian(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.linearize(z)?.to_dense(self))
    }

    /// Central-difference Jacobian, column by column.
    pub fn jacobian_fd(&self, z: &[f64], rel_step: f64) -> Result<DMatrix<f64>> {
        self.check_len(z)?;
        let n = self.n_unknowns();
        let cols: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|c| {
                let h = rel_step * z[c].abs().max(1.0);
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[c] += h;
                zm[c] -= h;
                let rp = self.assemble(&zp).expect("length checked");
                let rm = self.assemble(&zm).expect("length checked");
                rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect();
        let mut j = DMatrix::zeros(n, n);
        for (c, col) in cols.iter().enumerate() {
            j.set_column(c, &DVector::from_column_slice(col));
        }
        Ok(j)
    }
}

impl Linearization {
    pub fn to_dense(&self, sys: &ResidualSystem) -> DMatrix<f64> {
        let n = sys.n_unknowns();
        let nb = sys.dim * sys.m;
        let nc = sys.n_coeffs();
        let mut j = DMatrix::zeros(n, n);
        for (i, (loc, ext)) in self.local.iter().zip(&self.local_extra).enumerate() {
            j.view_mut((i * nb, i * nb), (nb, nb)).copy_from(loc);
            j.view_mut((i * nb, nc), (nb, ext.ncols())).copy_from(ext);
        }
        for (g, &r) in self.global_rows.iter().enumerate() {
            j.set_row(r, &self.global.row(g));
        }
        j
    }
}

/// How the Newton step is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Per-domain elimination down to a dense system in the piece endpoints and extras.
    #[default]
    Condensed,
    /// Dense LU with partial pivoting on the whole system.
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub solver: LinearSolver,
    pub jacobian: JacobianMode,
    /// Condition estimates above this are reported as singular.
    pub max_condition: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-11,
            max_iter: 40,
            max_halvings: 6,
            solver: LinearSolver::Condensed,
            jacobian: JacobianMode::Analytic,
            max_condition: 1e15,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub condition: f64,
    pub converged: bool,
    pub history: Vec<f64>,
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Ratio of extreme pivots of an LU factorization.
fn pivot_ratio(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..u.nrows().min(u.ncols()) {
        let p = u[(i, i)].abs();
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if lo == 0.0 || !lo.is_finite() {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `J x = b` by dense LU, returning the solution and a condition estimate.
pub fn dense_solve(j: DMatrix<f64>, b: &[f64], max_condition: f64) -> Result<(Vec<f64>, f64)> {
    let lu = j.lu();
    let cond = pivot_ratio(&lu);
    if !(cond <= max_condition) {
        return Err(Error::Singular { cond });
    }
    let x = lu.solve(&DVector::from_column_slice(b)).ok_or(Error::Singular { cond })?;
    Ok((x.data.as_vec().clone(), cond))
}

/// Solves `J x = b` using the block structure.
///
/// Each domain's local rows plus its left-endpoint values form a square,
/// initial-value-like block; eliminating them leaves a dense system in the
/// endpoint values and extras, of size `D M + ne`.
pub fn condensed_solve(sys: &ResidualSystem, lin: &Linearization, b: &[f64], max_condition: f64) -> Result<(Vec<f64>, f64)> {
    let (d, dim, m) = (sys.mesh.d(), sys.dim, sys.m);
    let ne = sys.extras.len();
    let nb = dim * m;
    let nc = sys.n_coeffs();
    let nr = d * dim + ne;

    // Per domain: x_i = a_i + U_i u_i + W_i e.
    let solved: Vec<Result<(DMatrix<f64>, f64)>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let mut s = lin.local[i].clone();
            for j in 0..dim {
                for l in 0..m {
                    s[(j * m, j * m + l)] = endpoint_weight(l, Side::Left);
                }
            }
            let mut rhs = DMatrix::zeros(nb, 1 + dim + ne);
            for j in 0..dim {
                for k in 1..m {
                    rhs[(j * m + k, 0)] = b[i * nb + j * m + k];
                }
                rhs[(j * m, 1 + j)] = 1.0;
            }
            for p in 0..ne {
                for r in 0..nb {
                    if r % m != 0 {
                        rhs[(r, 1 + dim + p)] = -lin.local_extra[i][(r, p)];
                    }
                }
            }
            let lu = s.lu();
            let cond = pivot_ratio(&lu);
            if !(cond <= max_condition) {
                return Err(Error::Singular { cond });
            }
            let x = lu.solve(&rhs).ok_or(Error::Singular { cond })?;
            Ok((x, cond))
        })
        .collect();
    let mut blocks = Vec::with_capacity(d);
    let mut cond_local: f64 = 1.0;
    for s in solved {
        let (x, c) = s?;
        cond_local = cond_local.max(c);
        blocks.push(x);
    }

    // Reduced system in (u_1..u_D, e).
    let mut red = DMatrix::zeros(nr, nr);
    let mut rr = DVector::zeros(nr);
    for (g, &row) in lin.global_rows.iter().enumerate() {
        rr[g] = b[row];
    }
    for (i, x) in blocks.iter().enumerate() {
        let gi = lin.global.view((0, i * nb), (nr, nb));
        let prod = gi * x;
        for g in 0..nr {
            rr[g] -= prod[(g, 0)];
            for j in 0..dim {
                red[(g, i * dim + j)] += prod[(g, 1 + j)];
            }
            for p in 0..ne {
                red[(g, d * dim + p)] += prod[(g, 1 + dim + p)];
            }
        }
    }
    for p in 0..ne {
        for g in 0..nr {
            red[(g, d * dim + p)] += lin.global[(g, nc + p)];
        }
    }
    let lu = red.lu();
    let cond = pivot_ratio(&lu);
    if !(cond <= max_condition) {
        return Err(Error::Singular { cond });
    }
    let ue = lu.solve(&rr).ok_or(Error::Singular { cond })?;

    let mut out = vec![0.0; sys.n_unknowns()];
    for (i, x) in blocks.iter().enumerate() {
        for r in 0..nb {
            let mut v = x[(r, 0)];
            for j in 0..dim {
                v += x[(r, 1 + j)] * ue[i * dim + j];
            }
            for p in 0..ne {
                v += x[(r, 1 + dim + p)] * ue[d * dim + p];
            }
            out[i * nb + r] = v;
        }
    }
    for p in 0..ne {
        out[nc + p] = ue[d * dim + p];
    }
    Ok((out, cond.max(cond_local)))
}

/// Newton direction `-J^{-1} F` and a condition estimate.
fn newton_step(sys: &ResidualSystem, z: &[f64], opts: &NewtonOptions) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let (r, dx, cond) = match opts.jacobian {
        JacobianMode::FiniteDifference => {
            let r = sys.assemble(z)?;
            let j = sys.jacobian_fd(z, 1e-7)?;
            let neg: Vec<f64> = r.iter().map(|x| -x).collect();
            let (dx, c) = dense_solve(j, &neg, opts.max_condition)?;
            (r, dx, c)
        }
        JacobianMode::Analytic => {
            let lin = sys.linearize(z)?;
            let neg: Vec<f64> = lin.residual.iter().map(|x| -x).collect();
            let (dx, c) = match opts.solver {
                LinearSolver::Dense => dense_solve(lin.to_dense(sys), &neg, opts.max_condition)?,
                LinearSolver::Condensed => match condensed_solve(sys, &lin, &neg, opts.max_condition) {
                    Ok(v) => v,
                    Err(Error::Singular { cond }) => {
                        debug!("block elimination failed (cond {cond:.2e}), falling back to dense LU");
                        dense_solve(lin.to_dense(sys), &neg, opts.max_condition)?
                    }
                    Err(e) => return Err(e),
                },
            };
            (lin.residual, dx, c)
        }
    };
    Ok((r, dx, cond))
}

/// Newton's method with step halving on residual increase.
///
/// Returns the last iterate whether or not it converged; check `report.converged`.
pub fn newton_solve(sys: &ResidualSystem, z0: &[f64], opts: &NewtonOptions) -> Result<(Vec<f64>, NewtonReport)> {
    sys.validate()?;
    sys.check_len(z0)?;
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("initial guess is not finite".into()));
    }
    let mut z = z0.to_vec();
    let mut report = NewtonReport::default();
    let mut res = inf_norm(&sys.assemble(&z)?);
    report.history.push(res);
    let mut growth = 0;
    while res > opts.tol && report.iterations < opts.max_iter {
        let (_, dx, cond) = newton_step(sys, &z, opts)?;
        report.condition = cond;
        let mut t = 1.0;
        let mut trial: Vec<f64> = z.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let mut new_res = inf_norm(&sys.assemble(&trial)?);
        let mut halvings = 0;
        while !(new_res < res) && halvings < opts.max_halvings {
            t *= 0.5;
            halvings += 1;
            trial = z.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
            new_res = inf_norm(&sys.assemble(&trial)?);
        }
        report.iterations += 1;
        if !new_res.is_finite() {
            return Err(Error::Divergence { iterations: report.iterations, residual: new_res });
        }
        if new_res > res {
            growth += 1;
            if growth >= 3 {
                return Err(Error::Divergence { iterations: report.iterations, residual: new_res });
            }
        } else {
            growth = 0;
        }
        debug!("newton iteration {}: residual {new_res:.3e} (step {t})", report.iterations);
        let stalled = new_res >= res && inf_norm(&dx) * t <= 1e-15 * (1.0 + inf_norm(&z));
        z = trial;
        res = new_res;
        report.history.push(res);
        if stalled {
            break;
        }
    }
    report.residual = res;
    report.converged = res <= opts.tol;
    Ok((z, report))
}

/// One linear solve from zero for affine systems (orders two and up).
pub fn solve_affine(sys: &ResidualSystem, opts: &NewtonOptions) -> Result<(Vec<f64>, NewtonReport)> {
    sys.validate()?;
    let z0 = vec![0.0; sys.n_unknowns()];
    let (_, dx, cond) = newton_step(sys, &z0, opts)?;
    let res = inf_norm(&sys.assemble(&dx)?);
    let r0 = inf_norm(&sys.assemble(&z0)?);
    Ok((
        dx,
        NewtonReport { iterations: 1, residual: res, condition: cond, converged: res <= opts.tol, history: vec![r0, res] },
    ))
}

/// `2k a_k + L_i (c_{k+1} - c_{k-1})`.
pub fn residual_row(k: usize, a_k: f64, c: &[f64], li: f64) -> Result<f64> {
    if k == 0 || c.len() < k + 2 {
        return Err(Error::Contract(format!("residual row {k} needs k >= 1 and c through index {}", k + 1)));
    }
    Ok(2.0 * k as f64 * a_k + li * (c[k + 1] - c[k - 1]))
}

/// `right(piece i-1, j) - left(piece i, j)` for a flat coefficient layout.
pub fn chain_row(prev: &[f64], next: &[f64]) -> f64 {
    endpoint_sum(prev, Side::Right) - endpoint_sum(next, Side::Left)
}

/// `pdot . p0 - sum_j pdot_j gamma_j(0)` with `gamma(0)` given as left endpoints of the first piece.
pub fn poincare_row(p0: &[f64], pdot: &[f64], first_piece_left: &[f64]) -> f64 {
    p0.iter().zip(pdot).map(|(a, b)| a * b).sum::<f64>() - pdot.iter().zip(first_piece_left).map(|(a, b)| a * b).sum::<f64>()
}

/// `sum_j sum_{k <= k0} a_{j,k}^2 - K` over the pieces of the first domain.
pub fn normalization_row(first_domain: &[&[f64]], k: f64, k0: usize) -> Result<f64> {
    let mut s = 0.0;
    for p in first_domain {
        if k0 >= p.len() {
            return Err(Error::Contract(format!("k0 = {k0} must be below m = {}", p.len())));
        }
        s += p[..=k0].iter().map(|x| x * x).sum::<f64>();
    }
    Ok(s - k)
}
