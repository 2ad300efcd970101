//! Chebyshev series under the `a0 + 2 * sum(a_k T_k)` convention, products,
//! multi-domain meshes and piecewise periodic functions.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which end of `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// One scalar function on `[-1, 1]`, `f(t) = a0 + 2 * sum_{k>=1} a_k T_k(t)`.
///
/// The coefficients are stored raw; the factor 2 lives in the kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChebSeries {
    pub coeffs: Vec<f64>,
}

impl ChebSeries {
    pub fn new(coeffs: Vec<f64>) -> Self {
        ChebSeries { coeffs }
    }

    pub fn zeros(m: usize) -> Self {
        ChebSeries { coeffs: vec![0.0; m] }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Evaluates at `t`, rejecting arguments outside `[-1, 1]`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t.abs() <= 1.0) {
            return Err(Error::Domain(format!("Chebyshev argument {t} outside [-1, 1]")));
        }
        Ok(clenshaw(&self.coeffs, t))
    }

    pub fn endpoint(&self, side: Side) -> f64 {
        endpoint_sum(&self.coeffs, side)
    }

    /// Coefficients of `d/dt` on `[-1, 1]`, same convention, same length.
    pub fn derivative(&self) -> ChebSeries {
        ChebSeries { coeffs: derivative(&self.coeffs) }
    }

    /// Interpolates `f` at `m` Chebyshev-Gauss-Lobatto points.
    pub fn interpolate(f: impl Fn(f64) -> f64, m: usize) -> ChebSeries {
        let values: Vec<f64> = lobatto_points(m).into_iter().map(f).collect();
        ChebSeries { coeffs: lobatto_coefficients(&values) }
    }
}

/// Clenshaw evaluation of `a0 + 2 sum a_k T_k(t)`; no domain check.
pub fn clenshaw(a: &[f64], t: f64) -> f64 {
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    let (mut b1, mut b2) = (0.0, 0.0);
    let tt = 2.0 * t;
    for k in (1..n).rev() {
        let b0 = 2.0 * a[k] + tt * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    a[0] + t * b1 - b2
}

/// `a0 + 2 sum a_l` (right) or `a0 + 2 sum a_l (-1)^l` (left).
pub fn endpoint_sum(a: &[f64], side: Side) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    match side {
        Side::Right => {
            for &c in &a[1..] {
                s += c;
            }
        }
        Side::Left => {
            for (l, &c) in a.iter().enumerate().skip(1) {
                if l % 2 == 0 {
                    s += c;
                } else {
                    s -= c;
                }
            }
        }
    }
    a[0] + 2.0 * s
}

/// Weight of coefficient `l` in [`endpoint_sum`].
#[inline]
pub fn endpoint_weight(l: usize, side: Side) -> f64 {
    match (l, side) {
        (0, _) => 1.0,
        (_, Side::Right) => 2.0,
        (l, Side::Left) => {
            if l % 2 == 0 {
                2.0
            } else {
                -2.0
            }
        }
    }
}

/// Derivative coefficients (same convention) of a series on `[-1, 1]`.
pub fn derivative(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut d = vec![0.0; n];
    if n < 2 {
        return d;
    }
    // Work with the plain expansion sum c_k T_k, c_0 = a_0, c_k = 2 a_k.
    let c = |k: usize| if k == 0 { a[0] } else { 2.0 * a[k] };
    let mut dp = vec![0.0; n + 1];
    for k in (1..n).rev() {
        dp[k - 1] = dp[k + 1] + 2.0 * k as f64 * c(k);
    }
    d[0] = dp[0] / 2.0;
    for k in 1..n {
        d[k] = dp[k] / 2.0;
    }
    d
}

/// Chebyshev-Gauss-Lobatto points `cos(pi j / (m-1))`, from `+1` down to `-1`.
pub fn lobatto_points(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.0];
    }
    let n = (m - 1) as f64;
    (0..m).map(|j| (PI * j as f64 / n).cos()).collect()
}

/// Coefficients of the degree `m-1` interpolant through Lobatto samples.
pub fn lobatto_coefficients(values: &[f64]) -> Vec<f64> {
    let m = values.len();
    if m == 1 {
        return vec![values[0]];
    }
    let n = m - 1;
    let mut a = vec![0.0; m];
    for (k, ak) in a.iter_mut().enumerate() {
        let mut s = 0.0;
        for (j, &v) in values.iter().enumerate() {
            let w = if j == 0 || j == n { 0.5 } else { 1.0 };
            s += w * v * (PI * (j * k) as f64 / n as f64).cos();
        }
        // b_k = 2/n * s; a_k = b_k / 2 except the end terms.
        let b = 2.0 * s / n as f64;
        *ak = if k == n { b / 4.0 } else { b / 2.0 };
    }
    a
}

/// Which product kernel to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvKernel {
    Direct,
    Fft,
    #[default]
    Auto,
}

/// Chebyshev product: `(a*b)_k = sum_{k1+k2=k} a_{|k1|} b_{|k2|}` for `k < out_len`.
pub fn convolve(a: &[f64], b: &[f64], out_len: usize) -> Vec<f64> {
    convolve_with(a, b, out_len, ConvKernel::Auto)
}

pub fn convolve_with(a: &[f64], b: &[f64], out_len: usize, kernel: ConvKernel) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    convolve_into(a, b, &mut out, kernel);
    out
}

/// Writes the first `out.len()` product coefficients into `out`.
pub fn convolve_into(a: &[f64], b: &[f64], out: &mut [f64], kernel: ConvKernel) {
    if a.is_empty() || b.is_empty() {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let use_fft = match kernel {
        ConvKernel::Direct => false,
        ConvKernel::Fft => true,
        ConvKernel::Auto => a.len().min(b.len()) >= 96 && out.len() >= 96,
    };
    if use_fft {
        convolve_fft(a, b, out)
    } else {
        convolve_direct(a, b, out)
    }
}

/// Exact product of several series, untruncated (length `sum(len - 1) + 1`).
pub fn product_full(factors: &[&[f64]]) -> Vec<f64> {
    let Some((first, rest)) = factors.split_first() else {
        return vec![1.0];
    };
    let mut acc = first.to_vec();
    for f in rest {
        let n = acc.len() + f.len() - 1;
        acc = convolve(&acc, f, n);
    }
    acc
}

/// Cauchy product of convolutions: the order-`alpha` Taylor coefficient of
/// `prod_l P_l(t, sigma)` where `towers[l][beta]` are the Chebyshev coefficients
/// of factor `l` at Taylor order `beta`. Orders missing from a tower count as zero.
pub fn cauchy_conv(towers: &[&[Vec<f64>]], alpha: usize, out_len: usize) -> Result<Vec<f64>> {
    if towers.is_empty() {
        return Err(Error::Contract("Cauchy product needs at least one factor".into()));
    }
    let full = cauchy_full(towers, alpha);
    let mut out = vec![0.0; out_len];
    for (o, v) in out.iter_mut().zip(&full) {
        *o = *v;
    }
    Ok(out)
}

fn cauchy_full(towers: &[&[Vec<f64>]], alpha: usize) -> Vec<f64> {
    let (first, rest) = towers.split_first().expect("non-empty");
    if rest.is_empty() {
        return first.get(alpha).cloned().unwrap_or_default();
    }
    let mut acc: Vec<f64> = Vec::new();
    for gamma in 0..=alpha {
        let Some(a) = first.get(gamma) else { break };
        let tail = cauchy_full(rest, alpha - gamma);
        if a.is_empty() || tail.is_empty() {
            continue;
        }
        let p = convolve(a, &tail, a.len() + tail.len() - 1);
        if acc.len() < p.len() {
            acc.resize(p.len(), 0.0);
        }
        for (x, y) in acc.iter_mut().zip(&p) {
            *x += y;
        }
    }
    acc
}

fn convolve_direct(a: &[f64], b: &[f64], out: &mut [f64]) {
    // Keep the shorter sequence in the outer loop.
    let (a, b) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let q = b.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = if k < q { a[0] * b[k] } else { 0.0 };
        for (i, &ai) in a.iter().enumerate().skip(1) {
            let lo = k.abs_diff(i);
            let hi = k + i;
            let mut t = 0.0;
            if lo < q {
                t += b[lo];
            }
            if hi < q {
                t += b[hi];
            }
            s += ai * t;
        }
        *o = s;
    }
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<usize, (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        if let Some(v) = cache.get(&n) {
            return v.clone();
        }
        let v = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
        cache.insert(n, v.clone());
        v
    })
}

/// Two-sided sequences laid out circularly, zero-padded to a power of two
/// large enough that the circular product has no wrap-around.
fn convolve_fft(a: &[f64], b: &[f64], out: &mut [f64]) {
    let (p, q) = (a.len(), b.len());
    let n = (2 * (p + q) - 3).next_power_of_two().max(2);
    let (fwd, inv) = plans(n);
    let mut x = vec![Complex64::new(0.0, 0.0); n];
    let mut y = vec![Complex64::new(0.0, 0.0); n];
    for (k, &v) in a.iter().enumerate() {
        x[k].re = v;
        if k > 0 {
            x[n - k].re = v;
        }
    }
    for (k, &v) in b.iter().enumerate() {
        y[k].re = v;
        if k > 0 {
            y[n - k].re = v;
        }
    }
    fwd.process(&mut x);
    fwd.process(&mut y);
    for (u, v) in x.iter_mut().zip(&y) {
        *u *= v;
    }
    inv.process(&mut x);
    let scale = 1.0 / n as f64;
    let full = p + q - 1;
    for (k, o) in out.iter_mut().enumerate() {
        *o = if k < full { x[k].re * scale } else { 0.0 };
    }
}

/// Partition of one period into `D` subdomains.
///
/// Subdomain `i` covers physical time `[t_i, t_i + 2 p_i L)`, rescaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    proportions: Vec<f64>,
    /// Half-period.
    pub l: f64,
}

impl Mesh {
    pub fn new(proportions: Vec<f64>, l: f64) -> Result<Mesh> {
        if proportions.is_empty() {
            return Err(Error::Config("mesh needs at least one subdomain".into()));
        }
        if proportions.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Config(format!("mesh proportions must lie in (0, 1]: {proportions:?}")));
        }
        let s: f64 = proportions.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mesh proportions sum to {s}, not 1")));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("half-period must be positive, got {l}")));
        }
        Ok(Mesh { proportions, l })
    }

    pub fn uniform(d: usize, l: f64) -> Result<Mesh> {
        if d == 0 {
            return Err(Error::Config("mesh needs at least one subdomain".into()));
        }
        let p = 1.0 / d as f64;
        let mesh = Mesh { proportions: vec![p; d], l };
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("half-period must be positive, got {l}")));
        }
        Ok(mesh)
    }

    pub fn with_l(&self, l: f64) -> Mesh {
        Mesh { proportions: self.proportions.clone(), l }
    }

    pub fn d(&self) -> usize {
        self.proportions.len()
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn p(&self, i: usize) -> f64 {
        self.proportions[i]
    }

    /// `L_i = p_i L`.
    pub fn li(&self, i: usize) -> f64 {
        self.proportions[i] * self.l
    }

    pub fn period(&self) -> f64 {
        2.0 * self.l
    }

    /// Physical start time of subdomain `i`.
    pub fn start(&self, i: usize) -> f64 {
        2.0 * self.l * self.proportions[..i].iter().sum::<f64>()
    }

    /// Subdomain and local argument in `[-1, 1]` for a physical time (wrapped periodically).
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let tau = self.period();
        let mut t = t.rem_euclid(tau);
        if t >= tau {
            t = 0.0;
        }
        let mut start = 0.0;
        let d = self.d();
        for i in 0..d {
            let w = 2.0 * self.li(i);
            if t < start + w || i + 1 == d {
                let s = ((t - start) / self.li(i) - 1.0).clamp(-1.0, 1.0);
                return (i, s);
            }
            start += w;
        }
        unreachable!()
    }

    /// Physical time of local argument `s` in subdomain `i`.
    pub fn time_of(&self, i: usize, s: f64) -> f64 {
        self.start(i) + self.li(i) * (s + 1.0)
    }

    /// Same mesh with every subdomain split in two.
    pub fn refined(&self) -> Mesh {
        let props = self.proportions.iter().flat_map(|&p| [p / 2.0, p / 2.0]).collect();
        Mesh { proportions: props, l: self.l }
    }
}

/// A periodic `R^M`-valued function as a `D x M` grid of Chebyshev series.
///
/// Coefficients are stored domain-major, component-minor, `k` innermost,
/// which is also the unknown ordering used by the solvers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPiecewise {
    pub mesh: Mesh,
    pub dim: usize,
    pub m: usize,
    pub coeffs: Vec<f64>,
}

impl PeriodicPiecewise {
    pub fn zeros(mesh: Mesh, dim: usize, m: usize) -> Self {
        let n = mesh.d() * dim * m;
        PeriodicPiecewise { mesh, dim, m, coeffs: vec![0.0; n] }
    }

    pub fn from_coeffs(mesh: Mesh, dim: usize, m: usize, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.d() * dim * m {
            return Err(Error::Contract(format!(
                "expected {} coefficients, got {}",
                mesh.d() * dim * m,
                coeffs.len()
            )));
        }
        Ok(PeriodicPiecewise { mesh, dim, m, coeffs })
    }

    /// Samples `f` (physical time to state) at Lobatto points of every subdomain.
    pub fn interpolate(mesh: Mesh, dim: usize, m: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let mut out = PeriodicPiecewise::zeros(mesh.clone(), dim, m);
        let pts = lobatto_points(m);
        for i in 0..mesh.d() {
            let samples: Vec<Vec<f64>> = pts.iter().map(|&s| f(mesh.time_of(i, s))).collect();
            for j in 0..dim {
                let vals: Vec<f64> = samples.iter().map(|v| v[j]).collect();
                out.piece_mut(i, j).copy_from_slice(&lobatto_coefficients(&vals));
            }
        }
        out
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dim + j) * self.m + k
    }

    pub fn piece(&self, i: usize, j: usize) -> &[f64] {
        let s = self.index(i, j, 0);
        &self.coeffs[s..s + self.m]
    }

    pub fn piece_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let s = self.index(i, j, 0);
        let m = self.m;
        &mut self.coeffs[s..s + m]
    }

    /// All components of subdomain `i`, contiguous.
    pub fn domain(&self, i: usize) -> &[f64] {
        let n = self.dim * self.m;
        &self.coeffs[i * n..(i + 1) * n]
    }

    pub fn series(&self, i: usize, j: usize) -> ChebSeries {
        ChebSeries::new(self.piece(i, j).to_vec())
    }

    pub fn endpoint(&self, i: usize, j: usize, side: Side) -> f64 {
        endpoint_sum(self.piece(i, j), side)
    }

    /// Value at a physical time (wrapped into one period).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let (i, s) = self.mesh.locate(t);
        self.eval_local(i, s)
    }

    pub fn eval_local(&self, i: usize, s: f64) -> Vec<f64> {
        (0..self.dim).map(|j| clenshaw(self.piece(i, j), s)).collect()
    }

    /// Physical time derivative at `t`.
    pub fn eval_deriv(&self, t: f64) -> Vec<f64> {
        let (i, s) = self.mesh.locate(t);
        let li = self.mesh.li(i);
        (0..self.dim).map(|j| clenshaw(&derivative(self.piece(i, j)), s) / li).collect()
    }

    /// `sum_j sum_k |a^{(i,j)}_k|`.
    pub fn tail_norm(&self, i: usize) -> f64 {
        self.domain(i).iter().map(|x| x.abs()).sum()
    }

    /// `max_i` of [`tail_norm`](Self::tail_norm).
    pub fn max_tail_norm(&self) -> f64 {
        (0..self.mesh.d()).map(|i| self.tail_norm(i)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().for_each(|x| *x *= c);
        out
    }

    /// Re-expresses the function on another mesh with the same period.
    pub fn resample(&self, mesh: Mesh, m: usize) -> Self {
        let src = self.clone();
        PeriodicPiecewise::interpolate(mesh, self.dim, m, move |t| src.eval(t))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}
