//! Adaptive Dormand-Prince 8(5,3) integration, the flow oracle used for seeding,
//! monodromy matrices, conjugacy checks and shooting.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dop853_tableau::{A, B, C, E3, E5, STAGES};
use crate::error::{Error, Result};
use crate::models::PolyField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { rtol: 1e-10, atol: 1e-12, max_steps: 2_000_000 }
    }
}

impl FlowOptions {
    pub fn tight() -> Self {
        FlowOptions { rtol: 1e-13, atol: 1e-14, max_steps: 5_000_000 }
    }
}

#[derive(Clone, Debug)]
pub struct FlowResult {
    pub t: f64,
    pub y: Vec<f64>,
    pub steps: usize,
    pub rejected: usize,
    /// Sum of local error estimates (max-norm, absolute units).
    pub err_estimate: f64,
}

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const ERR_EXP: f64 = -1.0 / 8.0;

/// Scratch space for one integration.
struct Work {
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl Work {
    fn new(n: usize) -> Self {
        Work { k: vec![vec![0.0; n]; STAGES + 1], tmp: vec![0.0; n], y_new: vec![0.0; n] }
    }
}

/// One trial step from `(t, y)` with `k[0] = f(t, y)` already filled.
/// Returns the scaled error norm and the max-abs error estimate; fills `y_new` and `k[STAGES]`.
fn trial_step<F: FnMut(f64, &[f64], &mut [f64])>(
    f: &mut F,
    t: f64,
    y: &[f64],
    h: f64,
    opts: &FlowOptions,
    w: &mut Work,
) -> (f64, f64) {
    let n = y.len();
    for s in 1..STAGES {
        for i in 0..n {
            let mut acc = 0.0;
            for (r, a) in A[s][..s].iter().enumerate() {
                acc += a * w.k[r][i];
            }
            w.tmp[i] = y[i] + h * acc;
        }
        let (head, tail) = w.k.split_at_mut(s);
        let _ = head;
        f(t + C[s] * h, &w.tmp, &mut tail[0]);
    }
    for i in 0..n {
        let mut acc = 0.0;
        for (s, b) in B.iter().enumerate() {
            acc += b * w.k[s][i];
        }
        w.y_new[i] = y[i] + h * acc;
    }
    {
        let (head, tail) = w.k.split_at_mut(STAGES);
        let _ = head;
        f(t + h, &w.y_new, &mut tail[0]);
    }
    let mut e5 = 0.0;
    let mut e3 = 0.0;
    let mut emax: f64 = 0.0;
    for i in 0..n {
        let scale = opts.atol + y[i].abs().max(w.y_new[i].abs()) * opts.rtol;
        let (mut a5, mut a3) = (0.0, 0.0);
        for s in 0..=STAGES {
            a5 += E5[s] * w.k[s][i];
            a3 += E3[s] * w.k[s][i];
        }
        emax = emax.max((h * a5).abs());
        e5 += (a5 / scale).powi(2);
        e3 += (a3 / scale).powi(2);
    }
    if e5 == 0.0 && e3 == 0.0 {
        return (0.0, 0.0);
    }
    let denom = e5 + 0.01 * e3;
    (h.abs() * e5 / (denom * n as f64).sqrt(), emax)
}

fn rms_scaled(v: &[f64], y: &[f64], opts: &FlowOptions) -> f64 {
    let n = v.len() as f64;
    (v.iter().zip(y).map(|(a, b)| (a / (opts.atol + b.abs() * opts.rtol)).powi(2)).sum::<f64>() / n).sqrt()
}

fn initial_step<F: FnMut(f64, &[f64], &mut [f64])>(
    f: &mut F,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    opts: &FlowOptions,
) -> f64 {
    let d0 = rms_scaled(y0, y0, opts);
    let d1 = rms_scaled(f0, y0, opts);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1: Vec<f64> = y0.iter().zip(f0).map(|(y, d)| y + dir * h0 * d).collect();
    let mut f1 = vec![0.0; y0.len()];
    f(t0 + dir * h0, &y1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms_scaled(&diff, y0, opts) / h0;
    let h1 = if d1 <= 1e-15 && d2 <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 8.0)
    };
    (100.0 * h0).min(h1)
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F: FnMut(f64, &[f64], &mut [f64])>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &FlowOptions,
) -> Result<FlowResult> {
    let mut stepper = Stepper::new(&mut f, t0, y0, t1, opts)?;
    while !stepper.done() {
        stepper.step(&mut f)?;
    }
    Ok(stepper.result())
}

/// Step-by-step driver; callers may inspect every accepted step.
pub struct Stepper {
    pub t: f64,
    pub y: Vec<f64>,
    pub t_prev: f64,
    pub y_prev: Vec<f64>,
    t_end: f64,
    dir: f64,
    h: f64,
    f0: Vec<f64>,
    opts: FlowOptions,
    work: Work,
    steps: usize,
    rejected: usize,
    err_sum: f64,
}

impl Stepper {
    pub fn new<F: FnMut(f64, &[f64], &mut [f64])>(
        f: &mut F,
        t0: f64,
        y0: &[f64],
        t_end: f64,
        opts: &FlowOptions,
    ) -> Result<Stepper> {
        if y0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { t: t0, msg: "non-finite initial state".into() });
        }
        let n = y0.len();
        let mut f0 = vec![0.0; n];
        f(t0, y0, &mut f0);
        let dir = if t_end >= t0 { 1.0 } else { -1.0 };
        let h = if t_end == t0 { 0.0 } else { initial_step(f, t0, y0, &f0, dir, opts) };
        Ok(Stepper {
            t: t0,
            y: y0.to_vec(),
            t_prev: t0,
            y_prev: y0.to_vec(),
            t_end,
            dir,
            h,
            f0,
            opts: *opts,
            work: Work::new(n),
            steps: 0,
            rejected: 0,
            err_sum: 0.0,
        })
    }

    pub fn done(&self) -> bool {
        self.t == self.t_end
    }

    pub fn result(&self) -> FlowResult {
        FlowResult {
            t: self.t,
            y: self.y.clone(),
            steps: self.steps,
            rejected: self.rejected,
            err_estimate: self.err_sum,
        }
    }

    /// Takes one accepted step toward `t_end`.
    pub fn step<F: FnMut(f64, &[f64], &mut [f64])>(&mut self, f: &mut F) -> Result<()> {
        let mut rejected_once = false;
        loop {
            if self.steps >= self.opts.max_steps {
                return Err(Error::Integration { t: self.t, msg: "step budget exhausted".into() });
            }
            let min_step = 10.0 * f64::EPSILON * self.t.abs().max(1e-300);
            let mut h = self.h.abs();
            if h < min_step {
                return Err(Error::Integration { t: self.t, msg: "step size collapsed".into() });
            }
            let remaining = (self.t_end - self.t).abs();
            let last = h >= remaining;
            if last {
                h = remaining;
            }
            let hs = self.dir * h;
            self.work.k[0].copy_from_slice(&self.f0);
            let (err, emax) = trial_step(f, self.t, &self.y, hs, &self.opts, &mut self.work);
            if !err.is_finite() || self.work.y_new.iter().any(|v| !v.is_finite()) {
                self.h = h * MIN_FACTOR;
                self.rejected += 1;
                rejected_once = true;
                continue;
            }
            if err < 1.0 {
                let mut factor = if err == 0.0 { MAX_FACTOR } else { MAX_FACTOR.min(SAFETY * err.powf(ERR_EXP)) };
                if rejected_once {
                    factor = factor.min(1.0);
                }
                self.t_prev = self.t;
                self.y_prev.copy_from_slice(&self.y);
                self.t = if last { self.t_end } else { self.t + hs };
                self.y.copy_from_slice(&self.work.y_new);
                self.f0.copy_from_slice(&self.work.k[STAGES]);
                // Keep the untruncated step size for the next step.
                self.h = self.h.abs().max(h) * factor;
                if last {
                    self.h = h * factor;
                }
                self.steps += 1;
                self.err_sum += emax;
                return Ok(());
            }
            self.h = h * MIN_FACTOR.max(SAFETY * err.powf(ERR_EXP));
            self.rejected += 1;
            rejected_once = true;
        }
    }
}

/// Integrates until `event(y)` changes sign in the requested direction
/// (`+1` upward, `-1` downward, `0` either), skipping the first `skip` hits.
/// Returns the crossing time and state, or `None` if `t_max` is reached first.
pub fn integrate_to_event<F, G>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t_max: f64,
    event: G,
    direction: i32,
    skip: usize,
    opts: &FlowOptions,
) -> Result<Option<(f64, Vec<f64>)>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    G: Fn(&[f64]) -> f64,
{
    let mut st = Stepper::new(&mut f, t0, y0, t_max, opts)?;
    let mut g_prev = event(y0);
    let mut hits = 0;
    while !st.done() {
        st.step(&mut f)?;
        let g = event(&st.y);
        let crossed = match direction {
            d if d > 0 => g_prev < 0.0 && g >= 0.0,
            d if d < 0 => g_prev > 0.0 && g <= 0.0,
            _ => (g_prev < 0.0 && g >= 0.0) || (g_prev > 0.0 && g <= 0.0),
        };
        if crossed {
            if hits == skip {
                let (ta, ya) = (st.t_prev, st.y_prev.clone());
                let (mut lo, mut hi) = (0.0, st.t - ta);
                let (mut glo, mut ghi) = (g_prev, g);
                let mut best = (st.t, st.y.clone());
                // Illinois-style regula falsi on the sub-step length.
                let mut side = 0;
                for _ in 0..60 {
                    let mut s = hi - ghi * (hi - lo) / (ghi - glo);
                    if !(s > lo.min(hi) && s < lo.max(hi)) {
                        s = 0.5 * (lo + hi);
                    }
                    let r = integrate(&mut f, ta, &ya, ta + s, opts)?;
                    let gs = event(&r.y);
                    best = (ta + s, r.y);
                    if gs.abs() < 1e-15 || (hi - lo).abs() < 1e-15 * (1.0 + ta.abs()) {
                        break;
                    }
                    if (gs < 0.0) == (glo < 0.0) {
                        lo = s;
                        glo = gs;
                        if side == -1 {
                            ghi *= 0.5;
                        }
                        side = -1;
                    } else {
                        hi = s;
                        ghi = gs;
                        if side == 1 {
                            glo *= 0.5;
                        }
                        side = 1;
                    }
                }
                return Ok(Some(best));
            }
            hits += 1;
        }
        g_prev = g;
    }
    Ok(None)
}

/// Flow of a polynomial field.
pub fn flow(field: &PolyField, x0: &[f64], t: f64, opts: &FlowOptions) -> Result<FlowResult> {
    let scal = field.scalar_values();
    integrate(|_, y, dy| field.eval_into(y, &scal, dy), 0.0, x0, t, opts)
}

/// States at the requested times (sorted in the direction of integration), starting at `t0`.
pub fn flow_samples(field: &PolyField, x0: &[f64], t0: f64, times: &[f64], opts: &FlowOptions) -> Result<Vec<Vec<f64>>> {
    let scal = field.scalar_values();
    let mut out = Vec::with_capacity(times.len());
    let (mut t, mut y) = (t0, x0.to_vec());
    for &ti in times {
        if ti != t {
            y = integrate(|_, y, dy| field.eval_into(y, &scal, dy), t, &y, ti, opts)?.y;
            t = ti;
        }
        out.push(y.clone());
    }
    Ok(out)
}

/// State and state-transition matrix after time `t`.
pub fn flow_with_stm(field: &PolyField, x0: &[f64], t: f64, opts: &FlowOptions) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = field.dim;
    let scal = field.scalar_values();
    let mut y0 = x0.to_vec();
    for c in 0..n {
        for r in 0..n {
            y0.push(if r == c { 1.0 } else { 0.0 });
        }
    }
    let res = integrate(
        |_, y, dy| {
            field.eval_into(&y[..n], &scal, &mut dy[..n]);
            let j = field.jacobian_with(&y[..n], &scal);
            // Column-major STM: dPhi = J Phi.
            for c in 0..n {
                for r in 0..n {
                    let mut s = 0.0;
                    for q in 0..n {
                        s += j[(r, q)] * y[n + c * n + q];
                    }
                    dy[n + c * n + r] = s;
                }
            }
        },
        0.0,
        &y0,
        t,
        opts,
    )?;
    let phi = DMatrix::from_column_slice(n, n, &res.y[n..]);
    Ok((res.y[..n].to_vec(), phi))
}
