//! The one-dimensional wall profile.
//!
//! `G(v) = 2 sqrt(pi) int_0^inf |v'|^2 + (1 - v^2)^2 dt` with `v(0) = 0` and
//! `v -> 1` has infimum [`K_STAR`](crate::energy::K_STAR), attained by
//! `tanh`. Profiles are stored as samples and treated as piecewise linear,
//! for which both terms are integrated exactly.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};

/// Three-point Gauss-Legendre rule on `[0, 1]`, exact up to degree five.
const GAUSS3: [(f64, f64); 3] =
    [(0.112_701_665_379_258_31, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.887_298_334_620_741_7, 5.0 / 18.0)];

/// Slopes may exceed 2 by this relative amount.
const SLOPE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WallProfile {
    /// Cutoff beyond which the profile equals one; `None` for an untruncated
    /// profile, whose energy is taken over the sampled interval only.
    pub r: Option<f64>,
    pub ts: Vec<f64>,
    pub vs: Vec<f64>,
}

impl WallProfile {
    pub fn new(r: Option<f64>, ts: Vec<f64>, vs: Vec<f64>) -> Result<Self> {
        let bad = |msg: String| Err(Error::domain(format!("invalid wall profile: {msg}")));
        if ts.len() != vs.len() || ts.len() < 2 {
            return bad(format!("need matching samples, got {} and {}", ts.len(), vs.len()));
        }
        if ts[0] != 0.0 || vs[0] != 0.0 {
            return bad("must start at v(0) = 0".into());
        }
        for i in 1..ts.len() {
            let (dt, dv) = (ts[i] - ts[i - 1], vs[i] - vs[i - 1]);
            if !(dt > 0.0) {
                return bad(format!("sample times not increasing at {i}"));
            }
            if !(0.0..=1.0).contains(&vs[i]) {
                return bad(format!("value {} at t={} outside [0, 1]", vs[i], ts[i]));
            }
            if dv < 0.0 {
                return bad(format!("decreasing at t={}", ts[i]));
            }
            if dv / dt > 2.0 * (1.0 + SLOPE_SLACK) {
                return bad(format!("slope {} at t={} exceeds 2", dv / dt, ts[i]));
            }
        }
        if let Some(r) = r {
            let last = *ts.last().expect("non-empty");
            if !(r > 0.0) || last < r * (1.0 - 1e-12) {
                return bad(format!("samples must cover [0, R] with R = {r}"));
            }
            if ts.iter().zip(&vs).any(|(&t, &v)| t >= r && v != 1.0) {
                return bad(format!("profile must equal 1 beyond R = {r}"));
            }
        }
        Ok(Self { r, ts, vs })
    }

    /// `tanh` sampled at `n` uniform points of `[0, span]`.
    pub fn tanh(span: f64, n: usize) -> Result<Self> {
        if !(span > 0.0) || n < 2 {
            return Err(Error::domain("tanh profile needs span > 0 and n >= 2"));
        }
        let ts: Vec<f64> = (0..n).map(|i| span * i as f64 / (n - 1) as f64).collect();
        let vs = ts.iter().map(|t| t.tanh()).collect();
        Self::new(None, ts, vs)
    }

    /// Piecewise linear interpolation, constant beyond the last sample.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let i = self.ts.partition_point(|&s| s <= t);
        if i >= self.ts.len() {
            return *self.vs.last().expect("non-empty");
        }
        let (t0, t1) = (self.ts[i - 1], self.ts[i]);
        let f = (t - t0) / (t1 - t0);
        self.vs[i - 1] + f * (self.vs[i] - self.vs[i - 1])
    }

    /// Slope of the interpolant (right derivative).
    pub fn slope(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let i = self.ts.partition_point(|&s| s <= t);
        if i >= self.ts.len() {
            return 0.0;
        }
        (self.vs[i] - self.vs[i - 1]) / (self.ts[i] - self.ts[i - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,v\n");
        for (t, v) in self.ts.iter().zip(&self.vs) {
            out.push_str(&format!("{t:.17e},{v:.17e}\n"));
        }
        out
    }

    /// `sum_i int w(t) (|v'|^2 + (1 - v^2)^2) dt` over the sample intervals
    /// for a weight `w` of degree at most one.
    fn integrate(&self, w: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for i in 1..self.ts.len() {
            let (t0, t1) = (self.ts[i - 1], self.ts[i]);
            let (v0, v1) = (self.vs[i - 1], self.vs[i]);
            let h = t1 - t0;
            let grad = (v1 - v0) * (v1 - v0) / h * w(0.5 * (t0 + t1));
            let pot: f64 = GAUSS3
                .iter()
                .map(|&(x, wq)| {
                    let v = v0 + x * (v1 - v0);
                    wq * (1.0 - v * v).powi(2) * w(t0 + x * h)
                })
                .sum();
            acc += grad + h * pot;
        }
        acc
    }
}

/// `G(v)` of the piecewise linear profile.
pub fn wall_energy(p: &WallProfile) -> f64 {
    2.0 * PI.sqrt() * p.integrate(|_| 1.0)
}

/// `int_0^inf t (|v'|^2 + (1 - v^2)^2) dt`.
pub fn wall_tail_moment(p: &WallProfile) -> f64 {
    p.integrate(|t| t)
}

#[derive(Debug, Clone)]
pub struct WallMinimum {
    pub profile: WallProfile,
    pub energy: f64,
    /// Energy after every accepted step, starting with the initial ramp.
    pub trace: Vec<f64>,
}

/// Minimizes the discretized `G` over `n` uniform samples of `[0, span]`
/// with `v(0) = 0` and `v(span) = 1`, starting from the ramp
/// `clamp(t, 0, 1)`.
///
/// Uses Newton steps with the Hessian made positive by dropping the
/// negative part of the potential's curvature, projection onto `[0, 1]`
/// and backtracking.
pub fn minimize_wall(n: usize, span: f64) -> Result<WallMinimum> {
    if n < 100 || !(span > 1.0) {
        return Err(Error::domain(format!("minimize_wall needs n >= 100 and span > 1, got n={n}, span={span}")));
    }
    let h = span / (n - 1) as f64;
    let ts: Vec<f64> = (0..n).map(|i| h * i as f64).collect();
    let mut v: Vec<f64> = ts.iter().map(|t| t.clamp(0.0, 1.0)).collect();
    v[n - 1] = 1.0;

    let energy = |v: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 1..v.len() {
            let (a, b) = (v[i - 1], v[i]);
            acc += (b - a) * (b - a) / h;
            acc += h * GAUSS3.iter().map(|&(x, w)| w * (1.0 - (a + x * (b - a)).powi(2)).powi(2)).sum::<f64>();
        }
        acc
    };
    let scale = 2.0 * PI.sqrt();
    let mut e = energy(&v);
    let mut trace = vec![scale * e];
    for _ in 0..200 {
        let mut g = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n];
        for i in 1..n {
            let (a, b) = (v[i - 1], v[i]);
            g[i - 1] -= 2.0 * (b - a) / h;
            g[i] += 2.0 * (b - a) / h;
            diag[i - 1] += 2.0 / h;
            diag[i] += 2.0 / h;
            off[i] -= 2.0 / h;
            for &(x, w) in &GAUSS3 {
                let u = a + x * (b - a);
                let d1 = -4.0 * u * (1.0 - u * u);
                let d2 = (12.0 * u * u - 4.0).max(0.0);
                g[i - 1] += h * w * d1 * (1.0 - x);
                g[i] += h * w * d1 * x;
                diag[i - 1] += h * w * d2 * (1.0 - x) * (1.0 - x);
                diag[i] += h * w * d2 * x * x;
                off[i] += h * w * d2 * x * (1.0 - x);
            }
        }
        // interior unknowns only
        let gmax = g[1..n - 1].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gmax <= 1e-12 {
            break;
        }
        let d = solve_tridiagonal(&diag[1..n - 1], &off[2..n - 1], &g[1..n - 1]);
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha > 1e-12 {
            let mut trial = v.clone();
            for i in 1..n - 1 {
                trial[i] = (v[i] - alpha * d[i - 1]).clamp(0.0, 1.0);
            }
            let et = energy(&trial);
            if et < e {
                v = trial;
                e = et;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(scale * e);
        if trace[trace.len() - 2] - scale * e <= 1e-15 * scale * e {
            break;
        }
    }
    let profile = WallProfile::new(Some(span), ts, v)?;
    Ok(WallMinimum { energy: wall_energy(&profile), profile, trace })
}

/// Solves the symmetric tridiagonal system with diagonal `a` and
/// off-diagonal `b` (`b[i]` couples `i` and `i + 1`).
fn solve_tridiagonal(a: &[f64], b: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = if n > 1 { b[0] / a[0] } else { 0.0 };
    d[0] = rhs[0] / a[0];
    for i in 1..n {
        let m = a[i] - b[i - 1] * c[i - 1];
        c[i] = if i + 1 < n { b[i] / m } else { 0.0 };
        d[i] = (rhs[i] - b[i - 1] * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    d
}

/// Points per unit length used to sample `v_R`.
const VR_DENSITY: f64 = 2000.0;

/// The truncated profile `v_R`: the shifted, rescaled `tanh` that is 0 on
/// `[0, 1/R]` and 1 beyond `R - 1/R`, convolved with a normalized smooth bump
/// of half-width `1/R`. Vanishes for `t <= 0` and equals 1 for `t >= R`.
pub fn make_vr(r: f64) -> Result<WallProfile> {
    if !(r >= 3.0 && r.is_finite()) {
        return Err(Error::domain(format!("v_R needs R >= 3, got {r}")));
    }
    let eps = 1.0 / r;
    let norm = (r - 2.0 * eps).tanh();
    let hat = |t: f64| {
        if t < eps {
            0.0
        } else if t > r - eps {
            1.0
        } else {
            (t - eps).tanh() / norm
        }
    };
    // bump exp(-1/(1-s^2)) on (-1, 1), tabulated once
    const M: usize = 400;
    let nodes: Vec<(f64, f64)> = (0..M)
        .map(|k| {
            let s = -1.0 + (k as f64 + 0.5) * 2.0 / M as f64;
            (s, (-1.0 / (1.0 - s * s)).exp())
        })
        .collect();
    let total: f64 = nodes.iter().map(|&(_, w)| w).sum();

    let n = (r * VR_DENSITY).ceil() as usize + 1;
    let ts: Vec<f64> = (0..n).map(|i| r * i as f64 / (n - 1) as f64).collect();
    let vs: Vec<f64> = ts
        .iter()
        .map(|&t| {
            if t <= 0.0 {
                return 0.0;
            }
            if t >= r {
                return 1.0;
            }
            let v: f64 = nodes.iter().map(|&(s, w)| w * hat(t - s * eps)).sum::<f64>() / total;
            v.clamp(0.0, 1.0)
        })
        .collect();
    WallProfile::new(Some(r), ts, vs)
}
