//! Exact and smoothed discrete operators, their adaptive sharpness
//! parameters, the nonlinear constraint penalty and training schedules.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Default suppression constant for [`solve_u`].
pub const RHO: f64 = 30.0;
/// Default gradient requirement for the penalty's smoothed indicator.
pub const W_GRAD_REQ: f64 = 0.4;
/// Power differences below this are ties.
pub const TIE_EPS: f64 = 1e-12;

/// Root of `e^ζ + ζ − ζe^ζ + 1` on `(1, ∞)`, where `h` peaks.
pub fn zeta() -> f64 {
    static ZETA: OnceLock<f64> = OnceLock::new();
    *ZETA.get_or_init(|| {
        let f = |z: f64| z.exp() + z - z * z.exp() + 1.0;
        let (mut lo, mut hi) = (1.0f64, 3.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    })
}

/// `h(z) = 2z·e^{−z}/(1+e^{−z})²`; the indicator gradient is `h(v·g)/g`.
pub fn h(z: f64) -> f64 {
    let e = (-z).exp();
    2.0 * z * e / ((1.0 + e) * (1.0 + e))
}

/// Keeps `powers[idx]` only if it strictly dominates every other entry.
pub fn g_exact(powers: &[f64], idx: usize) -> f64 {
    let p = powers[idx];
    let dominated = powers.iter().enumerate().any(|(j, q)| j != idx && *q >= p);
    if dominated {
        0.0
    } else {
        p
    }
}

/// `powers[idx] / Σ_j exp(u_j·(powers[j] − powers[idx]))`.
pub fn g_smooth(powers: &[f64], idx: usize, u: &[f64]) -> f64 {
    let p = powers[idx];
    let denom: f64 = powers.iter().zip(u).map(|(q, uj)| (uj * (q - p)).exp()).sum();
    p / denom
}

/// [`g_smooth`] and its gradient with respect to every power (u held fixed).
pub fn g_smooth_grad(powers: &[f64], idx: usize, u: &[f64]) -> (f64, Vec<f64>) {
    let p = powers[idx];
    let terms: Vec<f64> = powers.iter().zip(u).map(|(q, uj)| (uj * (q - p)).exp()).collect();
    let denom: f64 = terms.iter().sum();
    if !denom.is_finite() {
        return (0.0, vec![0.0; powers.len()]);
    }
    let value = p / denom;
    let scale = p / (denom * denom);
    let mut grad: Vec<f64> = terms
        .iter()
        .zip(u)
        .map(|(t, uj)| -scale * uj * t)
        .collect();
    let self_term: f64 = terms
        .iter()
        .zip(u)
        .enumerate()
        .filter(|(j, _)| *j != idx)
        .map(|(_, (t, uj))| uj * t)
        .sum();
    grad[idx] = 1.0 / denom + scale * self_term;
    (value, grad)
}

/// Smoothed indicator `2/(1 + e^{−v·g}) − 1 = tanh(v·g/2)`.
pub fn indicator_smooth(g: f64, v: f64) -> f64 {
    (0.5 * v * g).tanh()
}

/// `∂ indicator_smooth / ∂g` at `(g, v)`.
pub fn indicator_grad(g: f64, v: f64) -> f64 {
    let i = indicator_smooth(g, v);
    0.5 * v * (1.0 - i * i)
}

/// Sharpness `v` whose indicator gradient at `g` matches `V`.
///
/// When `V` is attainable this is the larger of the two matching roots;
/// otherwise the gradient-maximizing `ζ/g`. At `g = 0` the gradient is `v/2`,
/// so `v = 2V`. Results that would overflow saturate at `f64::MAX`.
pub fn solve_v(g: f64, v_req: f64) -> f64 {
    let g = g.abs();
    if g == 0.0 {
        return 2.0 * v_req;
    }
    let z0 = zeta();
    let target = v_req * g;
    if h(z0) <= target {
        return (z0 / g).min(f64::MAX);
    }
    let (mut lo, mut hi) = (z0, 2.0 * z0);
    while h(hi) >= target {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if h(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    (0.5 * (lo + hi) / g).min(f64::MAX)
}

/// Whether `powers[j]` beats `powers[idx]`; ties go to the earlier index.
fn dominates(powers: &[f64], j: usize, idx: usize) -> bool {
    let d = powers[j] - powers[idx];
    d > TIE_EPS || (d.abs() <= TIE_EPS && j < idx)
}

/// Per-element sharpness for [`g_smooth`] at `idx`.
///
/// If `idx` holds the maximum, lower entries are suppressed with `ρ`. If
/// not, and the gradient requirement `V̄` is reachable, the dominating set
/// `G` gets the sharpness that makes `Σ_j e^{u_j (p_j − p_idx)} = 1/V̄`;
/// when `1/V̄ < 2M` lower entries are suppressed too so the sum still
/// matches. Unreachable requirements fall back to suppressing lower entries.
pub fn solve_u(powers: &[f64], idx: usize, vbar: f64, rho: f64) -> Vec<f64> {
    let n = powers.len();
    let p = powers[idx];
    let mut u = vec![0.0; n];
    let suppress = |u: &mut Vec<f64>| {
        for j in 0..n {
            let d = powers[j] - p;
            if j != idx && d < -TIE_EPS {
                u[j] = -rho / d;
            }
        }
    };
    let g: Vec<usize> = (0..n).filter(|&j| j != idx && dominates(powers, j, idx)).collect();
    if g.is_empty() {
        suppress(&mut u);
        return u;
    }
    let gs = g.len() as f64;
    if 1.0 / (1.0 + gs) >= vbar {
        let x = if 1.0 / vbar >= n as f64 {
            (1.0 / vbar - n as f64 + gs) / gs
        } else {
            suppress(&mut u);
            (1.0 / vbar - 1.0) / gs
        };
        for &j in &g {
            let d = powers[j] - p;
            if d > TIE_EPS {
                u[j] = x.ln() / d;
            }
        }
    } else {
        suppress(&mut u);
    }
    u
}

/// Nonlinear penalty: `κ·(2/(1+e^{−w·c}) − 1)` for `c > 0`, else `−min(λ/2, 1)`.
pub fn penalty_q(c: f64, lambda: f64, kappa: f64, w: f64) -> f64 {
    if c > 0.0 {
        kappa * indicator_smooth(c, w)
    } else {
        -(0.5 * lambda).min(1.0)
    }
}

/// Training-time schedules for `V`, `V̄` and `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub v_start: f64,
    pub v_peak: f64,
    pub v_end: f64,
    /// Share of the run spent ramping `V` up to its peak.
    pub warmup_fraction: f64,
    pub vbar_start: f64,
    pub vbar_end: f64,
    pub kappa_start: f64,
    pub kappa_end: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            v_start: 10.0,
            v_peak: 80.0,
            v_end: 20.0,
            warmup_fraction: 0.1,
            vbar_start: 1e-3,
            vbar_end: 1e-5,
            kappa_start: 0.5,
            kappa_end: 20.0,
        }
    }
}

/// Gradient requirements and constants in force at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingState {
    pub v_req: f64,
    pub vbar: f64,
    pub kappa: f64,
    pub rho: f64,
    pub zeta: f64,
    pub w_grad_req: f64,
}

impl Schedule {
    /// Iteration at which `V` peaks.
    pub fn warmup_end(&self, total: usize) -> usize {
        let last = total.saturating_sub(1);
        ((last as f64 * self.warmup_fraction).round() as usize).clamp(1.min(last), last)
    }

    /// `(V, V̄, κ)` at `iter` of a `total`-iteration run.
    pub fn at(&self, iter: usize, total: usize) -> (f64, f64, f64) {
        if total <= 1 {
            return (self.v_start, self.vbar_start, self.kappa_start);
        }
        let last = (total - 1) as f64;
        let iter = iter.min(total - 1);
        let t = iter as f64 / last;
        let w = self.warmup_end(total);
        let v = if iter <= w {
            self.v_start + (self.v_peak - self.v_start) * iter as f64 / w as f64
        } else {
            let span = (total - 1 - w) as f64;
            self.v_peak + (self.v_end - self.v_peak) * (iter - w) as f64 / span
        };
        let vbar = self.vbar_start + (self.vbar_end - self.vbar_start) * t;
        let kappa = self.kappa_start * (self.kappa_end / self.kappa_start).powf(t);
        (v, vbar, kappa)
    }

    pub fn state(&self, iter: usize, total: usize) -> SmoothingState {
        let (v_req, vbar, kappa) = self.at(iter, total);
        SmoothingState {
            v_req,
            vbar,
            kappa,
            rho: RHO,
            zeta: zeta(),
            w_grad_req: W_GRAD_REQ,
        }
    }
}
