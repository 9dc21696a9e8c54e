//! Rate models and QoS gaps.
//!
//! All logarithms are natural, so rates are in nats/s. The SBT rate used by
//! the optimizers replaces the channel dispersion `1 − (1+γp)^−2` by its upper
//! bound 1; the exact dispersion form is kept for reporting.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::sysmodel::{ChannelState, SystemConfig};
use crate::{Error, Result};

/// Gaussian tail probability `Q(x) = ½·erfc(x/√2)`.
pub fn q_func(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of [`q_func`] on `(0, 1)`.
///
/// Newton steps on the tail probability, safeguarded by a bisection bracket.
pub fn q_inv(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("q_inv needs eps in (0, 1), got {eps}")));
    }
    if eps == 0.5 {
        return Ok(0.0);
    }
    // Q(x) = eps has root |x| <= 40 for every representable eps.
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let mut x = 0.0f64;
    for _ in 0..200 {
        let fx = q_func(x) - eps;
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let density = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut next = x + fx / density;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || hi - lo <= 1e-14 {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// RB bandwidth `L·B` (Hz) and slot duration `τ` (s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkDims {
    pub lb: f64,
    pub tau: f64,
}

impl LinkDims {
    pub fn of(config: &SystemConfig) -> Self {
        Self {
            lb: config.lb(),
            tau: config.slot_s,
        }
    }
}

fn check_row(gamma: &[f64], power: &[f64]) -> Result<()> {
    if gamma.len() != power.len() {
        return Err(Error::Shape(format!(
            "{} gains but {} powers",
            gamma.len(),
            power.len()
        )));
    }
    if let Some(p) = power.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::Domain(format!("negative power {p}")));
    }
    Ok(())
}

fn log_sum(gamma: &[f64], power: &[f64]) -> f64 {
    gamma
        .iter()
        .zip(power)
        .filter(|(_, p)| **p > 0.0)
        .map(|(g, p)| (g * p).ln_1p())
        .sum()
}

/// SBT penalty `Q⁻¹(ε)·sqrt(NS·L·B/τ)` in nats/s.
pub fn sbt_penalty(ns: usize, eps: f64, dims: LinkDims) -> Result<f64> {
    Ok(q_inv(eps)? * (ns as f64 * dims.lb / dims.tau).sqrt())
}

/// Shannon LBT rate `L·B·Σ ln(1 + γ_f p_f)`.
pub fn lbt_rate(gamma: &[f64], power: &[f64], lb: f64) -> Result<f64> {
    check_row(gamma, power)?;
    Ok(lb * log_sum(gamma, power))
}

/// Dispersion-bounded SBT rate; zero when no RB carries SBT power.
pub fn sbt_rate_bounded(gamma: &[f64], power: &[f64], eps: f64, dims: LinkDims) -> Result<f64> {
    check_row(gamma, power)?;
    let ns = power.iter().filter(|p| **p > 0.0).count();
    if ns == 0 {
        return Ok(0.0);
    }
    Ok(dims.lb * log_sum(gamma, power) - sbt_penalty(ns, eps, dims)?)
}

/// SBT rate with the exact channel dispersion.
pub fn sbt_rate_exact(gamma: &[f64], power: &[f64], eps: f64, dims: LinkDims) -> Result<f64> {
    check_row(gamma, power)?;
    let dispersion: f64 = gamma
        .iter()
        .zip(power)
        .filter(|(_, p)| **p > 0.0)
        .map(|(g, p)| 1.0 - (1.0 + g * p).powi(-2))
        .sum();
    let spread = (dims.lb * dims.tau * dispersion).sqrt() / dims.tau;
    Ok(dims.lb * log_sum(gamma, power) - spread * q_inv(eps)?)
}

/// Per-user, per-RB powers for the two blocklength types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub p_l: Vec<Vec<f64>>,
    pub p_s: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn zeros(users: usize, rbs: usize) -> Self {
        Self {
            p_l: vec![vec![0.0; rbs]; users],
            p_s: vec![vec![0.0; rbs]; users],
        }
    }

    pub fn users(&self) -> usize {
        self.p_l.len()
    }

    pub fn rbs(&self) -> usize {
        self.p_l.first().map_or(0, Vec::len)
    }

    pub fn x_l(&self) -> Vec<Vec<bool>> {
        indicator(&self.p_l)
    }

    pub fn x_s(&self) -> Vec<Vec<bool>> {
        indicator(&self.p_s)
    }

    /// RBs carrying any positive power.
    pub fn occupied(&self) -> usize {
        (0..self.rbs())
            .filter(|&f| (0..self.users()).any(|m| self.p_l[m][f] > 0.0 || self.p_s[m][f] > 0.0))
            .count()
    }

    /// Checks non-negativity, RB exclusivity and the per-user power budget.
    pub fn validate(&self, pmax: f64) -> Result<()> {
        let rbs = self.rbs();
        if self.p_s.len() != self.users()
            || self.p_l.iter().chain(&self.p_s).any(|row| row.len() != rbs)
        {
            return Err(Error::Shape("ragged allocation".into()));
        }
        if self.p_l.iter().chain(&self.p_s).flatten().any(|p| !(*p >= 0.0)) {
            return Err(Error::Domain("allocation has a negative power".into()));
        }
        for f in 0..rbs {
            let active = (0..self.users())
                .map(|m| (self.p_l[m][f] > 0.0) as usize + (self.p_s[m][f] > 0.0) as usize)
                .sum::<usize>();
            if active > 1 {
                return Err(Error::Domain(format!("RB {f} serves {active} blocks")));
            }
        }
        for m in 0..self.users() {
            let total: f64 = self.p_l[m].iter().chain(&self.p_s[m]).sum();
            if total > pmax + 1e-9 {
                return Err(Error::Domain(format!(
                    "user {m} spends {total} W over budget {pmax} W"
                )));
            }
        }
        Ok(())
    }
}

fn indicator(p: &[Vec<f64>]) -> Vec<Vec<bool>> {
    p.iter().map(|row| row.iter().map(|x| *x > 0.0).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Feasible,
    Infeasible,
}

/// Solver output shared by the single-user, multiuser and exhaustive solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub allocation: Allocation,
    pub occupied: usize,
    pub status: SolveStatus,
}

impl AllocationResult {
    pub fn feasible(allocation: Allocation) -> Self {
        Self {
            occupied: allocation.occupied(),
            allocation,
            status: SolveStatus::Feasible,
        }
    }

    pub fn infeasible(allocation: Allocation) -> Self {
        Self {
            occupied: allocation.occupied(),
            allocation,
            status: SolveStatus::Infeasible,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Feasible
    }
}

/// Requirement minus achieved rate (nats/s); positive means violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosGap {
    pub c_l: Vec<f64>,
    pub c_s: Vec<f64>,
}

impl QosGap {
    pub fn satisfied(&self) -> bool {
        self.c_l.iter().chain(&self.c_s).all(|c| *c <= 0.0)
    }
}

/// QoS gaps under the dispersion-bounded SBT model.
pub fn qos_gaps(alloc: &Allocation, channel: &ChannelState, config: &SystemConfig) -> Result<QosGap> {
    channel.check_shape(config)?;
    if alloc.users() != config.users || alloc.rbs() != config.rbs || alloc.p_s.len() != config.users {
        return Err(Error::Shape("allocation does not match config".into()));
    }
    let dims = LinkDims::of(config);
    let mut c_l = Vec::with_capacity(config.users);
    let mut c_s = Vec::with_capacity(config.users);
    for m in 0..config.users {
        let gamma = &channel.gamma[m];
        c_l.push(config.rate_l[m] - lbt_rate(gamma, &alloc.p_l[m], dims.lb)?);
        c_s.push(config.rate_s[m] - sbt_rate_bounded(gamma, &alloc.p_s[m], config.eps[m], dims)?);
    }
    Ok(QosGap { c_l, c_s })
}
