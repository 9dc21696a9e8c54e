//! Primal-dual training of the allocation policy.
//!
//! The policy network maps (sorted) channel gains to per-RB powers for each
//! user and block type; two multiplier networks map the same input to
//! non-negative Lagrange multipliers. The loss is the smoothed RB count plus
//! multiplier-weighted penalties of the smoothed QoS gaps. The policy
//! descends, the multiplier networks ascend. Gaps are in nats/s.

use std::io::Write;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rballoc_core::ratecalc::{q_inv, qos_gaps};
use rballoc_core::smoothing::{
    g_exact, g_smooth_grad, indicator_grad, indicator_smooth, solve_u, solve_v, Schedule, SmoothingState,
};
use rballoc_core::sysmodel::sort_rbs;
use rballoc_core::{Allocation, ChannelState, SystemConfig};

use crate::neuralnet::{Activation, Direction, Network, Standardizer};
use crate::{LearnError, Result};

/// Total RB power below this counts as unoccupied.
pub const OCCUPIED_FLOOR: f64 = 1e-12;
/// Smoothed powers below this are treated as exactly zero by the smoothed
/// indicators (sharpness 0: no count, no gradient).
pub const INDICATOR_FLOOR: f64 = 1e-15;
/// Floor of the smoothed SBT count inside the derivative of its square root.
pub const NS_FLOOR: f64 = 1e-9;

/// Training variant: the proposed method or one of its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Proposed,
    /// Constant sharpness `v = 50`, `u = 200`.
    FixedParameter,
    /// Sharpness annealed linearly, `v` 50→400 and `u` 200→500.
    Annealing,
    /// Plain Lagrangian `λ·c` instead of the nonlinear penalty.
    DefaultConstr,
    /// Plain Lagrangian with RL inflated by 5% and ε tightened by 1e−8.
    IncrRequire,
    /// Constant multiplier `λ` on the hinge `max(c, 0)`; no multiplier networks.
    FixedMultiplier(f64),
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "proposed" => Self::Proposed,
            "fixed-parameter" => Self::FixedParameter,
            "annealing" => Self::Annealing,
            "default-constr" => Self::DefaultConstr,
            "incr-require" => Self::IncrRequire,
            other => match other.strip_prefix("fixed-multiplier:").map(str::parse::<f64>) {
                Some(Ok(l)) if l >= 0.0 => Self::FixedMultiplier(l),
                _ => {
                    return Err(format!(
                        "unknown mode `{other}` (proposed, fixed-parameter, annealing, default-constr, incr-require, fixed-multiplier:<lambda>)"
                    ))
                }
            },
        })
    }
}

/// How the sharpness parameters `u`, `v` are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sharpness {
    Adaptive,
    Fixed { v: f64, u: f64 },
}

/// Constraint term of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    /// `λ·q(c)`.
    Nonlinear,
    /// `λ·c`.
    Linear,
    /// `λ₀·max(c, 0)` with a constant `λ₀`.
    Hinge(f64),
}

impl Mode {
    pub fn penalty(self) -> Penalty {
        match self {
            Self::Proposed | Self::FixedParameter | Self::Annealing => Penalty::Nonlinear,
            Self::DefaultConstr | Self::IncrRequire => Penalty::Linear,
            Self::FixedMultiplier(l) => Penalty::Hinge(l),
        }
    }

    pub fn sharpness(self, iter: usize, total: usize) -> Sharpness {
        match self {
            Self::FixedParameter => Sharpness::Fixed { v: 50.0, u: 200.0 },
            Self::Annealing => {
                let t = if total > 1 { iter as f64 / (total - 1) as f64 } else { 0.0 };
                Sharpness::Fixed {
                    v: 50.0 + 350.0 * t,
                    u: 200.0 + 300.0 * t,
                }
            }
            _ => Sharpness::Adaptive,
        }
    }

    fn trains_multipliers(self) -> bool {
        !matches!(self, Self::FixedMultiplier(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub lr_policy: f64,
    /// End value of a linear policy learning-rate decay; `None` keeps it constant.
    pub lr_policy_final: Option<f64>,
    pub lr_multiplier: f64,
    pub schedule: Schedule,
    pub mode: Mode,
    pub seed: u64,
    /// Held-out evaluation cadence in iterations; 0 disables it.
    pub eval_every: usize,
    pub sort_inputs: bool,
    pub w_grad_req: f64,
    /// Output activation of the policy network.
    pub policy_head: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 400,
            iterations: 10_000,
            hidden: vec![128, 128, 128],
            lr_policy: 5e-3,
            lr_policy_final: None,
            lr_multiplier: 5e-5,
            schedule: Schedule::default(),
            mode: Mode::Proposed,
            seed: 0,
            eval_every: 1000,
            sort_inputs: true,
            w_grad_req: 0.4,
            policy_head: Activation::Softplus,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(LearnError::Config(format!("{field}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be positive");
        }
        if !(self.lr_policy > 0.0) || !(self.lr_multiplier > 0.0) {
            return bad("lr", "learning rates must be positive");
        }
        if self.lr_policy_final.is_some_and(|l| !(l > 0.0)) {
            return bad("lr_policy_final", "must be positive");
        }
        if !(self.w_grad_req > 0.0) {
            return bad("w_grad_req", "must be positive");
        }
        Ok(())
    }

    /// Policy learning rate at `iter`, decayed linearly to the final rate.
    /// The two plain-Lagrangian baselines default to a 10× decay.
    pub fn policy_lr(&self, iter: usize) -> f64 {
        let end = match (self.lr_policy_final, self.mode) {
            (Some(l), _) => l,
            (None, Mode::DefaultConstr | Mode::IncrRequire) => 0.1 * self.lr_policy,
            (None, _) => return self.lr_policy,
        };
        let t = if self.iterations > 1 {
            iter as f64 / (self.iterations - 1) as f64
        } else {
            0.0
        };
        self.lr_policy + (end - self.lr_policy) * t
    }
}

/// Per-user quantities the loss needs, after any mode adjustments.
#[derive(Debug, Clone, PartialEq)]
pub struct LossContext {
    pub users: usize,
    pub rbs: usize,
    pub lb: f64,
    pub tau: f64,
    pub pmax: f64,
    pub rate_l: Vec<f64>,
    pub rate_s: Vec<f64>,
    pub qinv: Vec<f64>,
    pub w_grad_req: f64,
}

impl LossContext {
    pub fn new(config: &SystemConfig, mode: Mode, w_grad_req: f64) -> Result<Self> {
        let incr = mode == Mode::IncrRequire;
        let rate_l = config
            .rate_l
            .iter()
            .map(|r| if incr { 1.05 * r } else { *r })
            .collect();
        let qinv = config
            .eps
            .iter()
            .map(|e| q_inv(if incr { e - 1e-8 } else { *e }))
            .collect::<rballoc_core::Result<Vec<_>>>()?;
        Ok(Self {
            users: config.users,
            rbs: config.rbs,
            lb: config.lb(),
            tau: config.slot_s,
            pmax: config.pmax_w,
            rate_l,
            rate_s: config.rate_s.clone(),
            qinv,
            w_grad_req,
        })
    }

    fn entries(&self) -> usize {
        2 * self.users
    }

    /// Length of one sample's power vector, laid out as `k·F + f` with
    /// entry `k = s·M + m` (`s` = 0 for LBT, 1 for SBT).
    pub fn power_len(&self) -> usize {
        self.entries() * self.rbs
    }
}

/// Sharpness parameters of one sample, held constant while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSmoothing {
    /// `u[(f·K + k)·K + j]` for RB `f`, target entry `k`, contender `j`.
    pub u: Vec<f64>,
    pub v_rb: Vec<f64>,
    /// `v_s[m·F + f]` for the SBT count indicator.
    pub v_s: Vec<f64>,
    pub w_l: Vec<f64>,
    pub w_s: Vec<f64>,
}

/// Smoothed per-entry powers `g̃[k·F + f]`.
fn smoothed_powers(powers: &[f64], u: &[f64], ctx: &LossContext) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (kn, f_n) = (ctx.entries(), ctx.rbs);
    let mut gt = vec![0.0; kn * f_n];
    let mut grads = Vec::with_capacity(kn * f_n);
    let mut column = vec![0.0; kn];
    for f in 0..f_n {
        for k in 0..kn {
            column[k] = powers[k * f_n + f];
        }
        for k in 0..kn {
            let uk = &u[(f * kn + k) * kn..(f * kn + k + 1) * kn];
            let (val, grad) = g_smooth_grad(&column, k, uk);
            gt[k * f_n + f] = val;
            grads.push(grad);
        }
    }
    (gt, grads)
}

struct Gaps {
    ns: Vec<f64>,
    cl: Vec<f64>,
    cs: Vec<f64>,
}

fn smoothed_gaps(gamma: &[Vec<f64>], gt: &[f64], v_s: &[f64], ctx: &LossContext) -> Gaps {
    let (m_n, f_n) = (ctx.users, ctx.rbs);
    let mut gaps = Gaps {
        ns: vec![0.0; m_n],
        cl: vec![0.0; m_n],
        cs: vec![0.0; m_n],
    };
    for m in 0..m_n {
        let (mut log_l, mut log_s, mut ns) = (0.0, 0.0, 0.0);
        for f in 0..f_n {
            let g = gamma[m][f];
            log_l += (g * gt[m * f_n + f]).ln_1p();
            let ps = gt[(m_n + m) * f_n + f];
            log_s += (g * ps).ln_1p();
            ns += indicator_smooth(ps, v_s[m * f_n + f]);
        }
        gaps.ns[m] = ns;
        gaps.cl[m] = ctx.rate_l[m] - ctx.lb * log_l;
        gaps.cs[m] = ctx.rate_s[m] - ctx.lb * log_s + ctx.qinv[m] * (ns * ctx.lb / ctx.tau).sqrt();
    }
    gaps
}

/// Solves every sharpness parameter of one sample from its current powers.
pub fn compute_smoothing_params(
    gamma: &[Vec<f64>],
    powers: &[f64],
    state: &SmoothingState,
    sharpness: Sharpness,
    ctx: &LossContext,
) -> SampleSmoothing {
    let (kn, f_n, m_n) = (ctx.entries(), ctx.rbs, ctx.users);
    let mut u = vec![0.0; f_n * kn * kn];
    match sharpness {
        Sharpness::Adaptive => {
            let mut column = vec![0.0; kn];
            for f in 0..f_n {
                for k in 0..kn {
                    column[k] = powers[k * f_n + f];
                }
                for k in 0..kn {
                    let uk = solve_u(&column, k, state.vbar, state.rho);
                    u[(f * kn + k) * kn..(f * kn + k + 1) * kn].copy_from_slice(&uk);
                }
            }
        }
        Sharpness::Fixed { u: u0, .. } => u.fill(u0),
    }
    let (gt, _) = smoothed_powers(powers, &u, ctx);
    let sharp = |g: f64| match sharpness {
        _ if g < INDICATOR_FLOOR => 0.0,
        Sharpness::Adaptive => solve_v(g, state.v_req),
        Sharpness::Fixed { v, .. } => v,
    };
    let v_rb: Vec<f64> = (0..f_n)
        .map(|f| sharp((0..kn).map(|k| gt[k * f_n + f]).sum()))
        .collect();
    let v_s: Vec<f64> = (0..m_n * f_n)
        .map(|i| sharp(gt[(m_n + i / f_n) * f_n + i % f_n]))
        .collect();
    let gaps = smoothed_gaps(gamma, &gt, &v_s, ctx);
    let w = |c: f64| if c > 0.0 { solve_v(c, ctx.w_grad_req) } else { 0.0 };
    SampleSmoothing {
        u,
        v_rb,
        v_s,
        w_l: gaps.cl.iter().map(|c| w(*c)).collect(),
        w_s: gaps.cs.iter().map(|c| w(*c)).collect(),
    }
}

/// Value, `∂/∂c` and `∂/∂λ` of the constraint term `λ·φ(c)`.
fn constraint_term(c: f64, lambda: f64, w: f64, kappa: f64, penalty: Penalty) -> (f64, f64, f64) {
    match penalty {
        Penalty::Nonlinear => {
            if c > 0.0 {
                let q = kappa * indicator_smooth(c, w);
                (lambda * q, lambda * kappa * indicator_grad(c, w), q)
            } else if lambda < 2.0 {
                (-0.5 * lambda * lambda, 0.0, -lambda)
            } else {
                (-lambda, 0.0, -1.0)
            }
        }
        Penalty::Linear => (lambda * c, lambda, c),
        Penalty::Hinge(l0) => {
            if c > 0.0 {
                (l0 * c, l0, 0.0)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
    }
}

/// One sample's loss with frozen sharpness, plus gradients with respect to
/// its powers and its multipliers `[λL_0.., λS_0..]`.
pub fn loss_with_params(
    gamma: &[Vec<f64>],
    powers: &[f64],
    lambdas: &[f64],
    params: &SampleSmoothing,
    kappa: f64,
    penalty: Penalty,
    ctx: &LossContext,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (kn, f_n, m_n) = (ctx.entries(), ctx.rbs, ctx.users);
    let (gt, gt_grads) = smoothed_powers(powers, &params.u, ctx);
    let gaps = smoothed_gaps(gamma, &gt, &params.v_s, ctx);

    let mut loss = 0.0;
    let mut d_gt = vec![0.0; kn * f_n];
    for f in 0..f_n {
        let total: f64 = (0..kn).map(|k| gt[k * f_n + f]).sum();
        loss += indicator_smooth(total, params.v_rb[f]);
        let d = indicator_grad(total, params.v_rb[f]);
        for k in 0..kn {
            d_gt[k * f_n + f] = d;
        }
    }
    let mut d_lambda = vec![0.0; kn];
    let root = (ctx.lb / ctx.tau).sqrt();
    for m in 0..m_n {
        let (vl, al, dl) = constraint_term(gaps.cl[m], lambdas[m], params.w_l[m], kappa, penalty);
        let (vs, as_, ds) = constraint_term(gaps.cs[m], lambdas[m_n + m], params.w_s[m], kappa, penalty);
        loss += vl + vs;
        d_lambda[m] = dl;
        d_lambda[m_n + m] = ds;
        let ns_factor = ctx.qinv[m] * root / (2.0 * gaps.ns[m].max(NS_FLOOR).sqrt());
        for f in 0..f_n {
            let g = gamma[m][f];
            let il = m * f_n + f;
            d_gt[il] -= al * ctx.lb * g / (1.0 + g * gt[il]);
            let is = (m_n + m) * f_n + f;
            let ps = gt[is];
            d_gt[is] += as_ * (-ctx.lb * g / (1.0 + g * ps) + ns_factor * indicator_grad(ps, params.v_s[m * f_n + f]));
        }
    }
    let mut d_p = vec![0.0; kn * f_n];
    for f in 0..f_n {
        for k in 0..kn {
            let up = d_gt[k * f_n + f];
            if up == 0.0 {
                continue;
            }
            for (j, gj) in gt_grads[f * kn + k].iter().enumerate() {
                d_p[j * f_n + f] += up * gj;
            }
        }
    }
    (loss, d_p, d_lambda)
}

/// Batch loss and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_powers: Array2<f64>,
    pub d_lambdas: Array2<f64>,
}

/// Mean loss over a batch. `gammas[b]` is sample `b`'s gain matrix in the
/// same RB order as its row of `powers`; `lambdas` rows are `[λL.., λS..]`.
pub fn build_loss(
    gammas: &[&[Vec<f64>]],
    powers: &Array2<f64>,
    lambdas: &Array2<f64>,
    state: &SmoothingState,
    sharpness: Sharpness,
    penalty: Penalty,
    ctx: &LossContext,
) -> Result<LossOutput> {
    let b = gammas.len();
    if powers.dim() != (b, ctx.power_len()) || lambdas.dim() != (b, ctx.entries()) {
        return Err(LearnError::Shape(format!(
            "batch of {b}: powers {:?}, multipliers {:?}",
            powers.dim(),
            lambdas.dim()
        )));
    }
    let mut out = LossOutput {
        loss: 0.0,
        d_powers: Array2::zeros(powers.dim()),
        d_lambdas: Array2::zeros(lambdas.dim()),
    };
    let scale = 1.0 / b as f64;
    for i in 0..b {
        let p = powers.row(i).to_vec();
        let l = lambdas.row(i).to_vec();
        let params = compute_smoothing_params(gammas[i], &p, state, sharpness, ctx);
        let (loss, dp, dl) = loss_with_params(gammas[i], &p, &l, &params, state.kappa, penalty, ctx);
        out.loss += scale * loss;
        for (dst, src) in out.d_powers.row_mut(i).iter_mut().zip(&dp) {
            *dst = scale * src;
        }
        for (dst, src) in out.d_lambdas.row_mut(i).iter_mut().zip(&dl) {
            *dst = scale * src;
        }
    }
    if !out.loss.is_finite() || out.d_powers.iter().chain(&out.d_lambdas).any(|x| !x.is_finite()) {
        return Err(LearnError::NonFinite(format!("loss {}", out.loss)));
    }
    Ok(out)
}

/// Lowest pre-activation the multiplier heads act on (λ ≈ 3.4e-4).
pub const MULTIPLIER_PRE_FLOOR: f64 = -8.0;

/// Softplus multipliers with the head input clamped at
/// [`MULTIPLIER_PRE_FLOOR`].
pub fn floored_multipliers(pre: &Array2<f64>) -> Array2<f64> {
    pre.mapv(|z| Activation::Softplus.apply(z.max(MULTIPLIER_PRE_FLOOR)))
}

/// Ascent gradient at the multiplier head inputs. Below the floor the head
/// behaves as if it sat on the floor and only increases of λ get through.
pub fn floored_head_grad(pre: &Array2<f64>, d_lambda: &Array2<f64>) -> Array2<f64> {
    let mut dz = d_lambda.clone();
    dz.zip_mut_with(pre, |d, &z| {
        *d = if z >= MULTIPLIER_PRE_FLOOR {
            *d * Activation::Softplus.derivative(z)
        } else {
            d.max(0.0) * Activation::Softplus.derivative(MULTIPLIER_PRE_FLOOR)
        }
    });
    dz
}

/// Guard on each user's raw sum.
const SUM_FLOOR: f64 = 1e-12;

/// Scales each user's raw outputs to sum to `Pmax` (the sum is floored at
/// 1e-12, so near-zero outputs stay within budget).
pub fn normalize_powers(raw: &Array2<f64>, users: usize, rbs: usize, pmax: f64) -> Array2<f64> {
    let mut p = raw.clone();
    for mut row in p.rows_mut() {
        for m in 0..users {
            let idx = |s: usize, f: usize| (s * users + m) * rbs + f;
            let sum: f64 = (0..2).flat_map(|s| (0..rbs).map(move |f| (s, f))).map(|(s, f)| row[idx(s, f)]).sum();
            let scale = pmax / sum.max(SUM_FLOOR);
            for s in 0..2 {
                for f in 0..rbs {
                    row[idx(s, f)] *= scale;
                }
            }
        }
    }
    p
}

/// Pulls `∂L/∂p` back through [`normalize_powers`].
pub fn normalize_backward(raw: &Array2<f64>, d_p: &Array2<f64>, users: usize, rbs: usize, pmax: f64) -> Array2<f64> {
    let mut d_raw = Array2::zeros(raw.dim());
    for i in 0..raw.nrows() {
        for m in 0..users {
            let idx: Vec<usize> = (0..2).flat_map(|s| (0..rbs).map(move |f| (s * users + m) * rbs + f)).collect();
            let sum: f64 = idx.iter().map(|&j| raw[[i, j]]).sum();
            let scale = pmax / sum.max(SUM_FLOOR);
            let dot = if sum > SUM_FLOOR {
                idx.iter().map(|&j| d_p[[i, j]] * raw[[i, j]]).sum::<f64>() / sum
            } else {
                0.0
            };
            for &j in &idx {
                d_raw[[i, j]] = scale * (d_p[[i, j]] - dot);
            }
        }
    }
    d_raw
}

/// Trained networks plus what is needed to run them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub system: SystemConfig,
    pub train: TrainConfig,
    pub policy: Network,
    pub multiplier_l: Network,
    pub multiplier_s: Network,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// RB order seen by the networks for one channel.
pub fn input_order(channel: &ChannelState, sort_inputs: bool) -> Vec<usize> {
    if sort_inputs {
        sort_rbs(channel)
    } else {
        (0..channel.rbs()).collect()
    }
}

fn features(channels: &[ChannelState], orders: &[Vec<usize>]) -> Array2<f64> {
    let (m_n, f_n) = (channels[0].users(), channels[0].rbs());
    let mut x = Array2::zeros((channels.len(), m_n * f_n));
    for (i, (ch, order)) in channels.iter().zip(orders).enumerate() {
        for m in 0..m_n {
            for (k, &f) in order.iter().enumerate() {
                x[[i, m * f_n + k]] = ch.gamma[m][f];
            }
        }
    }
    x
}

/// Exact allocations from the policy: piecewise maximum per RB, then
/// mapped back to the original RB order.
pub fn infer_batch(
    policy: &Network,
    channels: &[ChannelState],
    config: &SystemConfig,
    sort_inputs: bool,
) -> Result<Vec<Allocation>> {
    if channels.is_empty() {
        return Ok(Vec::new());
    }
    let (m_n, f_n) = (config.users, config.rbs);
    let kn = 2 * m_n;
    for ch in channels {
        ch.check_shape(config)?;
    }
    let orders: Vec<Vec<usize>> = channels.iter().map(|c| input_order(c, sort_inputs)).collect();
    let raw = policy.predict(&features(channels, &orders))?;
    if raw.ncols() != kn * f_n {
        return Err(LearnError::Shape("policy output does not match config".into()));
    }
    let p = normalize_powers(&raw, m_n, f_n, config.pmax_w);
    let mut out = Vec::with_capacity(channels.len());
    let mut column = vec![0.0; kn];
    for (i, order) in orders.iter().enumerate() {
        let mut alloc = Allocation::zeros(m_n, f_n);
        for (pos, &f) in order.iter().enumerate() {
            for k in 0..kn {
                column[k] = p[[i, k * f_n + pos]];
            }
            for k in 0..kn {
                let kept = g_exact(&column, k);
                if kept > 0.0 {
                    let (s, m) = (k / m_n, k % m_n);
                    if s == 0 {
                        alloc.p_l[m][f] = kept;
                    } else {
                        alloc.p_s[m][f] = kept;
                    }
                }
            }
        }
        out.push(alloc);
    }
    Ok(out)
}

pub fn infer(policy: &Network, channel: &ChannelState, config: &SystemConfig, sort_inputs: bool) -> Result<Allocation> {
    Ok(infer_batch(policy, std::slice::from_ref(channel), config, sort_inputs)?.remove(0))
}

pub fn occupied_rbs(alloc: &Allocation) -> usize {
    (0..alloc.rbs())
        .filter(|&f| (0..alloc.users()).map(|m| alloc.p_l[m][f] + alloc.p_s[m][f]).sum::<f64>() > OCCUPIED_FLOOR)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub avg_occupied_rbs: f64,
    pub violation_fraction_l: f64,
    pub violation_fraction_s: f64,
    /// Share of (sample, user) pairs violating either requirement.
    pub violation_fraction_any: f64,
    /// Gap quantiles at 0, 0.1, …, 1 (nats/s).
    pub gap_quantiles_l: Vec<f64>,
    pub gap_quantiles_s: Vec<f64>,
}

fn quantiles(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    if values.is_empty() {
        return Vec::new();
    }
    (0..=10)
        .map(|i| values[((values.len() - 1) as f64 * i as f64 / 10.0).round() as usize])
        .collect()
}

/// Metrics of given allocations under exact gating and bounded SBT rates.
pub fn metrics_of(allocs: &[Allocation], channels: &[ChannelState], config: &SystemConfig) -> Result<Metrics> {
    if allocs.is_empty() || allocs.len() != channels.len() {
        return Err(LearnError::Shape("need one allocation per test sample".into()));
    }
    let (mut gl, mut gs) = (Vec::new(), Vec::new());
    let (mut vl, mut vs, mut va, mut occ) = (0usize, 0usize, 0usize, 0usize);
    for (a, ch) in allocs.iter().zip(channels) {
        let gaps = qos_gaps(a, ch, config)?;
        for m in 0..config.users {
            let (l, s) = (gaps.c_l[m] > 0.0, gaps.c_s[m] > 0.0);
            vl += usize::from(l);
            vs += usize::from(s);
            va += usize::from(l || s);
        }
        gl.extend(gaps.c_l);
        gs.extend(gaps.c_s);
        occ += occupied_rbs(a);
    }
    let pairs = (allocs.len() * config.users) as f64;
    Ok(Metrics {
        avg_occupied_rbs: occ as f64 / allocs.len() as f64,
        violation_fraction_l: vl as f64 / pairs,
        violation_fraction_s: vs as f64 / pairs,
        violation_fraction_any: va as f64 / pairs,
        gap_quantiles_l: quantiles(gl),
        gap_quantiles_s: quantiles(gs),
    })
}

pub fn evaluate(policy: &Network, test: &[ChannelState], config: &SystemConfig, sort_inputs: bool) -> Result<Metrics> {
    let allocs = infer_batch(policy, test, config, sort_inputs)?;
    metrics_of(&allocs, test, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: f64,
    pub avg_rbs: f64,
    #[serde(rename = "viol_L")]
    pub viol_l: f64,
    #[serde(rename = "viol_S")]
    pub viol_s: f64,
    #[serde(rename = "V")]
    pub v: f64,
    #[serde(rename = "Vbar")]
    pub vbar: f64,
    pub kappa: f64,
}

pub fn write_log(rows: &[LogRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Exact occupied-RB average of each training batch.
    pub batch_rbs: Vec<f64>,
}

fn build_nets(input: usize, config: &SystemConfig, train: &TrainConfig) -> Result<(Network, Network, Network)> {
    let out_p = 2 * config.users * config.rbs;
    let mut dims = vec![input];
    dims.extend(&train.hidden);
    let acts = vec![Activation::Softplus; train.hidden.len()];
    let head = |dims: &[usize], acts: &[Activation], out: usize, act: Activation, seed: u64| {
        let mut d = dims.to_vec();
        d.push(out);
        let mut a = acts.to_vec();
        a.push(act);
        Network::new(&d, &a, seed)
    };
    let policy = head(&dims, &acts, out_p, train.policy_head, train.seed)?;
    let ml = head(&dims, &acts, config.users, Activation::Softplus, train.seed.wrapping_add(1))?;
    let ms = head(&dims, &acts, config.users, Activation::Softplus, train.seed.wrapping_add(2))?;
    Ok((policy, ml, ms))
}

/// Primal-dual training. `holdout` feeds the periodic evaluation rows of
/// the log; without it the rows report the current training batch.
pub fn train(
    data: &[ChannelState],
    holdout: &[ChannelState],
    config: &SystemConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(LearnError::Config("training set is empty".into()));
    }
    for ch in data.iter().chain(holdout) {
        ch.check_shape(config)?;
    }
    let (m_n, f_n) = (config.users, config.rbs);
    let ctx = LossContext::new(config, train_cfg.mode, train_cfg.w_grad_req)?;
    let eval_ctx = LossContext::new(config, Mode::Proposed, train_cfg.w_grad_req)?;
    let orders: Vec<Vec<usize>> = data.iter().map(|c| input_order(c, train_cfg.sort_inputs)).collect();
    let x_all = features(data, &orders);
    let gammas: Vec<Vec<Vec<f64>>> = data
        .iter()
        .zip(&orders)
        .map(|(c, o)| c.permuted(o).gamma)
        .collect();

    let (mut policy, mut mult_l, mut mult_s) = build_nets(m_n * f_n, config, train_cfg)?;
    let stats = Standardizer::fit(&x_all);
    policy.set_standardizer(stats.clone())?;
    mult_l.set_standardizer(stats.clone())?;
    mult_s.set_standardizer(stats)?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5EED_0F_BA7C4);
    let total = train_cfg.iterations;
    let b = train_cfg.batch_size;
    let penalty = train_cfg.mode.penalty();
    let mut log = Vec::new();
    let mut batch_rbs = Vec::with_capacity(total);
    let mut x = Array2::zeros((b, m_n * f_n));

    for iter in 0..total {
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
        for (row, &i) in idx.iter().enumerate() {
            x.row_mut(row).assign(&x_all.row(i));
        }
        let batch_gamma: Vec<&[Vec<f64>]> = idx.iter().map(|&i| gammas[i].as_slice()).collect();

        let (raw, p_cache) = policy.forward(&x)?;
        let powers = normalize_powers(&raw, m_n, f_n, config.pmax_w);
        let mut lambdas = Array2::zeros((b, 2 * m_n));
        let caches = if train_cfg.mode.trains_multipliers() {
            let (_, cl) = mult_l.forward(&x)?;
            let (_, cs) = mult_s.forward(&x)?;
            lambdas.slice_mut(s![.., ..m_n]).assign(&floored_multipliers(cl.output_pre()));
            lambdas.slice_mut(s![.., m_n..]).assign(&floored_multipliers(cs.output_pre()));
            Some((cl, cs))
        } else {
            None
        };
        let mut state = train_cfg.schedule.state(iter, total);
        state.w_grad_req = train_cfg.w_grad_req;
        let sharpness = train_cfg.mode.sharpness(iter, total);
        let out = build_loss(&batch_gamma, &powers, &lambdas, &state, sharpness, penalty, &ctx)
            .map_err(|e| LearnError::NonFinite(format!("iteration {iter}: {e}")))?;

        let d_raw = normalize_backward(&raw, &out.d_powers, m_n, f_n, config.pmax_w);
        let g_policy = policy.backward(&p_cache, &d_raw)?;
        if let Some((cl, cs)) = caches {
            let dz_l = floored_head_grad(cl.output_pre(), &out.d_lambdas.slice(s![.., ..m_n]).to_owned());
            let dz_s = floored_head_grad(cs.output_pre(), &out.d_lambdas.slice(s![.., m_n..]).to_owned());
            let g_l = mult_l.backward_pre(&cl, &dz_l)?;
            let g_s = mult_s.backward_pre(&cs, &dz_s)?;
            mult_l.adam_step(&g_l, train_cfg.lr_multiplier, Direction::Ascend)?;
            mult_s.adam_step(&g_s, train_cfg.lr_multiplier, Direction::Ascend)?;
        }
        policy.adam_step(&g_policy, train_cfg.policy_lr(iter), Direction::Descend)?;

        let occupied = batch_occupancy(&powers, m_n, f_n);
        batch_rbs.push(occupied);
        let due = train_cfg.eval_every > 0 && (iter % train_cfg.eval_every == 0 || iter + 1 == total);
        if due {
            let (avg_rbs, viol_l, viol_s) = if holdout.is_empty() {
                let (vl, vs) = batch_violations(&batch_gamma, &powers, &eval_ctx);
                (occupied, vl, vs)
            } else {
                let m = evaluate(&policy, holdout, config, train_cfg.sort_inputs)?;
                (m.avg_occupied_rbs, m.violation_fraction_l, m.violation_fraction_s)
            };
            log.push(LogRow {
                iter,
                loss: out.loss,
                avg_rbs,
                viol_l,
                viol_s,
                v: state.v_req,
                vbar: state.vbar,
                kappa: state.kappa,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            system: config.clone(),
            train: train_cfg.clone(),
            policy,
            multiplier_l: mult_l,
            multiplier_s: mult_s,
        },
        log,
        batch_rbs,
    })
}

/// Exact gated powers `g_exact` of one normalized sample, layout `k·F + f`.
fn gated(powers: &[f64], kn: usize, f_n: usize) -> Vec<f64> {
    let mut out = vec![0.0; kn * f_n];
    let mut column = vec![0.0; kn];
    for f in 0..f_n {
        for k in 0..kn {
            column[k] = powers[k * f_n + f];
        }
        for k in 0..kn {
            out[k * f_n + f] = g_exact(&column, k);
        }
    }
    out
}

fn batch_occupancy(powers: &Array2<f64>, m_n: usize, f_n: usize) -> f64 {
    let kn = 2 * m_n;
    let mut total = 0usize;
    for row in powers.rows() {
        let g = gated(&row.to_vec(), kn, f_n);
        total += (0..f_n)
            .filter(|&f| (0..kn).map(|k| g[k * f_n + f]).sum::<f64>() > OCCUPIED_FLOOR)
            .count();
    }
    total as f64 / powers.nrows() as f64
}

fn batch_violations(gammas: &[&[Vec<f64>]], powers: &Array2<f64>, ctx: &LossContext) -> (f64, f64) {
    let (m_n, f_n) = (ctx.users, ctx.rbs);
    let kn = 2 * m_n;
    let (mut vl, mut vs) = (0usize, 0usize);
    for (gamma, row) in gammas.iter().zip(powers.rows()) {
        let g = gated(&row.to_vec(), kn, f_n);
        for m in 0..m_n {
            let (mut ll, mut ls, mut ns) = (0.0, 0.0, 0usize);
            for f in 0..f_n {
                ll += (gamma[m][f] * g[m * f_n + f]).ln_1p();
                let ps = g[(m_n + m) * f_n + f];
                ls += (gamma[m][f] * ps).ln_1p();
                ns += usize::from(ps > 0.0);
            }
            let sbt = ctx.lb * ls - ctx.qinv[m] * (ns as f64 * ctx.lb / ctx.tau).sqrt();
            vl += usize::from(ctx.rate_l[m] - ctx.lb * ll > 0.0);
            vs += usize::from(ctx.rate_s[m] - if ns == 0 { 0.0 } else { sbt } > 0.0);
        }
    }
    let pairs = (gammas.len() * m_n) as f64;
    (vl as f64 / pairs, vs as f64 / pairs)
}
