//! Exact single-user power and RB allocation.
//!
//! For a fixed number `N` of occupied RBs and `NS` of them carrying SBT, the
//! optimal powers follow a two-water-level structure and the LBT rate becomes
//! a concave function `Y(X)` of `X`, the sum of SBT log-gains. Choosing the
//! SBT set reduces to subset-sum queries around the unconstrained maximizer
//! `X*`. The positivity bounds on `X` depend on the smallest gain in each
//! block, so the search pins those minima and solves one query per pinning;
//! every split is covered by exactly one pinned branch, which makes the
//! search exact.

use crate::ratecalc::{q_inv, AllocationResult, LinkDims};
use crate::subsetsum::{solve_subset, SubsetQuery, Target};
use crate::sysmodel::SystemConfig;
use crate::{Allocation, Error, Result};

/// Requirements and budget of one user, in nats/s and W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserSpec {
    pub rate_l: f64,
    pub rate_s: f64,
    pub eps: f64,
    pub pmax: f64,
    pub dims: LinkDims,
}

impl UserSpec {
    pub fn of(config: &SystemConfig, user: usize) -> Self {
        Self {
            rate_l: config.rate_l[user],
            rate_s: config.rate_s[user],
            eps: config.eps[user],
            pmax: config.pmax_w,
            dims: LinkDims::of(config),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.pmax > 0.0 && self.pmax.is_finite()) {
            return Err(Error::Domain(format!("power budget must be positive, got {}", self.pmax)));
        }
        if !(self.rate_l >= 0.0 && self.rate_s >= 0.0) {
            return Err(Error::Domain("rate requirements must be non-negative".into()));
        }
        if !(self.dims.lb > 0.0 && self.dims.tau > 0.0) {
            return Err(Error::Domain("bandwidth and slot must be positive".into()));
        }
        q_inv(self.eps).map(|_| ())
    }

    /// Slack allowed when comparing achieved rates with requirements.
    pub fn tolerance(&self) -> f64 {
        1e-9 * self.dims.lb
    }

    /// SBT log-sum target `RS/(L·B) + Q⁻¹(ε)·sqrt(NS/(L·B·τ))`.
    pub fn sbt_log_target(&self, ns: usize) -> Result<f64> {
        let lb = self.dims.lb;
        Ok(self.rate_s / lb + q_inv(self.eps)? * (ns as f64 / (lb * self.dims.tau)).sqrt())
    }
}

fn check_gains(gammas: &[f64]) -> Result<()> {
    match gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        Some(g) => Err(Error::Domain(format!("channel gain must be positive, got {g}"))),
        None => Ok(()),
    }
}

/// Indices sorted by gain descending, ties by index.
fn descending(gammas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gammas.len()).collect();
    order.sort_by(|&a, &b| gammas[b].total_cmp(&gammas[a]).then(a.cmp(&b)));
    order
}

/// Classic single-level water-filling with budget `p`; returns the rate
/// `L·B·Σ ln(1 + γ_f p_f)` and the powers.
pub fn waterfill_maxrate(gammas: &[f64], p: f64, lb: f64) -> (f64, Vec<f64>) {
    let mut powers = vec![0.0; gammas.len()];
    if gammas.is_empty() || !(p > 0.0) {
        return (0.0, powers);
    }
    let order = descending(gammas);
    let mut inv_sum: f64 = order.iter().map(|&i| 1.0 / gammas[i]).sum();
    let mut level = 0.0;
    for active in (1..=order.len()).rev() {
        level = (p + inv_sum) / active as f64;
        let weakest = order[active - 1];
        if level > 1.0 / gammas[weakest] || active == 1 {
            break;
        }
        inv_sum -= 1.0 / gammas[weakest];
    }
    let mut rate = 0.0;
    for (i, g) in gammas.iter().enumerate() {
        let pw = (level - 1.0 / g).max(0.0);
        powers[i] = pw;
        if pw > 0.0 {
            rate += (g * pw).ln_1p();
        }
    }
    (lb * rate, powers)
}

/// Smallest `N` whose best-`N` water-filling rate reaches `RL + RS`;
/// `F + 1` when even all RBs fall short. Gains must be sorted descending.
pub fn n_min(sorted_gains: &[f64], spec: &UserSpec) -> usize {
    let need = spec.rate_l + spec.rate_s - spec.tolerance();
    (1..=sorted_gains.len())
        .find(|&n| waterfill_maxrate(&sorted_gains[..n], spec.pmax, spec.dims.lb).0 >= need)
        .unwrap_or(sorted_gains.len() + 1)
}

/// LBT level `1/ν` and SBT level `η/ν`, both in W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterLevels {
    pub wl_l: f64,
    pub wl_s: f64,
}

/// Water levels that meet the SBT target with equality and spend the full budget.
pub fn water_levels(gammas: &[f64], s_mask: &[bool], spec: &UserSpec) -> Result<WaterLevels> {
    if gammas.len() != s_mask.len() {
        return Err(Error::Shape(format!("{} gains but {} mask entries", gammas.len(), s_mask.len())));
    }
    let ns = s_mask.iter().filter(|s| **s).count();
    let nl = gammas.len() - ns;
    if ns == 0 || nl == 0 {
        return Err(Error::DegenerateSplit { ns, nl });
    }
    let x: f64 = gammas.iter().zip(s_mask).filter(|(_, s)| **s).map(|(g, _)| g.ln()).sum();
    let total: f64 = spec.pmax + gammas.iter().map(|g| 1.0 / g).sum::<f64>();
    let wl_s = ((spec.sbt_log_target(ns)? - x) / ns as f64).exp();
    let wl_l = (total - ns as f64 * wl_s) / nl as f64;
    Ok(WaterLevels { wl_l, wl_s })
}

/// Per-RB powers `level − 1/γ`; every power must be strictly positive.
pub fn power_alloc(gammas: &[f64], s_mask: &[bool], wl: WaterLevels) -> Result<Vec<f64>> {
    if gammas.len() != s_mask.len() {
        return Err(Error::Shape(format!("{} gains but {} mask entries", gammas.len(), s_mask.len())));
    }
    let powers: Vec<f64> = gammas
        .iter()
        .zip(s_mask)
        .map(|(g, s)| if *s { wl.wl_s } else { wl.wl_l } - 1.0 / g)
        .collect();
    match powers.iter().position(|p| !(*p > 0.0)) {
        Some(i) => Err(Error::InfeasibleSplit(format!(
            "water level leaves RB {i} with power {}",
            powers[i]
        ))),
        None => Ok(powers),
    }
}

/// `Y(X) = −X + NL·ln(T − NS·e^{(a−X)/NS})`; `−∞` outside its domain.
pub fn y_of_x(x: f64, ns: usize, nl: usize, target: f64, total: f64) -> f64 {
    let inner = total - ns as f64 * ((target - x) / ns as f64).exp();
    if inner > 0.0 {
        -x + nl as f64 * inner.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Maximized LBT rate of a split, from the closed form in `Y`.
pub fn objective_j(gammas: &[f64], s_mask: &[bool], spec: &UserSpec) -> Result<f64> {
    let wl = water_levels(gammas, s_mask, spec)?;
    power_alloc(gammas, s_mask, wl)?;
    let ns = s_mask.iter().filter(|s| **s).count();
    let nl = gammas.len() - ns;
    let x: f64 = gammas.iter().zip(s_mask).filter(|(_, s)| **s).map(|(g, _)| g.ln()).sum();
    let total: f64 = spec.pmax + gammas.iter().map(|g| 1.0 / g).sum::<f64>();
    let log_prod: f64 = gammas.iter().map(|g| g.ln()).sum();
    let y = y_of_x(x, ns, nl, spec.sbt_log_target(ns)?, total);
    Ok(spec.dims.lb * (log_prod + y - nl as f64 * (nl as f64).ln()))
}

/// Where `X*` sits relative to a branch's open interval `(Xlb, Xub)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    Interior,
    XstarBelowLb,
    XstarAboveUb,
}

/// Block that holds the minimal-gain RB in a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pin {
    Lbt,
    Sbt,
}

/// A family of splits sharing the minimal gain of each block, so both
/// bounds on `X` are fixed. Indices refer to the input gain slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub pin: Pin,
    /// RBs that are SBT in every split of the branch.
    pub forced_s: Vec<usize>,
    /// Candidates for the remaining `k` SBT RBs; all other RBs are LBT.
    pub free: Vec<usize>,
    pub k: usize,
    pub xlb: f64,
    pub xub: f64,
    pub case: Case,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseAnalysis {
    pub ns: usize,
    pub nl: usize,
    pub xstar: f64,
    pub psi: f64,
    /// `γ_min > ψ`: `X*` is interior for every split.
    pub interior: bool,
    /// Branches with a nonempty interval.
    pub branches: Vec<Branch>,
}

/// Pinned branches for `NS` SBT RBs among `gammas`.
pub fn case_select(gammas: &[f64], ns: usize, spec: &UserSpec) -> Result<CaseAnalysis> {
    let n = gammas.len();
    if ns == 0 || ns >= n {
        return Err(Error::Domain(format!("NS = {ns} outside 1..{}", n.saturating_sub(1))));
    }
    check_gains(gammas)?;
    let nl = n - ns;
    let (nsf, nlf) = (ns as f64, nl as f64);
    let order = descending(gammas);
    let g = |pos: usize| gammas[order[pos]];
    let target = spec.sbt_log_target(ns)?;
    let total: f64 = spec.pmax + gammas.iter().map(|g| 1.0 / g).sum::<f64>();
    let psi = n as f64 / total;
    let xstar = target + nsf * psi.ln();
    let xlb = |gl: f64| {
        let arg = (total - nlf / gl) / nsf;
        if arg > 0.0 {
            target - nsf * arg.ln()
        } else {
            f64::INFINITY
        }
    };
    let xub = |gs: f64| target + nsf * gs.ln();
    let classify = |lo: f64, hi: f64| {
        if xstar <= lo {
            Case::XstarBelowLb
        } else if xstar >= hi {
            Case::XstarAboveUb
        } else {
            Case::Interior
        }
    };

    let mut branches = Vec::new();
    let last = n - 1;
    // Minimal-gain RB in LBT; position j is the weakest SBT RB.
    for j in (ns - 1)..last {
        let (lo, hi) = (xlb(g(last)), xub(g(j)));
        if lo < hi {
            branches.push(Branch {
                pin: Pin::Lbt,
                forced_s: vec![order[j]],
                free: order[..j].to_vec(),
                k: ns - 1,
                xlb: lo,
                xub: hi,
                case: classify(lo, hi),
            });
        }
    }
    // Minimal-gain RB in SBT; position l is the weakest LBT RB.
    for l in (nl - 1)..last {
        let (lo, hi) = (xlb(g(l)), xub(g(last)));
        if lo < hi {
            let forced = last - l;
            branches.push(Branch {
                pin: Pin::Sbt,
                forced_s: order[l + 1..].to_vec(),
                free: order[..l].to_vec(),
                k: ns - forced,
                xlb: lo,
                xub: hi,
                case: classify(lo, hi),
            });
        }
    }
    Ok(CaseAnalysis {
        ns,
        nl,
        xstar,
        psi,
        interior: g(last) > psi,
        branches,
    })
}

/// A split with all powers positive, reported to a [`SplitObserver`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub gammas: Vec<f64>,
    pub s_mask: Vec<bool>,
    pub powers: Vec<f64>,
    /// Closed-form LBT rate of the split.
    pub objective: f64,
}

pub type SplitObserver<'a> = &'a mut dyn FnMut(&SplitRecord);

/// Best split found for a fixed RB set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitChoice {
    pub s_mask: Vec<bool>,
    pub powers: Vec<f64>,
    /// Achieved LBT rate (nats/s).
    pub objective: f64,
}

fn evaluate_split(
    gammas: &[f64],
    s_mask: Vec<bool>,
    spec: &UserSpec,
    observer: &mut Option<SplitObserver<'_>>,
) -> Result<Option<SplitChoice>> {
    let wl = water_levels(gammas, &s_mask, spec)?;
    let powers = match power_alloc(gammas, &s_mask, wl) {
        Ok(p) => p,
        Err(Error::InfeasibleSplit(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let objective = objective_j(gammas, &s_mask, spec)?;
    if let Some(obs) = observer.as_mut() {
        obs(&SplitRecord {
            gammas: gammas.to_vec(),
            s_mask: s_mask.clone(),
            powers: powers.clone(),
            objective,
        });
    }
    Ok(Some(SplitChoice { s_mask, powers, objective }))
}

fn keep_better(best: &mut Option<SplitChoice>, candidate: Option<SplitChoice>) {
    if let Some(c) = candidate {
        if best.as_ref().is_none_or(|b| c.objective > b.objective) {
            *best = Some(c);
        }
    }
}

/// Optimal SBT set of one pinned branch, by Property 2 of `Y`'s concavity.
fn solve_branch(
    gammas: &[f64],
    branch: &Branch,
    xstar: f64,
    spec: &UserSpec,
    observer: &mut Option<SplitObserver<'_>>,
) -> Result<Option<SplitChoice>> {
    let offset: f64 = branch.forced_s.iter().map(|&i| gammas[i].ln()).sum();
    let (lower, upper) = (branch.xlb - offset, branch.xub - offset);
    if !(lower < upper) {
        return Ok(None);
    }
    let star = xstar - offset;
    let targets = if star >= upper {
        vec![Target::MaxSumAtMost(upper)]
    } else if star <= lower {
        vec![Target::MinSumAbove(lower)]
    } else {
        vec![Target::MaxSumAtMost(star), Target::MinSumAbove(star)]
    };
    let values: Vec<f64> = branch.free.iter().map(|&i| gammas[i].ln()).collect();
    let mut best = None;
    for target in targets {
        let query = SubsetQuery {
            values: values.clone(),
            k: branch.k,
            lower,
            upper,
            target,
        };
        let Some(found) = solve_subset(&query)? else {
            continue;
        };
        let mut s_mask = vec![false; gammas.len()];
        for &i in &branch.forced_s {
            s_mask[i] = true;
        }
        for (pick, &i) in found.mask.iter().zip(&branch.free) {
            if *pick {
                s_mask[i] = true;
            }
        }
        keep_better(&mut best, evaluate_split(gammas, s_mask, spec, observer)?);
    }
    Ok(best)
}

/// Best split of a fixed RB set that meets the SBT requirement with the
/// largest LBT rate. Includes the LBT-only split when `RS = 0` and the
/// SBT-only split when `RL = 0`.
pub fn solve_given_n(
    gammas: &[f64],
    spec: &UserSpec,
    mut observer: Option<SplitObserver<'_>>,
) -> Result<Option<SplitChoice>> {
    spec.validate()?;
    check_gains(gammas)?;
    let n = gammas.len();
    let mut best = None;
    if n == 0 {
        return Ok(None);
    }
    let lb = spec.dims.lb;
    if spec.rate_s == 0.0 {
        let (rate, powers) = waterfill_maxrate(gammas, spec.pmax, lb);
        if powers.iter().all(|p| *p > 0.0) {
            keep_better(&mut best, Some(SplitChoice { s_mask: vec![false; n], powers, objective: rate }));
        }
    }
    if spec.rate_l == 0.0 {
        let (rate, powers) = waterfill_maxrate(gammas, spec.pmax, lb);
        let penalty = lb * (spec.sbt_log_target(n)? - spec.rate_s / lb);
        if powers.iter().all(|p| *p > 0.0) && rate - penalty >= spec.rate_s - spec.tolerance() {
            keep_better(&mut best, Some(SplitChoice { s_mask: vec![true; n], powers, objective: 0.0 }));
        }
    }
    for ns in 1..n {
        let analysis = case_select(gammas, ns, spec)?;
        for branch in &analysis.branches {
            let found = solve_branch(gammas, branch, analysis.xstar, spec, &mut observer)?;
            keep_better(&mut best, found);
        }
    }
    Ok(best)
}

/// One user's solution on its own gain row.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSolution {
    pub p_l: Vec<f64>,
    pub p_s: Vec<f64>,
    pub occupied: usize,
    pub feasible: bool,
}

impl UserSolution {
    fn empty(rbs: usize, feasible: bool) -> Self {
        Self {
            p_l: vec![0.0; rbs],
            p_s: vec![0.0; rbs],
            occupied: 0,
            feasible,
        }
    }
}

/// Minimal-RB allocation for one user over its full gain row.
pub fn solve_user(gamma_row: &[f64], spec: &UserSpec, mut observer: Option<SplitObserver<'_>>) -> Result<UserSolution> {
    spec.validate()?;
    check_gains(gamma_row)?;
    let f = gamma_row.len();
    if spec.rate_l == 0.0 && spec.rate_s == 0.0 {
        return Ok(UserSolution::empty(f, true));
    }
    let order = descending(gamma_row);
    let sorted: Vec<f64> = order.iter().map(|&i| gamma_row[i]).collect();
    for n in n_min(&sorted, spec)..=f {
        let chosen = solve_given_n(&sorted[..n], spec, observer.as_deref_mut().map(|o| o as _))?;
        let Some(choice) = chosen else { continue };
        if choice.objective < spec.rate_l - spec.tolerance() {
            continue;
        }
        let mut out = UserSolution::empty(f, true);
        for (pos, &rb) in order[..n].iter().enumerate() {
            if choice.s_mask[pos] {
                out.p_s[rb] = choice.powers[pos];
            } else {
                out.p_l[rb] = choice.powers[pos];
            }
        }
        out.occupied = n;
        return Ok(out);
    }
    Ok(UserSolution::empty(f, false))
}

/// Single-user solver returning a one-row [`AllocationResult`].
pub fn solve_single_user(gamma_row: &[f64], spec: &UserSpec) -> Result<AllocationResult> {
    let sol = solve_user(gamma_row, spec, None)?;
    let allocation = Allocation {
        p_l: vec![sol.p_l],
        p_s: vec![sol.p_s],
    };
    Ok(if sol.feasible {
        AllocationResult::feasible(allocation)
    } else {
        AllocationResult::infeasible(allocation)
    })
}
