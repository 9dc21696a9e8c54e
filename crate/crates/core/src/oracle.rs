//! Exhaustive search over RB-to-(user, block) assignments for tiny instances.
//!
//! Assignments are visited in layers of increasing occupied-RB count, so the
//! first feasible one is a minimum. Powers for a fixed assignment come from
//! the two-level closed form, which is exact for fixed masks.

use crate::ratecalc::{lbt_rate, sbt_rate_bounded};
use crate::su_opt::{power_alloc, water_levels, waterfill_maxrate, UserSpec};
use crate::sysmodel::{ChannelState, SystemConfig};
use crate::{Allocation, AllocationResult, Error, Result};

pub const DEFAULT_MAX_STATES: u128 = 10_000_000;

/// Label of one RB in an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Unused,
    Lbt(usize),
    Sbt(usize),
}

/// `(2M + 1)^F`, saturating at `u128::MAX`.
pub fn state_count(users: usize, rbs: usize) -> u128 {
    (2 * users as u128 + 1)
        .checked_pow(rbs as u32)
        .unwrap_or(u128::MAX)
}

/// Powers on one user's LBT and SBT sets, or `None` when the sets cannot
/// meet the requirements with strictly positive power on every used RB.
fn user_powers(lset: &[f64], sset: &[f64], spec: &UserSpec) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let tol = spec.tolerance();
    let lb = spec.dims.lb;
    let positive = |p: &[f64]| p.iter().all(|x| *x > 0.0);
    match (lset.is_empty(), sset.is_empty()) {
        (true, true) => Ok((spec.rate_l == 0.0 && spec.rate_s == 0.0).then(|| (vec![], vec![]))),
        (false, true) => {
            if spec.rate_s != 0.0 {
                return Ok(None);
            }
            let (rate, p) = waterfill_maxrate(lset, spec.pmax, lb);
            Ok((positive(&p) && rate >= spec.rate_l - tol).then_some((p, vec![])))
        }
        (true, false) => {
            if spec.rate_l != 0.0 {
                return Ok(None);
            }
            let (_, p) = waterfill_maxrate(sset, spec.pmax, lb);
            let sbt = sbt_rate_bounded(sset, &p, spec.eps, spec.dims)?;
            Ok((positive(&p) && sbt >= spec.rate_s - tol).then_some((vec![], p)))
        }
        (false, false) => {
            let gammas: Vec<f64> = lset.iter().chain(sset).copied().collect();
            let mask: Vec<bool> = (0..gammas.len()).map(|i| i >= lset.len()).collect();
            let wl = water_levels(&gammas, &mask, spec)?;
            let p = match power_alloc(&gammas, &mask, wl) {
                Ok(p) => p,
                Err(Error::InfeasibleSplit(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            let (pl, ps) = p.split_at(lset.len());
            let rate = lbt_rate(lset, pl, lb)?;
            Ok((rate >= spec.rate_l - tol).then(|| (pl.to_vec(), ps.to_vec())))
        }
    }
}

/// Optimal powers for a fixed assignment, if it is feasible.
pub fn feasible_given_assignment(
    assignment: &[Label],
    channel: &ChannelState,
    config: &SystemConfig,
) -> Result<Option<Allocation>> {
    channel.check_shape(config)?;
    if assignment.len() != config.rbs {
        return Err(Error::Domain(format!(
            "assignment covers {} RBs, config has {}",
            assignment.len(),
            config.rbs
        )));
    }
    if let Some(bad) = assignment.iter().find(|l| matches!(l, Label::Lbt(m) | Label::Sbt(m) if *m >= config.users)) {
        return Err(Error::Domain(format!("assignment label {bad:?} names a missing user")));
    }
    let mut alloc = Allocation::zeros(config.users, config.rbs);
    for m in 0..config.users {
        let lrbs: Vec<usize> = (0..config.rbs).filter(|&f| assignment[f] == Label::Lbt(m)).collect();
        let srbs: Vec<usize> = (0..config.rbs).filter(|&f| assignment[f] == Label::Sbt(m)).collect();
        let gains = |rbs: &[usize]| rbs.iter().map(|&f| channel.gamma[m][f]).collect::<Vec<f64>>();
        let Some((pl, ps)) = user_powers(&gains(&lrbs), &gains(&srbs), &UserSpec::of(config, m))? else {
            return Ok(None);
        };
        for (f, p) in lrbs.iter().zip(pl) {
            alloc.p_l[m][*f] = p;
        }
        for (f, p) in srbs.iter().zip(ps) {
            alloc.p_s[m][*f] = p;
        }
    }
    Ok(Some(alloc))
}

pub fn exhaustive_solve(channel: &ChannelState, config: &SystemConfig) -> Result<AllocationResult> {
    exhaustive_solve_with_budget(channel, config, DEFAULT_MAX_STATES)
}

/// Minimum-RB feasible assignment; refuses instances above `max_states`.
pub fn exhaustive_solve_with_budget(
    channel: &ChannelState,
    config: &SystemConfig,
    max_states: u128,
) -> Result<AllocationResult> {
    config.validate()?;
    channel.check_shape(config)?;
    let (m, f) = (config.users, config.rbs);
    let states = state_count(m, f);
    if states > max_states {
        return Err(Error::BudgetExceeded {
            states,
            budget: max_states,
        });
    }
    let labels_per_rb = 2 * m;
    for k in 0..=f {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let mut digits = vec![0usize; k];
            loop {
                let mut assignment = vec![Label::Unused; f];
                for (&rb, &d) in combo.iter().zip(&digits) {
                    assignment[rb] = if d % 2 == 0 { Label::Lbt(d / 2) } else { Label::Sbt(d / 2) };
                }
                if let Some(alloc) = feasible_given_assignment(&assignment, channel, config)? {
                    return Ok(AllocationResult::feasible(alloc));
                }
                if !advance_odometer(&mut digits, labels_per_rb) {
                    break;
                }
            }
            if !next_combination(&mut combo, f) {
                break;
            }
        }
    }
    Ok(AllocationResult::infeasible(Allocation::zeros(m, f)))
}

/// Next labeling, last digit fastest; false after the final one.
fn advance_odometer(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Next `k`-combination of `0..n` in lexicographic order.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else {
        return false;
    };
    combo[i] += 1;
    for j in i + 1..k {
        combo[j] = combo[j - 1] + 1;
    }
    true
}
