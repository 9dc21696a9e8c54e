//! Sequential-claim multiuser heuristic.
//!
//! Each round every unsatisfied user, in ascending index order, claims its
//! strongest unclaimed RB and then re-solves its single-user problem on the
//! RBs it holds. A user that becomes satisfied keeps only the RBs its
//! solution uses and returns the rest to the pool.

use crate::su_opt::{solve_user, UserSpec};
use crate::sysmodel::{ChannelState, SystemConfig};
use crate::{Allocation, AllocationResult, Result};

/// Heuristic allocation for all users.
pub fn solve_multi_user(channel: &ChannelState, config: &SystemConfig) -> Result<AllocationResult> {
    config.validate()?;
    channel.check_shape(config)?;
    let (users, rbs) = (config.users, config.rbs);
    let specs: Vec<UserSpec> = (0..users).map(|m| UserSpec::of(config, m)).collect();
    let mut free = vec![true; rbs];
    let mut held: Vec<Vec<usize>> = vec![Vec::new(); users];
    let mut done = vec![false; users];
    let mut alloc = Allocation::zeros(users, rbs);

    for m in 0..users {
        done[m] = specs[m].rate_l == 0.0 && specs[m].rate_s == 0.0;
    }
    while done.iter().any(|d| !d) {
        if free.iter().all(|f| !f) {
            return Ok(AllocationResult::infeasible(alloc));
        }
        for m in (0..users).filter(|&m| !done[m]) {
            let best = (0..rbs)
                .filter(|&f| free[f])
                .max_by(|&a, &b| channel.gamma[m][a].total_cmp(&channel.gamma[m][b]).then(b.cmp(&a)));
            if let Some(f) = best {
                free[f] = false;
                held[m].push(f);
            }
        }
        let pending: Vec<usize> = (0..users).filter(|&m| !done[m]).collect();
        for m in pending {
            let gains: Vec<f64> = held[m].iter().map(|&f| channel.gamma[m][f]).collect();
            let sol = solve_user(&gains, &specs[m], None)?;
            if !sol.feasible {
                continue;
            }
            done[m] = true;
            for (pos, &f) in held[m].iter().enumerate() {
                alloc.p_l[m][f] = sol.p_l[pos];
                alloc.p_s[m][f] = sol.p_s[pos];
                if sol.p_l[pos] == 0.0 && sol.p_s[pos] == 0.0 {
                    free[f] = true;
                }
            }
        }
    }
    Ok(AllocationResult::feasible(alloc))
}
