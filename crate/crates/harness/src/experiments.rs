//! Dataset-level solver runs.

use serde::{Deserialize, Serialize};

use rballoc_core::mu_opt::solve_multi_user;
use rballoc_core::oracle::exhaustive_solve_with_budget;
use rballoc_core::su_opt::{solve_single_user, UserSpec};
use rballoc_core::{Allocation, AllocationResult, ChannelState, SystemConfig};

use crate::{HarnessError, Result};

/// Environment variable bounding worker threads.
pub const THREADS_ENV: &str = "RBALLOC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SingleUser,
    MultiUser,
    Oracle { max_states: u128 },
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::SingleUser => "su_opt",
            Self::MultiUser => "mu_opt",
            Self::Oracle { .. } => "oracle",
        }
    }

    pub fn solve(self, channel: &ChannelState, config: &SystemConfig) -> Result<AllocationResult> {
        match self {
            Self::SingleUser => {
                if config.users != 1 {
                    return Err(HarnessError::Usage(format!(
                        "the single-user solver needs users = 1, config has {}",
                        config.users
                    )));
                }
                channel.check_shape(config)?;
                Ok(solve_single_user(&channel.gamma[0], &UserSpec::of(config, 0))?)
            }
            Self::MultiUser => Ok(solve_multi_user(channel, config)?),
            Self::Oracle { max_states } => Ok(exhaustive_solve_with_budget(channel, config, max_states)?),
        }
    }
}

/// One solved sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub seed: u64,
    pub feasible: bool,
    pub occupied: usize,
    pub allocation: Allocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub samples: usize,
    pub feasible: usize,
    /// Mean occupied RBs over feasible samples; `None` when none is feasible.
    pub avg_occupied_feasible: Option<f64>,
}

pub fn summarize(method: Method, results: &[SampleResult]) -> Summary {
    let feasible: Vec<&SampleResult> = results.iter().filter(|r| r.feasible).collect();
    Summary {
        method: method.name().into(),
        samples: results.len(),
        feasible: feasible.len(),
        avg_occupied_feasible: (!feasible.is_empty())
            .then(|| feasible.iter().map(|r| r.occupied as f64).sum::<f64>() / feasible.len() as f64),
    }
}

/// Worker count: `RBALLOC_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n: &usize| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over contiguous chunks.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<U>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Solves every channel with `method`.
pub fn solve_all(method: Method, channels: &[ChannelState], config: &SystemConfig) -> Result<Vec<SampleResult>> {
    let indexed: Vec<(usize, &ChannelState)> = channels.iter().enumerate().collect();
    parallel_map(&indexed, thread_count(), |(i, ch)| {
        method.solve(ch, config).map(|r| SampleResult {
            index: *i,
            seed: ch.seed,
            feasible: r.is_feasible(),
            occupied: r.occupied,
            allocation: r.allocation,
        })
    })
    .into_iter()
    .collect()
}
