//! Wall-time comparison of the oracle, the single-user solver and policy inference.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use rballoc_core::dataset::Dataset;
use rballoc_core::oracle::{exhaustive_solve_with_budget, state_count};
use rballoc_core::su_opt::{solve_single_user, UserSpec};
use rballoc_core::sysmodel::bps_to_nats;
use rballoc_core::SystemConfig;
use rballoc_learn::neuralnet::{Activation, Network};
use rballoc_learn::trainer::infer;

use crate::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    /// Single-user base system; `rbs` and `rate_l` are overridden per row.
    pub base: SystemConfig,
    pub rbs: Vec<usize>,
    pub rate_l_bps: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub hidden: usize,
    /// Oracle runs are skipped above this state count.
    pub max_states: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub rbs: usize,
    pub rate_l_bps: f64,
    pub samples: usize,
    pub mean_s: f64,
    pub median_s: f64,
}

fn row(method: &str, rbs: usize, rate_l_bps: f64, mut times: Vec<f64>) -> BenchRow {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    };
    BenchRow {
        method: method.into(),
        rbs,
        rate_l_bps,
        samples: n,
        mean_s: times.iter().sum::<f64>() / n as f64,
        median_s: median,
    }
}

fn time<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Times every method on `samples` channels for each `(F, RL)` pair.
///
/// Inference uses an untrained policy of the deployed shape: its cost does
/// not depend on the weights.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.base.users != 1 {
        return Err(HarnessError::Usage("bench compares single-user solvers; set users = 1".into()));
    }
    if spec.samples == 0 || spec.rbs.is_empty() || spec.rate_l_bps.is_empty() {
        return Err(HarnessError::Usage("bench needs samples, RB counts and RL values".into()));
    }
    let mut rows = Vec::new();
    for &rbs in &spec.rbs {
        // One network per F: inference does not depend on RL.
        let policy = Network::new(
            &[rbs, spec.hidden, spec.hidden, spec.hidden, 2 * rbs],
            &[Activation::Softplus; 4],
            spec.seed,
        )?;
        let mut points = Vec::new();
        for &rl in &spec.rate_l_bps {
            let mut config = spec.base.clone();
            config.rbs = rbs;
            config.rate_l = vec![bps_to_nats(rl)];
            config.validate()?;
            let data = Dataset::generate(&config, spec.seed, spec.samples)?;
            points.push((rl, config, data));
        }
        let run_oracle = state_count(1, rbs) <= spec.max_states;
        let mut solver_times = Vec::new();
        for (_, config, data) in &points {
            let mut t_or = Vec::new();
            if run_oracle {
                for ch in &data.channels {
                    let (r, t) = time(|| exhaustive_solve_with_budget(ch, config, spec.max_states));
                    r?;
                    t_or.push(t);
                }
            }
            let user = UserSpec::of(config, 0);
            let mut t_su = Vec::new();
            for ch in &data.channels {
                let (r, t) = time(|| solve_single_user(&ch.gamma[0], &user));
                r?;
                t_su.push(t);
            }
            solver_times.push((t_or, t_su));
        }
        // Inference is interleaved across RL values so slow drifts in machine
        // speed hit every RL alike.
        infer(&policy, &points[0].2.channels[0], &points[0].1, true)?;
        let mut t_inf = vec![Vec::with_capacity(spec.samples); points.len()];
        for i in 0..spec.samples {
            for (k, (_, config, data)) in points.iter().enumerate() {
                let (r, t) = time(|| infer(&policy, &data.channels[i], config, true));
                r?;
                t_inf[k].push(t);
            }
        }
        for (((rl, _, _), (t_or, t_su)), t_inf) in points.iter().zip(solver_times).zip(t_inf) {
            if run_oracle {
                rows.push(row("oracle", rbs, *rl, t_or));
            }
            rows.push(row("su_opt", rbs, *rl, t_su));
            rows.push(row("infer", rbs, *rl, t_inf));
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
