//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 train seven policies for 5·10⁴ iterations each; expect
//! 35-50 minutes on one core. `RBALLOC_THREADS` spreads the runs and
//! `RBALLOC_CRITERIA=1,3,9` selects a subset.

use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rballoc_core::dataset::Dataset;
use rballoc_core::mu_opt::solve_multi_user;
use rballoc_core::oracle::exhaustive_solve;
use rballoc_core::ratecalc::{lbt_rate, sbt_rate_bounded, LinkDims};
use rballoc_core::smoothing::{g_exact, g_smooth, indicator_grad, solve_u, solve_v, zeta, Schedule, RHO};
use rballoc_core::su_opt::{solve_single_user, solve_user, SplitRecord, UserSpec};
use rballoc_core::subsetsum::{brute_force_subset, solve_subset, SubsetQuery, Target};
use rballoc_core::sysmodel::bps_to_nats;
use rballoc_core::{ChannelState, SystemConfig};
use rballoc_harness::bench::{run_bench, BenchSpec};
use rballoc_harness::experiments::{parallel_map, thread_count};
use rballoc_learn::neuralnet::{Activation, Network, Standardizer};
use rballoc_learn::trainer::{
    compute_smoothing_params, evaluate, input_order, loss_with_params, normalize_backward, normalize_powers, train,
    LossContext, Penalty, Sharpness, TrainOutcome,
};
use rballoc_learn::{Metrics, Mode, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn single_user_system(rbs: usize, rate_l_bps: f64, rate_s_bps: f64) -> SystemConfig {
    SystemConfig {
        users: 1,
        rbs,
        ..SystemConfig::default()
    }
    .with_requirements(bps_to_nats(rate_l_bps), bps_to_nats(rate_s_bps), 1e-2)
}

/// Random single-user instances shared by criteria 1 and 2.
fn single_user_instances() -> Vec<(SystemConfig, ChannelState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    (0..250)
        .map(|i| {
            let rbs = rng.random_range(4..=8);
            let per_rb = rbs as f64 / 8.0;
            let config = single_user_system(
                rbs,
                per_rb * rng.random_range(0.5e6..6.0e6),
                per_rb * rng.random_range(20e3..200e3),
            );
            let channel = Dataset::generate(&config, 1000 + i, 1).unwrap().channels.remove(0);
            (config, channel)
        })
        .collect()
}

fn criterion_1(instances: &[(SystemConfig, ChannelState)]) -> Outcome {
    let start = Instant::now();
    let (mut feasible, mut mismatches) = (0, 0);
    for (config, ch) in instances {
        let su = solve_single_user(&ch.gamma[0], &UserSpec::of(config, 0)).map_err(|e| e.to_string())?;
        let ex = exhaustive_solve(ch, config).map_err(|e| e.to_string())?;
        feasible += usize::from(ex.is_feasible());
        if su.status != ex.status || (ex.is_feasible() && su.occupied != ex.occupied) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let share = feasible as f64 / instances.len() as f64;
    check(
        mismatches == 0 && share >= 0.8 && secs < 120.0,
        format!(
            "{} instances, {:.0}% feasible, {mismatches} mismatches, {secs:.1} s",
            instances.len(),
            100.0 * share
        ),
    )
}

fn criterion_2(instances: &[(SystemConfig, ChannelState)]) -> Outcome {
    let (mut splits, mut worst_eq, mut worst_j) = (0usize, 0f64, 0f64);
    for (config, ch) in instances {
        let spec = UserSpec::of(config, 0);
        let dims = LinkDims::of(config);
        let mut failure = None;
        let mut observe = |r: &SplitRecord| {
            let pick = |sbt: bool| -> (Vec<f64>, Vec<f64>) {
                r.gammas
                    .iter()
                    .zip(&r.powers)
                    .zip(&r.s_mask)
                    .filter(|(_, s)| **s == sbt)
                    .map(|((g, p), _)| (*g, *p))
                    .unzip()
            };
            let (gs, ps) = pick(true);
            let (gl, pl) = pick(false);
            let total: f64 = r.powers.iter().sum();
            let mut eq = ((total - spec.pmax) / spec.pmax).abs();
            if !gs.is_empty() {
                match sbt_rate_bounded(&gs, &ps, spec.eps, dims) {
                    Ok(rs) => eq = eq.max(((rs - spec.rate_s) / spec.rate_s.max(1.0)).abs()),
                    Err(e) => failure = Some(e.to_string()),
                }
            }
            match lbt_rate(&gl, &pl, dims.lb) {
                Ok(rl) => worst_j = worst_j.max((r.objective - rl).abs() / rl.abs().max(1.0)),
                Err(e) => failure = Some(e.to_string()),
            }
            worst_eq = worst_eq.max(eq);
            splits += 1;
        };
        solve_user(&ch.gamma[0], &spec, Some(&mut observe)).map_err(|e| e.to_string())?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    check(
        splits > 0 && worst_eq <= 1e-8 && worst_j <= 1e-9,
        format!("{splits} splits, max equality residual {worst_eq:.2e}, max objective error {worst_j:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=22);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..5.0)).collect();
        let k = rng.random_range(0..=n);
        let lower = rng.random_range(-10.0..10.0);
        let upper = lower + rng.random_range(0.5..20.0);
        let bound = rng.random_range(lower..=upper);
        let target = if i % 2 == 0 {
            Target::MaxSumAtMost(bound)
        } else {
            Target::MinSumAbove(bound)
        };
        let q = SubsetQuery {
            values,
            k,
            lower,
            upper,
            target,
        };
        let fast = solve_subset(&q).map_err(|e| e.to_string())?;
        let slow = brute_force_subset(&q).map_err(|e| e.to_string())?;
        let same = match (&fast, &slow) {
            (None, None) => true,
            (Some(a), Some(b)) => a.exact && (a.sum - b.sum).abs() <= 1e-12 * b.sum.abs().max(1.0),
            _ => false,
        };
        mismatches += usize::from(!same);
    }
    check(mismatches == 0, format!("1000 queries, {mismatches} mismatches"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = zeta();
    let zeta_residual = (z.exp() + z - z * z.exp() + 1.0).abs();
    let (mut feasible, mut worst_grad, mut worst_zeta) = (0usize, 0f64, 0f64);
    for _ in 0..1000 {
        let g = 10f64.powf(rng.random_range(-4.0..2.0));
        let v_req = 10f64.powf(rng.random_range(-3.0..3.0));
        let v = solve_v(g, v_req);
        let peak = 2.0 * z * (-z).exp() / (1.0 + (-z).exp()).powi(2) / g;
        if peak >= v_req {
            feasible += 1;
            worst_grad = worst_grad.max((indicator_grad(g, v) - v_req).abs() / v_req);
        } else {
            worst_zeta = worst_zeta.max((v * g - z).abs());
        }
    }
    check(
        feasible > 0 && feasible < 1000 && worst_grad <= 1e-6 && worst_zeta <= 1e-6 && zeta_residual <= 1e-6,
        format!(
            "zeta {z:.6} (residual {zeta_residual:.1e}), {feasible} feasible, max gradient error {worst_grad:.2e}·V, \
             max zeta error {worst_zeta:.1e}"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut sums, mut worst_sum, mut maxes, mut worst_max) = (0usize, 0f64, 0usize, 0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let idx = rng.random_range(0..n);
        let vbar = rng.random_range(0.05..0.5);
        // Max-element branch with margin ≥ 0.1.
        let mut top = p.clone();
        let rest = top.iter().enumerate().filter(|(j, _)| *j != idx).map(|(_, v)| *v).fold(0.0, f64::max);
        top[idx] = rest + rng.random_range(0.1..1.0);
        let u = solve_u(&top, idx, vbar, RHO);
        worst_max = worst_max.max((g_smooth(&top, idx, &u) - g_exact(&top, idx)).abs());
        maxes += 1;
        // Feasible branch: idx dominated and the requirement reachable.
        p[idx] = rest - rng.random_range(0.0..rest.max(1e-3));
        let dominating = (0..n).filter(|&j| j != idx && p[j] > p[idx] + 1e-12).count();
        if dominating == 0 || 1.0 / (1.0 + dominating as f64) < vbar {
            continue;
        }
        let u = solve_u(&p, idx, vbar, RHO);
        let s: f64 = (0..n).map(|j| (u[j] * (p[j] - p[idx])).exp()).sum();
        worst_sum = worst_sum.max((s - 1.0 / vbar).abs() / (1.0 / vbar));
        sums += 1;
    }
    check(
        sums > 100 && worst_sum <= 1e-9 && worst_max <= 1e-10,
        format!("{sums} feasible cases, max sum residual {worst_sum:.1e}; {maxes} max cases, max error {worst_max:.1e}"),
    )
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// FD check of every weight of `net` through `f`; returns (coordinates, share within 1e-4).
fn fd_weights(net: &mut Network, analytic: &[Array2<f64>], f: &dyn Fn(&Network) -> f64) -> (usize, usize) {
    let h = 1e-5;
    let (mut total, mut good) = (0, 0);
    for l in 0..net.layers.len() {
        let (rows, cols) = net.layers[l].w.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = net.layers[l].w[[i, j]];
                net.layers[l].w[[i, j]] = orig + h;
                let up = f(net);
                net.layers[l].w[[i, j]] = orig - h;
                let dn = f(net);
                net.layers[l].w[[i, j]] = orig;
                let fd = (up - dn) / (2.0 * h);
                total += 1;
                good += usize::from(relative(fd, analytic[l][[i, j]]) <= 1e-4);
            }
        }
    }
    (total, good)
}

/// FD check of features → policy → normalization → loss with sharpness
/// frozen at the base point.
fn fd_composition(rate_l_bps: f64, rate_s_bps: f64, seed: u64) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = SystemConfig {
        rbs: 3,
        ..SystemConfig::default()
    }
    .with_requirements(bps_to_nats(rate_l_bps), bps_to_nats(rate_s_bps), 1e-2);
    let data = Dataset::generate(&config, seed, 6).map_err(|e| e.to_string())?;
    let ctx = LossContext::new(&config, Mode::Proposed, 0.4).map_err(|e| e.to_string())?;
    let orders: Vec<Vec<usize>> = data.channels.iter().map(|c| input_order(c, true)).collect();
    let gammas: Vec<Vec<Vec<f64>>> = data.channels.iter().zip(&orders).map(|(c, o)| c.permuted(o).gamma).collect();
    let x = Array2::from_shape_fn((6, 6), |(i, j)| gammas[i][j / 3][j % 3]);
    let mut policy = Network::new(
        &[6, 8, 8, 8, 12],
        &[Activation::Softplus, Activation::Softplus, Activation::Softplus, Activation::Softplus],
        2,
    )
    .map_err(|e| e.to_string())?;
    policy.set_standardizer(Standardizer::fit(&x)).map_err(|e| e.to_string())?;
    let lambdas: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(0.05..1.5)).collect()).collect();
    let state = Schedule::default().state(2_000, 10_000);
    let (raw, cache) = policy.forward(&x).map_err(|e| e.to_string())?;
    let base = normalize_powers(&raw, 2, 3, config.pmax_w);
    let params: Vec<_> = (0..6)
        .map(|i| compute_smoothing_params(&gammas[i], &base.row(i).to_vec(), &state, Sharpness::Adaptive, &ctx))
        .collect();
    let loss_of = |p: &Array2<f64>| -> (f64, Array2<f64>) {
        let mut total = 0.0;
        let mut d = Array2::zeros(p.dim());
        for i in 0..6 {
            let (l, dp, _) = loss_with_params(
                &gammas[i],
                &p.row(i).to_vec(),
                &lambdas[i],
                &params[i],
                state.kappa,
                Penalty::Nonlinear,
                &ctx,
            );
            total += l / 6.0;
            for (dst, v) in d.row_mut(i).iter_mut().zip(dp) {
                *dst = v / 6.0;
            }
        }
        (total, d)
    };
    let (_, d_p) = loss_of(&base);
    let d_raw = normalize_backward(&raw, &d_p, 2, 3, config.pmax_w);
    let grads = policy.backward(&cache, &d_raw).map_err(|e| e.to_string())?;
    let f = |n: &Network| loss_of(&normalize_powers(&n.predict(&x).unwrap(), 2, 3, config.pmax_w)).0;
    Ok(fd_weights(&mut policy, &grads.w, &f))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Bare network: loss = Σ out ⊙ weights.
    let mut net = Network::new(
        &[5, 7, 6, 3],
        &[Activation::Softplus, Activation::Softplus, Activation::Relu],
        1,
    )
    .map_err(|e| e.to_string())?;
    let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
    let wts = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
    let (_, cache) = net.forward(&x).map_err(|e| e.to_string())?;
    let grads = net.backward(&cache, &wts).map_err(|e| e.to_string())?;
    let f = |n: &Network| (n.predict(&x).unwrap() * &wts).sum();
    let (t1, g1) = fd_weights(&mut net, &grads.w, &f);

    // Requirements met (saturated penalties) and violated (active penalties).
    let (ta, ga) = fd_composition(0.9e6, 80e3, 8)?;
    let (tb, gb) = fd_composition(2.5e6, 200e3, 9)?;
    let (t2, g2) = (ta + tb, ga + gb);

    let (s1, s2) = (g1 as f64 / t1 as f64, g2 as f64 / t2 as f64);
    check(
        s1 >= 0.99 && s2 >= 0.99,
        format!("network {g1}/{t1}, composed loss {g2}/{t2} ({ga}/{ta} met, {gb}/{tb} violated) coordinates within 1e-4"),
    )
}

/// Shared setup of criteria 7 and 8.
struct Toy {
    config: SystemConfig,
    train: Vec<ChannelState>,
    test: Vec<ChannelState>,
}

impl Toy {
    fn new() -> Self {
        let config = SystemConfig {
            users: 2,
            rbs: 8,
            ..SystemConfig::default()
        }
        .with_requirements(bps_to_nats(1.2e6), bps_to_nats(102.4e3), 1e-2);
        Self {
            train: Dataset::generate(&config, 1, 20_000).unwrap().channels,
            test: Dataset::generate(&config, 2, 500).unwrap().channels,
            config,
        }
    }

    fn train_config(mode: Mode, sort_inputs: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 100,
            iterations: 50_000,
            hidden: vec![64; 3],
            mode,
            seed,
            eval_every: 0,
            sort_inputs,
            ..TrainConfig::default()
        }
    }
}

struct Run {
    mode: Mode,
    sorted: bool,
    seed: u64,
    result: Result<(TrainOutcome, Metrics), String>,
}

fn training_runs(toy: &Toy) -> Vec<Run> {
    let mut specs = vec![(Mode::DefaultConstr, true, 0)];
    for seed in 0..3 {
        specs.push((Mode::Proposed, true, seed));
        specs.push((Mode::Proposed, false, seed));
    }
    parallel_map(&specs, thread_count(), |&(mode, sorted, seed)| {
        let cfg = Toy::train_config(mode, sorted, seed);
        let result = train(&toy.train, &[], &toy.config, &cfg).map_err(|e| e.to_string()).and_then(|out| {
            let m = evaluate(&out.checkpoint.policy, &toy.test, &toy.config, sorted).map_err(|e| e.to_string())?;
            Ok((out, m))
        });
        Run {
            mode,
            sorted,
            seed,
            result,
        }
    })
}

fn find(runs: &[Run], mode: Mode, sorted: bool, seed: u64) -> Result<&(TrainOutcome, Metrics), String> {
    let run = runs
        .iter()
        .find(|r| r.mode == mode && r.sorted == sorted && r.seed == seed)
        .expect("run was scheduled");
    run.result.as_ref().map_err(|e| format!("training failed: {e}"))
}

fn criterion_7(toy: &Toy, runs: &[Run]) -> Outcome {
    let mut mu_total = 0usize;
    let mut mu_feasible = 0usize;
    for ch in &toy.test {
        let r = solve_multi_user(ch, &toy.config).map_err(|e| e.to_string())?;
        if r.is_feasible() {
            mu_total += r.occupied;
            mu_feasible += 1;
        }
    }
    if mu_feasible == 0 {
        return Err("no test instance is feasible for solve_multi_user".into());
    }
    let mu_avg = mu_total as f64 / mu_feasible as f64;
    let (_, prop) = find(runs, Mode::Proposed, true, 0)?;
    let (_, base) = find(runs, Mode::DefaultConstr, true, 0)?;
    let a = prop.avg_occupied_rbs <= 1.25 * mu_avg;
    let b = prop.violation_fraction_any <= 3e-2;
    let c = base.violation_fraction_any >= 3.0 * prop.violation_fraction_any;
    check(
        a && b && c,
        format!(
            "(a) {:.3} RBs vs mu_opt {mu_avg:.3} [{}], (b) violation {:.4} [{}], (c) default-constr violation {:.4} \
             at {:.3} RBs [{}]",
            prop.avg_occupied_rbs,
            verdict(a),
            prop.violation_fraction_any,
            verdict(b),
            base.violation_fraction_any,
            base.avg_occupied_rbs,
            verdict(c)
        ),
    )
}

/// First iteration whose trailing-200 batch mean is within tolerance of
/// the final-200 mean, plus that final level.
fn convergence(batch_rbs: &[f64]) -> (usize, f64) {
    let w = 200;
    let n = batch_rbs.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let level = mean(&batch_rbs[n - w..]);
    let tol = (0.05 * level).max(0.1);
    let mut sum: f64 = batch_rbs[..w].iter().sum();
    for end in w..=n {
        if end > w {
            sum += batch_rbs[end - 1] - batch_rbs[end - 1 - w];
        }
        if (sum / w as f64 - level).abs() <= tol {
            return (end, level);
        }
    }
    (n, level)
}

fn criterion_8(runs: &[Run]) -> Outcome {
    let mut votes = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (sorted, _) = find(runs, Mode::Proposed, true, seed)?;
        let (unsorted, _) = find(runs, Mode::Proposed, false, seed)?;
        let (ts, ls) = convergence(&sorted.batch_rbs);
        let (tu, lu) = convergence(&unsorted.batch_rbs);
        let win = ts < tu && ls <= lu;
        votes += usize::from(win);
        parts.push(format!("seed {seed}: sorted {ts} it @ {ls:.2}, unsorted {tu} it @ {lu:.2}"));
    }
    check(votes >= 2, format!("{votes}/3 seeds favour sorting; {}", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    let spec = BenchSpec {
        base: single_user_system(4, 0.3e6, 102.4e3),
        rbs: vec![4, 5, 6, 7],
        rate_l_bps: vec![3.6e6, 4.8e6, 6.0e6],
        samples: 200,
        seed: 9,
        hidden: 128,
        max_states: 10_000_000,
    };
    let rows = run_bench(&spec).map_err(|e| e.to_string())?;
    let median = |method: &str, rbs: usize| -> f64 {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == method && r.rbs == rbs)
            .map(|r| r.median_s)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let growth = |method: &str| (median(method, 7) / median(method, 4)).powf(1.0 / 3.0);
    let (g_or, g_su, g_inf) = (growth("oracle"), growth("su_opt"), growth("infer"));
    let oracle_steps: Vec<f64> = (4..7).map(|f| median("oracle", f + 1) / median("oracle", f)).collect();
    let accelerating = oracle_steps.iter().all(|s| *s >= 2.0);
    let mut spread = 0f64;
    for &rbs in &spec.rbs {
        let t: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == "infer" && r.rbs == rbs)
            .map(|r| r.median_s)
            .collect();
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(0.0, f64::max);
        spread = spread.max(hi / lo - 1.0);
    }
    let ok = accelerating && g_or > g_su && g_or > g_inf && spread <= 0.2;
    check(
        ok,
        format!(
            "per-RB growth: oracle {g_or:.2}x (steps {:.2?}), su_opt {g_su:.2}x, infer {g_inf:.2}x; infer spread over RL \
             {:.0}%",
            oracle_steps,
            100.0 * spread
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fail"
    }
}

fn report(n: usize, outcome: Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n}: PASS: {detail}");
            true
        }
        Err(detail) => {
            println!("criterion {n}: FAIL: {detail}");
            false
        }
    }
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only a
    // filter naming something else skips the run.
    if std::env::args().skip(1).any(|a| !a.starts_with('-') && !"acceptance".contains(a.as_str())) {
        return;
    }
    let wanted: Vec<usize> = match std::env::var("RBALLOC_CRITERIA") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    };
    let on = |n: usize| wanted.contains(&n);
    let mut all = true;
    if on(1) || on(2) {
        let instances = single_user_instances();
        if on(1) {
            all &= report(1, criterion_1(&instances));
        }
        if on(2) {
            all &= report(2, criterion_2(&instances));
        }
    }
    let simple: [(usize, fn() -> Outcome); 3] = [(3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (n, f) in simple {
        if on(n) {
            all &= report(n, f());
        }
    }
    if on(6) {
        all &= report(6, criterion_6());
    }
    if on(7) || on(8) {
        let toy = Toy::new();
        let start = Instant::now();
        let runs = training_runs(&toy);
        println!("training runs: {} in {:.0} s", runs.len(), start.elapsed().as_secs_f64());
        if on(7) {
            all &= report(7, criterion_7(&toy, &runs));
        }
        if on(8) {
            all &= report(8, criterion_8(&runs));
        }
    }
    if on(9) {
        all &= report(9, criterion_9());
    }
    if !all {
        std::process::exit(1);
    }
}
