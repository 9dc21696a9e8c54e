use ndarray::Array2;
use proptest::prelude::*;

use rballoc_core::dataset::Dataset;
use rballoc_core::su_opt::{solve_single_user, UserSpec};
use rballoc_core::sysmodel::bps_to_nats;
use rballoc_core::{ChannelState, SystemConfig};
use rballoc_learn::neuralnet::{Activation, Network};
use rballoc_learn::trainer::{evaluate, infer_batch, input_order, occupied_rbs, train};
use rballoc_learn::{Checkpoint, Mode, TrainConfig};

fn system(users: usize, rbs: usize, rate_l_bps: f64, rate_s_bps: f64) -> SystemConfig {
    SystemConfig {
        users,
        rbs,
        ..SystemConfig::default()
    }
    .with_requirements(bps_to_nats(rate_l_bps), bps_to_nats(rate_s_bps), 1e-2)
}

fn small_run(iterations: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        iterations,
        hidden: vec![8, 8, 8],
        seed,
        eval_every: 10,
        ..TrainConfig::default()
    }
}

/// Multiplier network outputs averaged over `channels`.
fn mean_multiplier(net: &Network, channels: &[ChannelState], sort: bool) -> f64 {
    let f = channels[0].rbs();
    let m = channels[0].users();
    let x = Array2::from_shape_fn((channels.len(), m * f), |(i, j)| {
        let order = input_order(&channels[i], sort);
        channels[i].gamma[j / f][order[j % f]]
    });
    net.predict(&x).unwrap().mean().unwrap()
}

#[test]
fn same_seed_same_run() {
    let config = system(2, 4, 0.6e6, 50e3);
    let data = Dataset::generate(&config, 1, 64).unwrap().channels;
    let hold = Dataset::generate(&config, 2, 16).unwrap().channels;
    let a = train(&data, &hold, &config, &small_run(40, 3)).unwrap();
    let b = train(&data, &hold, &config, &small_run(40, 3)).unwrap();
    assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
    assert_eq!(a.batch_rbs, b.batch_rbs);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 5);
    let c = train(&data, &hold, &config, &small_run(40, 4)).unwrap();
    assert_ne!(a.checkpoint.policy, c.checkpoint.policy);
}

#[test]
fn zero_iterations_keep_the_initial_weights() {
    let config = system(1, 5, 0.6e6, 50e3);
    let data = Dataset::generate(&config, 1, 20).unwrap().channels;
    let cfg = small_run(0, 9);
    let out = train(&data, &[], &config, &cfg).unwrap();
    assert!(out.log.is_empty() && out.batch_rbs.is_empty());
    let mut acts = vec![Activation::Softplus; 3];
    acts.push(cfg.policy_head);
    let fresh = Network::new(&[5, 8, 8, 8, 10], &acts, 9).unwrap();
    assert_eq!(out.checkpoint.policy.layers, fresh.layers);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let config = system(2, 3, 0.6e6, 50e3);
    let data = Dataset::generate(&config, 5, 40).unwrap().channels;
    let test = Dataset::generate(&config, 6, 30).unwrap().channels;
    let out = train(&data, &[], &config, &small_run(30, 0)).unwrap();
    let back = Checkpoint::from_json(&out.checkpoint.to_json().unwrap()).unwrap();
    assert_eq!(back, out.checkpoint);
    let m1 = evaluate(&out.checkpoint.policy, &test, &config, true).unwrap();
    let m2 = evaluate(&back.policy, &test, &config, true).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn multipliers_rise_on_violated_and_fall_on_met_constraints() {
    let hard = system(1, 6, 40e6, 5e6);
    let easy = SystemConfig {
        users: 1,
        rbs: 6,
        ..SystemConfig::default()
    }
    .with_requirements(0.0, 0.0, 0.4999);
    let data = Dataset::generate(&hard, 1, 64).unwrap().channels;
    let cfg = TrainConfig {
        lr_multiplier: 1e-2,
        ..small_run(5, 1)
    };
    let before = train(&data, &[], &hard, &small_run(0, 1)).unwrap().checkpoint;
    for (sys, rises) in [(hard, true), (easy, false)] {
        let after = train(&data, &[], &sys, &cfg).unwrap().checkpoint;
        for (b, a) in [(&before.multiplier_l, &after.multiplier_l), (&before.multiplier_s, &after.multiplier_s)] {
            let (b, a) = (mean_multiplier(b, &data, true), mean_multiplier(a, &data, true));
            assert_eq!(a > b, rises, "before {b}, after {a}");
        }
    }
}

#[test]
fn fixed_multiplier_mode_leaves_multiplier_nets_alone() {
    let config = system(1, 3, 40e6, 5e6);
    let data = Dataset::generate(&config, 1, 32).unwrap().channels;
    let before = train(&data, &[], &config, &small_run(0, 2)).unwrap().checkpoint;
    let cfg = TrainConfig {
        mode: Mode::FixedMultiplier(2.0),
        ..small_run(20, 2)
    };
    let after = train(&data, &[], &config, &cfg).unwrap().checkpoint;
    assert_eq!(before.multiplier_l.layers, after.multiplier_l.layers);
    assert_ne!(before.policy.layers, after.policy.layers);
}

#[test]
fn toy_single_user_run_approaches_the_exact_solver() {
    let config = system(1, 6, 0.6e6, 50e3);
    let data = Dataset::generate(&config, 1, 4000).unwrap().channels;
    let test = Dataset::generate(&config, 2, 200).unwrap().channels;
    let cfg = TrainConfig {
        batch_size: 100,
        iterations: 5000,
        hidden: vec![32; 3],
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train(&data, &[], &config, &cfg).unwrap();
    let m = evaluate(&out.checkpoint.policy, &test, &config, true).unwrap();
    let spec = UserSpec::of(&config, 0);
    let su: Vec<usize> = test
        .iter()
        .map(|c| solve_single_user(&c.gamma[0], &spec).unwrap())
        .filter(|r| r.is_feasible())
        .map(|r| r.occupied)
        .collect();
    let su_avg = su.iter().sum::<usize>() as f64 / su.len() as f64;
    assert!(m.avg_occupied_rbs <= 1.25 * su_avg, "{m:?} vs su_opt {su_avg}");
    assert!(m.violation_fraction_any <= 0.05, "{m:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn inferred_allocations_are_valid(seed in 0u64..1000, users in 1usize..=3, rbs in 2usize..=6, sort: bool) {
        let config = system(users, rbs, 0.6e6, 50e3);
        let channels = Dataset::generate(&config, seed, 100).unwrap().channels;
        let mut acts = vec![Activation::Softplus; 2];
        acts.push(Activation::Relu);
        let policy = Network::new(&[users * rbs, 16, 16, 2 * users * rbs], &acts, seed).unwrap();
        let allocs = infer_batch(&policy, &channels, &config, sort).unwrap();
        for a in &allocs {
            a.validate(config.pmax_w).unwrap();
            for f in 0..rbs {
                let live = (0..users).map(|m| usize::from(a.p_l[m][f] > 0.0) + usize::from(a.p_s[m][f] > 0.0)).sum::<usize>();
                prop_assert!(live <= 1);
            }
            for m in 0..users {
                let used: f64 = a.p_l[m].iter().chain(&a.p_s[m]).sum();
                prop_assert!(used <= config.pmax_w * (1.0 + 1e-12));
            }
            prop_assert!(occupied_rbs(a) <= rbs);
        }
    }
}
