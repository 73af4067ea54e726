mod common;

use common::line::{line_data, line_world, Line};
use ofhrl::cvae::{train_cvae, CvaeConfig};
use ofhrl::env::{behavior_rollout, CorridorRunner, CorridorTask, Environment, PolicyGrade};
use ofhrl::pmdp::{EnvSession, PmdpSession, RlEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn two_member_world_terminates_on_its_first_step() {
    let env = Line::new();
    let data = line_data();
    let world = line_world(&[0.0, 2.0], 0.5, 20.0);
    let mut s = PmdpSession::new(&world, None, &env, &data).unwrap();
    s.reset_seeded(0);
    let step = s.step(&[0.3], None).unwrap();
    // mean delta 1, population variance ((0 - 1)^2 + (2 - 1)^2) / 2 = 1 > 0.5
    assert!(step.done && step.terminated_by_pessimism);
    assert_eq!(step.reward, -20.0);
}

#[test]
fn termination_fires_exactly_above_the_threshold() {
    let env = Line::new();
    let data = line_data();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let d0 = rng.random_range(-2.0..2.0);
        let d1 = rng.random_range(-2.0..2.0);
        let threshold = rng.random_range(0.0..1.0);
        let variance = ((d0 - d1) / 2.0f64).powi(2);
        let world = line_world(&[d0, d1], threshold, 7.0);
        let mut s = PmdpSession::new(&world, None, &env, &data).unwrap();
        let start = s.reset_seeded(rng.random());
        let step = s.step(&[0.5], None).unwrap();
        assert_eq!(step.terminated_by_pessimism, variance > threshold, "d0 {d0} d1 {d1} thr {threshold}");
        if variance > threshold {
            assert_eq!(step.reward, -7.0);
        } else {
            let member = s.active_member();
            let expected = start[0] + [d0, d1][member];
            assert!((step.next_state[0] - expected).abs() < 1e-12);
            assert!(!step.done);
        }
    }
}

#[test]
fn no_termination_without_threshold() {
    let env = Line::new();
    let data = line_data();
    let world = line_world(&[0.0, 50.0], 0.5, 20.0);
    let mut s = PmdpSession::new(&world, None, &env, &data).unwrap().without_termination();
    s.reset_seeded(0);
    let mut steps = 0;
    loop {
        let step = s.step(&[0.0], None).unwrap();
        assert!(!step.terminated_by_pessimism);
        steps += 1;
        if step.done {
            break;
        }
    }
    assert_eq!(steps, env.spec().horizon);
}

#[test]
fn episode_members_are_uniform() {
    let env = Line::new();
    let data = line_data();
    let k = 5;
    let world = line_world(&vec![0.0; k], 1.0, 1.0);
    let mut s = PmdpSession::new(&world, None, &env, &data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let n = 10_000;
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        s.reset(&mut rng).unwrap();
        counts[s.active_member()] += 1;
    }
    let expected = n as f64 / k as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new((k - 1) as f64).unwrap().sf(stat);
    assert!(p > 0.01, "counts {counts:?} chi2 {stat} p {p}");
    for c in counts {
        let share = c as f64 / n as f64;
        assert!((share - 0.2).abs() <= 0.02, "share {share}");
    }
}

#[test]
fn detaching_the_decoder_changes_what_an_action_means() {
    let env = CorridorRunner::new(CorridorTask::Forward);
    let data = behavior_rollout(&env, PolicyGrade::Medium, 4000, 2).unwrap();
    let cfg = CvaeConfig {
        hidden: vec![32, 32],
        epochs: 5,
        learning_rate: 1e-3,
        kl_weight: 0.05,
        ..CvaeConfig::default()
    };
    let (codec, _) = train_cvae(&data, &[-1.0, -1.0], &[1.0, 1.0], &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut differing = 0;
    for _ in 0..20 {
        let input = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut with = EnvSession::new(&env, Some(&codec));
        with.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = with.step(&input, None).unwrap();
        with.detach_decoder();
        assert!(!with.has_decoder());
        let mut without = EnvSession::new(&env, None);
        without.reset(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = without.step(&input, None).unwrap();
        assert_eq!(b.action, input.to_vec());
        if a.next_state != b.next_state {
            differing += 1;
        }
    }
    assert!(differing >= 15, "only {differing} of 20 inputs changed meaning");
}
