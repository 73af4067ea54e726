//! A hand-built one-dimensional environment and world for exact P-MDP checks.

use ofhrl::data::{Dataset, DatasetMeta, NormStats, Transition};
use ofhrl::env::{EnvSpec, Environment, StepOutcome};
use ofhrl::nn::{Activation, Mlp};
use ofhrl::world::WorldModel;
use rand::RngCore;

/// A point on a line pushed by its action.
pub struct Line {
    spec: EnvSpec,
}

impl Line {
    pub fn new() -> Self {
        Self {
            spec: EnvSpec {
                name: "line",
                state_dim: 1,
                action_dim: 1,
                goal_dim: 0,
                horizon: 10,
                action_low: vec![-1.0],
                action_high: vec![1.0],
            },
        }
    }
}

impl Environment for Line {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, _rng: &mut dyn RngCore) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let next = vec![state[0] + action[0]];
        StepOutcome {
            reward: self.reward(state, action, &next),
            next_state: next,
            terminal: false,
        }
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn reward(&self, _state: &[f64], _action: &[f64], next_state: &[f64]) -> f64 {
        -next_state[0].abs()
    }
}

pub fn line_data() -> Dataset {
    let mut d = Dataset::new(DatasetMeta {
        state_dim: 1,
        action_dim: 1,
        goal_dim: 0,
        env: "line".into(),
        grade: "medium".into(),
        seed: 0,
    });
    for i in 0..4 {
        d.push(Transition {
            state: vec![0.0],
            action: vec![0.0],
            goal: vec![],
            reward: 0.0,
            next_state: vec![0.0],
            done: i % 2 == 1,
        })
        .unwrap();
    }
    d
}

/// A member that ignores its input and predicts a constant delta.
fn constant(delta: f64) -> Mlp {
    Mlp::from_parameters(&[2, 1], &[Activation::Identity], vec![0.0, 0.0, delta]).unwrap()
}

pub fn line_world(deltas: &[f64], threshold: f64, penalty: f64) -> WorldModel {
    let nets = deltas.iter().map(|d| constant(*d)).collect();
    let rewards = deltas.iter().map(|_| Mlp::zeros(&[2, 1], &[Activation::Identity]).unwrap()).collect();
    let mut w = WorldModel::from_parts(nets, Some(rewards), NormStats::identity(1), 1).unwrap();
    w.threshold = threshold;
    w.penalty = penalty;
    w
}
