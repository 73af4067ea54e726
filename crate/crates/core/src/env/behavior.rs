//! Scripted behavior policies used to manufacture offline datasets.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::gripper::{GripperChain, GRIPPER_EPSILON, GRIPPER_HOME, MAX_MOVE};
use super::{EnvSpec, Environment, Episode, GoalConditioned};
use crate::data::{Dataset, DatasetMeta, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyGrade {
    Medium,
    Expert,
    MediumExpert,
}

impl PolicyGrade {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyGrade::Medium => "medium",
            PolicyGrade::Expert => "expert",
            PolicyGrade::MediumExpert => "medium_expert",
        }
    }
}

impl fmt::Display for PolicyGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyGrade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(PolicyGrade::Medium),
            "expert" => Ok(PolicyGrade::Expert),
            "medium_expert" | "medium-expert" => Ok(PolicyGrade::MediumExpert),
            _ => Err(Error::Config(format!("unknown policy grade {s:?}"))),
        }
    }
}

pub const CORRIDOR_MEDIUM_NOISE: f64 = 0.3;
pub const CORRIDOR_EXPERT_NOISE: f64 = 0.1;
pub const GRIPPER_MEDIUM_NOISE: f64 = 0.05;
pub const GRIPPER_EXPERT_NOISE: f64 = 0.02;
pub const GRIPPER_ABORT_PROBABILITY: f64 = 0.5;
/// Per-step probability that the medium gripper controller issues a uniform
/// random grip command instead of the scripted one.
pub const GRIPPER_MEDIUM_GRIP_SLIP: f64 = 0.2;

/// Uniform random action inside the action box.
pub fn random_action(spec: &EnvSpec, rng: &mut dyn RngCore) -> Vec<f64> {
    spec.action_low
        .iter()
        .zip(&spec.action_high)
        .map(|(&lo, &hi)| rng.random_range(lo..=hi))
        .collect()
}

fn gaussian(rng: &mut dyn RngCore, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
}

/// One scripted controller instance; `begin_episode` fixes the per-episode
/// randomness (mixture component, abort decision).
#[derive(Debug, Clone)]
pub enum BehaviorController {
    Corridor { direction: f64, grade: PolicyGrade, expert_now: bool },
    Gripper { grade: PolicyGrade, expert_now: bool, abort: bool },
}

impl BehaviorController {
    pub fn new(env: &dyn Environment, grade: PolicyGrade) -> Self {
        if env.goals().is_some() {
            BehaviorController::Gripper {
                grade,
                expert_now: false,
                abort: false,
            }
        } else {
            let direction = if env.spec().name == "corridor-backward" { -1.0 } else { 1.0 };
            BehaviorController::Corridor {
                direction,
                grade,
                expert_now: false,
            }
        }
    }

    pub fn begin_episode(&mut self, rng: &mut dyn RngCore) {
        match self {
            BehaviorController::Corridor { grade, expert_now, .. } => {
                *expert_now = match grade {
                    PolicyGrade::Medium => false,
                    PolicyGrade::Expert => true,
                    PolicyGrade::MediumExpert => rng.random_bool(0.5),
                };
            }
            BehaviorController::Gripper { grade, expert_now, abort } => {
                *expert_now = match grade {
                    PolicyGrade::Medium => false,
                    PolicyGrade::Expert => true,
                    PolicyGrade::MediumExpert => rng.random_bool(0.5),
                };
                *abort = !*expert_now && rng.random_bool(GRIPPER_ABORT_PROBABILITY);
            }
        }
    }

    /// Returns `(action, low_level_goal)`; the goal is empty for the corridor.
    pub fn act(&self, env: &dyn Environment, state: &[f64], rng: &mut dyn RngCore) -> (Vec<f64>, Vec<f64>) {
        match *self {
            BehaviorController::Corridor { direction, expert_now, .. } => {
                let (target, gain, sigma) = if expert_now {
                    (1.0, 10.0, CORRIDOR_EXPERT_NOISE)
                } else {
                    (0.5, 1.0, CORRIDOR_MEDIUM_NOISE)
                };
                let ax = (gain * (direction * target - state[2])).clamp(-1.0, 1.0) + gaussian(rng, sigma);
                let ay = (-2.0 * state[1] - 2.0 * state[3]).clamp(-1.0, 1.0) + gaussian(rng, sigma);
                (env.spec().clamp_action(&[ax, ay]), Vec::new())
            }
            BehaviorController::Gripper { expert_now, abort, .. } => {
                let goals = env.goals().expect("gripper controller needs a goal environment");
                gripper_act(env.spec(), goals, state, expert_now, abort, rng)
            }
        }
    }
}

fn gripper_act(
    spec: &EnvSpec,
    goals: &dyn GoalConditioned,
    s: &[f64],
    expert: bool,
    abort: bool,
    rng: &mut dyn RngCore,
) -> (Vec<f64>, Vec<f64>) {
    let sigma = if expert { GRIPPER_EXPERT_NOISE } else { GRIPPER_MEDIUM_NOISE };
    let phase = (0..3).find(|&k| !goals.high_goal_reached(s, k)).unwrap_or(2);
    let goal = goals.low_level_goal(s, phase);
    if abort && phase > 0 {
        return (random_action(spec, rng), goal);
    }
    let p = GripperChain::gripper(s);
    let holding = GripperChain::holding(s);
    let (target, grip_on_arrival, grip_otherwise) = match phase {
        0 => ([goal[0], goal[1]], 1.0, -1.0),
        1 if holding => ([goal[0], goal[1]], -1.0, 1.0),
        1 => {
            let b1 = GripperChain::block1(s);
            ([b1[0], b1[1]], 1.0, -1.0)
        }
        _ => (GRIPPER_HOME, -1.0, -1.0),
    };
    let dx = (target[0] - p[0]).clamp(-MAX_MOVE, MAX_MOVE);
    let dy = (target[1] - p[1]).clamp(-MAX_MOVE, MAX_MOVE);
    let arrives = (p[0] + dx - target[0]).abs() < GRIPPER_EPSILON && (p[1] + dy - target[1]).abs() < GRIPPER_EPSILON;
    let grip = if !expert && rng.random_bool(GRIPPER_MEDIUM_GRIP_SLIP) {
        rng.random_range(-1.0..=1.0)
    } else if arrives {
        grip_on_arrival
    } else {
        grip_otherwise
    };
    let action = [
        dx + gaussian(rng, sigma),
        dy + gaussian(rng, sigma),
        grip + gaussian(rng, sigma),
    ];
    (spec.clamp_action(&action), goal)
}

/// Rolls the scripted controller of `grade` until `n_transitions` records
/// are collected. For goal environments the recorded reward is the sparse
/// low-level reward of the recorded goal.
pub fn behavior_rollout(env: &dyn Environment, grade: PolicyGrade, n_transitions: usize, seed: u64) -> Result<Dataset> {
    if n_transitions == 0 {
        return Err(Error::Config("n_transitions must be positive".into()));
    }
    let spec = env.spec();
    let mut data = Dataset::new(DatasetMeta {
        state_dim: spec.state_dim,
        action_dim: spec.action_dim,
        goal_dim: spec.goal_dim,
        env: spec.name.to_string(),
        grade: grade.as_str().to_string(),
        seed,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut controller = BehaviorController::new(env, grade);
    while data.len() < n_transitions {
        controller.begin_episode(&mut rng);
        let mut ep = Episode::new(env, &mut rng);
        while !ep.is_done() && data.len() < n_transitions {
            let state = ep.state().to_vec();
            let (action, goal) = controller.act(env, &state, &mut rng);
            let (next_state, env_reward, done) = ep.step(&action)?;
            let reward = match env.goals() {
                Some(g) => g.low_reward(&next_state, &goal),
                None => env_reward,
            };
            data.push(Transition {
                state,
                action,
                goal,
                reward,
                next_state,
                done,
            })?;
        }
    }
    Ok(data)
}
