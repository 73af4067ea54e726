//! Ground-truth environments and the scripted controllers that produce
//! offline datasets.

mod behavior;
mod corridor;
mod gripper;

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};

pub use behavior::{behavior_rollout, random_action, BehaviorController, PolicyGrade};
pub use corridor::{CorridorRunner, CorridorTask};
pub use gripper::{GripperChain, HighGoal, GRIPPER_EPSILON, GRIPPER_HOME};

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Zero for environments without low-level goals.
    pub goal_dim: usize,
    pub horizon: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl EnvSpec {
    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Maps `u` in `[-1, 1]^d` affinely onto the action box (clipping first).
    pub fn scale_unit_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(u, (lo, hi))| lo + (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// Known termination of the next state (horizon handled by [`Episode`]).
    pub terminal: bool,
}

/// Goal structure of the manipulation environment.
pub trait GoalConditioned {
    fn num_high_goals(&self) -> usize;
    /// Low-level goal attached to high-level action `high`, as a function of `state`.
    fn low_level_goal(&self, state: &[f64], high: usize) -> Vec<f64>;
    /// The part of `state` that low-level goals constrain.
    fn achieved_goal(&self, state: &[f64]) -> Vec<f64>;
    fn low_goal_reached(&self, state: &[f64], goal: &[f64]) -> bool;
    fn high_goal_reached(&self, state: &[f64], high: usize) -> bool;

    /// Sparse low-level reward: 0 when `goal` holds in `state`, -1 otherwise.
    fn low_reward(&self, state: &[f64], goal: &[f64]) -> f64 {
        if self.low_goal_reached(state, goal) {
            0.0
        } else {
            -1.0
        }
    }

    fn high_reward(&self, state: &[f64], high: usize) -> f64 {
        if self.high_goal_reached(state, high) {
            0.0
        } else {
            -1.0
        }
    }
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    /// Deterministic transition; out-of-range actions are clamped.
    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome;
    /// The environment's known termination predicate.
    fn is_terminal(&self, state: &[f64]) -> bool;
    /// Task reward for the transition `state --action--> next_state`.
    fn reward(&self, state: &[f64], action: &[f64], next_state: &[f64]) -> f64;

    fn goals(&self) -> Option<&dyn GoalConditioned> {
        None
    }
}

/// Environments selectable by name on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvName {
    CorridorForward,
    CorridorBackward,
    GripperChain,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [
        EnvName::CorridorForward,
        EnvName::CorridorBackward,
        EnvName::GripperChain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::CorridorForward => "corridor-forward",
            EnvName::CorridorBackward => "corridor-backward",
            EnvName::GripperChain => "gripper-chain",
        }
    }

    pub fn is_goal_conditioned(self) -> bool {
        matches!(self, EnvName::GripperChain)
    }

    /// Builds the environment. `task` selects the high-level goal queried by
    /// the gripper reward and is ignored by the corridor.
    pub fn build(self, task: HighGoal) -> Box<dyn Environment> {
        match self {
            EnvName::CorridorForward => Box::new(CorridorRunner::new(CorridorTask::Forward)),
            EnvName::CorridorBackward => Box::new(CorridorRunner::new(CorridorTask::Backward)),
            EnvName::GripperChain => Box::new(GripperChain::new(task)),
        }
    }

    pub fn make(self) -> Box<dyn Environment> {
        self.build(HighGoal::ReturnHome)
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }
}

/// A running episode in a true environment: tracks the horizon.
pub struct Episode<'a> {
    env: &'a dyn Environment,
    state: Vec<f64>,
    t: usize,
    done: bool,
}

impl<'a> Episode<'a> {
    pub fn new(env: &'a dyn Environment, rng: &mut dyn RngCore) -> Self {
        let state = env.reset(rng);
        Self::from_state(env, state)
    }

    pub fn from_state(env: &'a dyn Environment, state: Vec<f64>) -> Self {
        Self {
            env,
            state,
            t: 0,
            done: false,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Returns `(next_state, reward, done)` where `done` covers both known
    /// termination and the horizon.
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::State("step after episode end".into()));
        }
        let out = self.env.step(&self.state, action);
        self.t += 1;
        self.done = out.terminal || self.t >= self.env.spec().horizon;
        self.state = out.next_state.clone();
        Ok((out.next_state, out.reward, self.done))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for e in EnvName::ALL {
            assert_eq!(e.as_str().parse::<EnvName>().unwrap(), e);
        }
        assert!("hopper".parse::<EnvName>().is_err());
    }

    #[test]
    fn action_bounds_are_ordered() {
        for e in EnvName::ALL {
            let env = e.make();
            let spec = env.spec();
            assert!(spec.action_low.iter().zip(&spec.action_high).all(|(l, h)| l < h));
        }
    }
}
