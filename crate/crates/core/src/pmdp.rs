//! The pessimistic synthetic MDP and a common interface shared with the
//! true environments, optionally seen through a latent action decoder.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cvae::LatentCodec;
use crate::data::Dataset;
use crate::env::{EnvSpec, Environment, GoalConditioned};
use crate::error::{Error, Result};
use crate::world::WorldModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub terminated_by_pessimism: bool,
    /// The environment action actually applied (after decoding and clamping).
    pub action: Vec<f64>,
}

/// Environment interface consumed by the learners. The input action is a
/// latent action while a decoder is attached, a raw action otherwise.
pub trait RlEnv {
    fn spec(&self) -> &EnvSpec;
    fn goals(&self) -> Option<&dyn GoalConditioned>;
    fn has_decoder(&self) -> bool;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>>;
    /// `goal` conditions the decoder and is ignored when no goal-conditioned
    /// decoder is attached.
    fn step(&mut self, action: &[f64], goal: Option<&[f64]>) -> Result<Step>;
    fn state(&self) -> &[f64];
    fn detach_decoder(&mut self);
}

fn apply_action(
    codec: Option<&LatentCodec>,
    spec: &EnvSpec,
    state: &[f64],
    action: &[f64],
    goal: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if action.len() != spec.action_dim {
        return Err(Error::dim("action", spec.action_dim, action.len()));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("action".into()));
    }
    match codec {
        Some(c) => {
            let g = if c.goal_conditioned() {
                Some(goal.ok_or_else(|| Error::Config("goal-conditioned decoder needs a goal".into()))?)
            } else {
                None
            };
            c.decode(state, g, action)
        }
        None => Ok(spec.clamp_action(action)),
    }
}

/// One episode stream of the pessimistic MDP.
pub struct PmdpSession<'a> {
    world: &'a WorldModel,
    codec: Option<&'a LatentCodec>,
    env: &'a dyn Environment,
    starts: Vec<Vec<f64>>,
    threshold: f64,
    active_member: usize,
    state: Vec<f64>,
    steps: usize,
    done: bool,
}

impl<'a> PmdpSession<'a> {
    /// Start states are the dataset's episode-start states.
    pub fn new(
        world: &'a WorldModel,
        codec: Option<&'a LatentCodec>,
        env: &'a dyn Environment,
        dataset: &Dataset,
    ) -> Result<Self> {
        let spec = env.spec();
        if world.state_dim() != spec.state_dim || world.action_dim() != spec.action_dim {
            return Err(Error::dim("world/env state", spec.state_dim, world.state_dim()));
        }
        if let Some(c) = codec {
            if c.state_dim() != spec.state_dim || c.action_dim() != spec.action_dim {
                return Err(Error::dim("codec/env action", spec.action_dim, c.action_dim()));
            }
        }
        if !world.has_reward_model() && env.goals().is_none() {
            return Err(Error::Config("world has no reward nets and the environment defines no reward".into()));
        }
        let starts: Vec<Vec<f64>> = dataset
            .episode_starts()
            .into_iter()
            .map(|i| dataset.get(i).state.clone())
            .collect();
        if starts.is_empty() {
            return Err(Error::Config("dataset has no start states".into()));
        }
        Ok(Self {
            world,
            codec,
            env,
            starts,
            threshold: world.threshold,
            active_member: 0,
            state: Vec::new(),
            steps: 0,
            done: true,
        })
    }

    /// Disables pessimistic termination (threshold becomes infinite).
    pub fn without_termination(mut self) -> Self {
        self.threshold = f64::INFINITY;
        self
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn penalty(&self) -> f64 {
        self.world.penalty
    }

    pub fn active_member(&self) -> usize {
        self.active_member
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn start_states(&self) -> &[Vec<f64>] {
        &self.starts
    }

    pub fn reset_seeded(&mut self, seed: u64) -> Vec<f64> {
        self.reset_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn reset_with(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let i = rng.random_range(0..self.starts.len());
        self.active_member = rng.random_range(0..self.world.members());
        self.state = self.starts[i].clone();
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    /// Restores a snapshot of the episode state (member, state, step count).
    pub fn restore(&mut self, member: usize, state: Vec<f64>, steps: usize) -> Result<()> {
        if member >= self.world.members() || state.len() != self.world.state_dim() {
            return Err(Error::State("invalid snapshot".into()));
        }
        self.active_member = member;
        self.state = state;
        self.steps = steps;
        self.done = false;
        Ok(())
    }
}

impl RlEnv for PmdpSession<'_> {
    fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    fn goals(&self) -> Option<&dyn GoalConditioned> {
        self.env.goals()
    }

    fn has_decoder(&self) -> bool {
        self.codec.is_some()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(self.reset_with(rng))
    }

    fn step(&mut self, action: &[f64], goal: Option<&[f64]>) -> Result<Step> {
        if self.done {
            return Err(Error::State("step after episode end".into()));
        }
        let a = apply_action(self.codec, self.env.spec(), &self.state, action, goal)?;
        let m = self.world.discrepancy(&self.state, &a)?;
        let (next_state, reward) = self.world.predict_with_env(self.active_member, &self.state, &a, self.env)?;
        self.steps += 1;
        let pessimistic = m > self.threshold;
        let (reward, done) = if pessimistic {
            (-self.world.penalty, true)
        } else {
            let done = self.env.is_terminal(&next_state) || self.steps >= self.env.spec().horizon;
            (reward, done)
        };
        self.done = done;
        self.state = next_state.clone();
        Ok(Step {
            next_state,
            reward,
            done,
            terminated_by_pessimism: pessimistic,
            action: a,
        })
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn detach_decoder(&mut self) {
        self.codec = None;
    }
}

/// The true environment behind the same interface.
pub struct EnvSession<'a> {
    env: &'a dyn Environment,
    codec: Option<&'a LatentCodec>,
    state: Vec<f64>,
    steps: usize,
    done: bool,
}

impl<'a> EnvSession<'a> {
    pub fn new(env: &'a dyn Environment, codec: Option<&'a LatentCodec>) -> Self {
        Self {
            env,
            codec,
            state: Vec::new(),
            steps: 0,
            done: true,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

impl RlEnv for EnvSession<'_> {
    fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    fn goals(&self) -> Option<&dyn GoalConditioned> {
        self.env.goals()
    }

    fn has_decoder(&self) -> bool {
        self.codec.is_some()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.state = self.env.reset(rng);
        self.steps = 0;
        self.done = false;
        Ok(self.state.clone())
    }

    fn step(&mut self, action: &[f64], goal: Option<&[f64]>) -> Result<Step> {
        if self.done {
            return Err(Error::State("step after episode end".into()));
        }
        let a = apply_action(self.codec, self.env.spec(), &self.state, action, goal)?;
        let out = self.env.step(&self.state, &a);
        self.steps += 1;
        self.done = out.terminal || self.steps >= self.env.spec().horizon;
        self.state = out.next_state.clone();
        Ok(Step {
            next_state: out.next_state,
            reward: out.reward,
            done: self.done,
            terminated_by_pessimism: false,
            action: a,
        })
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn detach_decoder(&mut self) {
        self.codec = None;
    }
}

/// Conditions a goal-conditioned decoder on the low-level goal of a fixed
/// high-level task, so goal-free agents can act through it.
pub struct TaskGoal<'a> {
    inner: &'a mut dyn RlEnv,
    task: usize,
}

impl<'a> TaskGoal<'a> {
    pub fn new(inner: &'a mut dyn RlEnv, task: usize) -> Result<Self> {
        let n = inner.goals().map_or(0, |g| g.num_high_goals());
        if task >= n {
            return Err(Error::Config(format!("task {task} is not a high-level goal of this environment")));
        }
        Ok(Self { inner, task })
    }
}

impl RlEnv for TaskGoal<'_> {
    fn spec(&self) -> &EnvSpec {
        self.inner.spec()
    }

    fn goals(&self) -> Option<&dyn GoalConditioned> {
        self.inner.goals()
    }

    fn has_decoder(&self) -> bool {
        self.inner.has_decoder()
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        self.inner.reset(rng)
    }

    fn step(&mut self, action: &[f64], goal: Option<&[f64]>) -> Result<Step> {
        let own = match goal {
            Some(_) => None,
            None => self.inner.goals().map(|g| g.low_level_goal(self.inner.state(), self.task)),
        };
        let goal = goal.or(own.as_deref());
        self.inner.step(action, goal)
    }

    fn state(&self) -> &[f64] {
        self.inner.state()
    }

    fn detach_decoder(&mut self) {
        self.inner.detach_decoder();
    }
}
