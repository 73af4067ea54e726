//! Learners that treat a [`RlEnv`] as an online environment, plus the
//! behavior-cloning baseline and evaluation.

mod bc;
mod moc;
mod uof;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::GoalConditioned;
use crate::error::Result;
use crate::pmdp::RlEnv;

pub use bc::{bc_train, BcConfig, BcPolicy};
pub use moc::{
    flat_train, moc_train, FlatAgent, FlatConfig, MocConfig, MocReport, OptionSet, RolloutStats, TrainCallback,
};
pub use uof::{
    abstract_demonstration, her_relabel, uof_train, LowTransition, UofAgent, UofCallback, UofConfig, UofProgress, UofReport,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-density of `x` under a diagonal Gaussian.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean.iter().zip(log_std))
        .map(|(x, (m, ls))| {
            let z = (x - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Anything that can drive an episode in a [`RlEnv`].
pub trait Controller {
    /// `task` is the high-level goal to reach for goal-conditioned agents.
    fn begin_episode(&mut self, task: Option<usize>);
    /// Returns the action and the goal used to condition the decoder.
    fn act(
        &mut self,
        state: &[f64],
        goals: Option<&dyn GoalConditioned>,
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)>;
    /// Option (or high-level action) in control after the last `act`.
    fn current_option(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    /// Per episode, whether each high-level goal held at some step.
    pub success: Vec<Vec<bool>>,
    /// Per episode, the option in control at each step.
    pub options: Vec<Vec<Option<usize>>>,
}

impl EvalReport {
    pub fn mean_return(&self) -> f64 {
        if self.returns.is_empty() {
            return 0.0;
        }
        self.returns.iter().sum::<f64>() / self.returns.len() as f64
    }

    pub fn success_rate(&self, goal: usize) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|s| s.get(goal).copied().unwrap_or(false)).count() as f64 / self.success.len() as f64
    }
}

/// Deterministic-policy evaluation over `episodes` seeded episodes.
pub fn evaluate(
    agent: &mut dyn Controller,
    env: &mut dyn RlEnv,
    episodes: usize,
    seed: u64,
    task: Option<usize>,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EvalReport::default();
    let n_goals = env.goals().map_or(0, |g| g.num_high_goals());
    for _ in 0..episodes {
        let mut state = env.reset(&mut rng)?;
        agent.begin_episode(task);
        let mut total = 0.0;
        let mut reached = vec![false; n_goals];
        let mut trace = Vec::new();
        loop {
            let (action, goal) = agent.act(&state, env.goals(), true, &mut rng)?;
            trace.push(agent.current_option());
            let step = env.step(&action, goal.as_deref())?;
            total += step.reward;
            if let Some(g) = env.goals() {
                for (k, r) in reached.iter_mut().enumerate() {
                    *r |= g.high_goal_reached(&step.next_state, k);
                }
            }
            state = step.next_state;
            if step.done {
                break;
            }
        }
        report.returns.push(total);
        report.success.push(reached);
        report.options.push(trace);
    }
    Ok(report)
}

/// Uniform random actions in the environment's raw action box.
pub struct RandomController {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl RandomController {
    pub fn new(low: &[f64], high: &[f64]) -> Self {
        Self {
            low: low.to_vec(),
            high: high.to_vec(),
        }
    }
}

impl Controller for RandomController {
    fn begin_episode(&mut self, _task: Option<usize>) {}

    fn act(
        &mut self,
        _state: &[f64],
        _goals: Option<&dyn GoalConditioned>,
        _deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        use rand::Rng;
        let a = self
            .low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| rng.random_range(*l..=*h))
            .collect();
        Ok((a, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_log_prob_standard_normal_at_zero() {
        let lp = gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let p = softmax(&[1000.0, 1001.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[0.0, 1.0, -1.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_and_open_interval() {
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
