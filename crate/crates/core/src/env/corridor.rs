use rand::{Rng, RngCore};

use super::{EnvSpec, Environment, StepOutcome};

pub const ACCEL: f64 = 0.1;
pub const DT: f64 = 0.05;
pub const HORIZON: usize = 200;
pub const RESET_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorridorTask {
    Forward,
    Backward,
}

/// Point mass in a corridor. State `(x, y, vx, vy)`, action is a 2-D thrust
/// in `[-1, 1]^2`. Leaving the band `|y| <= 1` ends the episode.
#[derive(Debug, Clone)]
pub struct CorridorRunner {
    spec: EnvSpec,
    task: CorridorTask,
}

impl CorridorRunner {
    pub fn new(task: CorridorTask) -> Self {
        let name = match task {
            CorridorTask::Forward => "corridor-forward",
            CorridorTask::Backward => "corridor-backward",
        };
        Self {
            spec: EnvSpec {
                name,
                state_dim: 4,
                action_dim: 2,
                goal_dim: 0,
                horizon: HORIZON,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
            },
            task,
        }
    }

    pub fn task(&self) -> CorridorTask {
        self.task
    }
}

impl Environment for CorridorRunner {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let x = rng.random_range(-RESET_NOISE..=RESET_NOISE);
        let y = rng.random_range(-RESET_NOISE..=RESET_NOISE);
        vec![x, y, 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let a = self.spec.clamp_action(action);
        let vx = (state[2] + ACCEL * a[0]).clamp(-1.0, 1.0);
        let vy = (state[3] + ACCEL * a[1]).clamp(-1.0, 1.0);
        let next_state = vec![state[0] + DT * vx, state[1] + DT * vy, vx, vy];
        let reward = self.reward(state, &a, &next_state);
        let terminal = self.is_terminal(&next_state);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        state[1].abs() > 1.0
    }

    fn reward(&self, _state: &[f64], _action: &[f64], next_state: &[f64]) -> f64 {
        match self.task {
            CorridorTask::Forward => next_state[2],
            CorridorTask::Backward => -next_state[2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reset_is_seeded_and_small() {
        let env = CorridorRunner::new(CorridorTask::Forward);
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(a, b);
        assert!(a[0].abs() <= 0.05 && a[1].abs() <= 0.05);
        assert_eq!(&a[2..], &[0.0, 0.0]);
    }

    #[test]
    fn rest_state_stays_put() {
        let env = CorridorRunner::new(CorridorTask::Forward);
        let s = [0.3, -0.2, 0.0, 0.0];
        let out = env.step(&s, &[0.0, 0.0]);
        assert_eq!(out.next_state, s.to_vec());
        assert_eq!(out.reward, 0.0);
        assert!(!out.terminal);
    }

    #[test]
    fn max_velocity_reward() {
        let env = CorridorRunner::new(CorridorTask::Forward);
        let out = env.step(&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]);
        assert_eq!(out.reward, 1.0);
        let out = env.step(&[0.0, 0.0, 1.0, 0.0], &[1.0, 0.0]);
        assert_eq!(out.next_state[2], 1.0);
        let back = CorridorRunner::new(CorridorTask::Backward);
        assert_eq!(back.step(&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0]).reward, -1.0);
    }

    #[test]
    fn leaving_the_band_terminates() {
        let env = CorridorRunner::new(CorridorTask::Forward);
        let out = env.step(&[0.0, 0.99, 0.0, 0.5], &[0.0, 1.0]);
        assert!(out.terminal);
    }

    #[test]
    fn actions_are_clamped() {
        let env = CorridorRunner::new(CorridorTask::Forward);
        let a = env.step(&[0.0; 4], &[5.0, -5.0]);
        let b = env.step(&[0.0; 4], &[1.0, -1.0]);
        assert_eq!(a, b);
    }
}
