//! Planar pick-and-place chain: grasp block 1, set it on block 2, return home.
//!
//! State layout (10 values):
//! `[gx, gy, b1x, b1y, b2x, b2y, grasp, done_i, done_ii, done_iii]`.
//! Action: `(dx, dy, grip)` with `dx, dy` in `[-0.1, 0.1]` and `grip` in
//! `[-1, 1]` (positive closes). Low-level goals are
//! `(gripper position, block-1 position, grip width)` with width `+1`
//! closed-and-holding and `-1` open.

use rand::{Rng, RngCore};

use super::{EnvSpec, Environment, GoalConditioned, StepOutcome};

pub const GRIPPER_EPSILON: f64 = 0.05;
pub const GRIPPER_HOME: [f64; 2] = [0.5, 0.2];
pub const HORIZON: usize = 25;
pub const MAX_MOVE: f64 = 0.1;

pub const GRIPPER: usize = 0;
pub const BLOCK1: usize = 2;
pub const BLOCK2: usize = 4;
pub const GRASP: usize = 6;
pub const ACHIEVED: usize = 7;

const BLOCK1_REGION: ([f64; 2], [f64; 2]) = ([0.2, 0.4], [0.4, 0.6]);
const BLOCK2_REGION: ([f64; 2], [f64; 2]) = ([0.6, 0.8], [0.4, 0.6]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HighGoal {
    Grasp,
    Place,
    ReturnHome,
}

impl HighGoal {
    pub const ALL: [HighGoal; 3] = [HighGoal::Grasp, HighGoal::Place, HighGoal::ReturnHome];

    pub fn index(self) -> usize {
        match self {
            HighGoal::Grasp => 0,
            HighGoal::Place => 1,
            HighGoal::ReturnHome => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

fn flag(x: f64) -> bool {
    x > 0.5
}

fn near(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < GRIPPER_EPSILON)
}

#[derive(Debug, Clone)]
pub struct GripperChain {
    spec: EnvSpec,
    task: HighGoal,
}

impl GripperChain {
    pub fn new(task: HighGoal) -> Self {
        Self {
            spec: EnvSpec {
                name: "gripper-chain",
                state_dim: 10,
                action_dim: 3,
                goal_dim: 5,
                horizon: HORIZON,
                action_low: vec![-MAX_MOVE, -MAX_MOVE, -1.0],
                action_high: vec![MAX_MOVE, MAX_MOVE, 1.0],
            },
            task,
        }
    }

    pub fn task(&self) -> HighGoal {
        self.task
    }

    pub fn gripper(state: &[f64]) -> &[f64] {
        &state[GRIPPER..GRIPPER + 2]
    }

    pub fn block1(state: &[f64]) -> &[f64] {
        &state[BLOCK1..BLOCK1 + 2]
    }

    pub fn block2(state: &[f64]) -> &[f64] {
        &state[BLOCK2..BLOCK2 + 2]
    }

    pub fn holding(state: &[f64]) -> bool {
        flag(state[GRASP])
    }

    pub fn achieved(state: &[f64], high: usize) -> bool {
        flag(state[ACHIEVED + high])
    }
}

impl Environment for GripperChain {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut s = vec![0.0; self.spec.state_dim];
        s[GRIPPER] = GRIPPER_HOME[0];
        s[GRIPPER + 1] = GRIPPER_HOME[1];
        s[BLOCK1] = rng.random_range(BLOCK1_REGION.0[0]..=BLOCK1_REGION.0[1]);
        s[BLOCK1 + 1] = rng.random_range(BLOCK1_REGION.1[0]..=BLOCK1_REGION.1[1]);
        s[BLOCK2] = rng.random_range(BLOCK2_REGION.0[0]..=BLOCK2_REGION.0[1]);
        s[BLOCK2 + 1] = rng.random_range(BLOCK2_REGION.1[0]..=BLOCK2_REGION.1[1]);
        s
    }

    fn step(&self, state: &[f64], action: &[f64]) -> StepOutcome {
        let a = self.spec.clamp_action(action);
        let mut s = state.to_vec();
        let holding = Self::holding(state);
        for d in 0..2 {
            s[GRIPPER + d] = (state[GRIPPER + d] + a[d]).clamp(0.0, 1.0);
            if holding {
                s[BLOCK1 + d] = s[GRIPPER + d];
            }
        }
        if a[2] > 0.0 && !holding && near(Self::gripper(&s), Self::block1(&s)) {
            s[GRASP] = 1.0;
            s[BLOCK1] = s[GRIPPER];
            s[BLOCK1 + 1] = s[GRIPPER + 1];
        } else if a[2] < 0.0 && holding {
            s[GRASP] = 0.0;
        }
        let holding = Self::holding(&s);
        if holding {
            s[ACHIEVED] = 1.0;
        }
        if Self::achieved(&s, 0) && !holding && near(Self::block1(&s), Self::block2(&s)) {
            s[ACHIEVED + 1] = 1.0;
        }
        if Self::achieved(&s, 1) && near(Self::gripper(&s), &GRIPPER_HOME) {
            s[ACHIEVED + 2] = 1.0;
        }
        let reward = self.reward(state, &a, &s);
        StepOutcome {
            next_state: s,
            reward,
            terminal: false,
        }
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn reward(&self, _state: &[f64], _action: &[f64], next_state: &[f64]) -> f64 {
        self.high_reward(next_state, self.task.index())
    }

    fn goals(&self) -> Option<&dyn GoalConditioned> {
        Some(self)
    }
}

impl GoalConditioned for GripperChain {
    fn num_high_goals(&self) -> usize {
        3
    }

    fn low_level_goal(&self, state: &[f64], high: usize) -> Vec<f64> {
        let b1 = Self::block1(state);
        let b2 = Self::block2(state);
        match high {
            0 => vec![b1[0], b1[1], b1[0], b1[1], 1.0],
            1 => vec![b2[0], b2[1], b2[0], b2[1], -1.0],
            _ => vec![GRIPPER_HOME[0], GRIPPER_HOME[1], b2[0], b2[1], -1.0],
        }
    }

    fn achieved_goal(&self, state: &[f64]) -> Vec<f64> {
        let g = Self::gripper(state);
        let b1 = Self::block1(state);
        let width = if Self::holding(state) { 1.0 } else { -1.0 };
        vec![g[0], g[1], b1[0], b1[1], width]
    }

    fn low_goal_reached(&self, state: &[f64], goal: &[f64]) -> bool {
        let achieved = self.achieved_goal(state);
        near(&achieved[..4], &goal[..4]) && achieved[4] * goal[4] > 0.0
    }

    fn high_goal_reached(&self, state: &[f64], high: usize) -> bool {
        Self::achieved(state, high)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn start() -> Vec<f64> {
        GripperChain::new(HighGoal::Grasp).reset(&mut ChaCha8Rng::seed_from_u64(5))
    }

    #[test]
    fn reset_has_no_goals_achieved() {
        let env = GripperChain::new(HighGoal::Grasp);
        for seed in 0..20 {
            let s = env.reset(&mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(&s[GRASP..], &[0.0; 4]);
            assert_eq!(GripperChain::gripper(&s), &GRIPPER_HOME);
        }
    }

    #[test]
    fn closing_over_block_grasps_it() {
        let env = GripperChain::new(HighGoal::Grasp);
        let mut s = start();
        // park the gripper 0.03 from block 1 on each axis, then close
        s[GRIPPER] = s[BLOCK1] - 0.03;
        s[GRIPPER + 1] = s[BLOCK1 + 1] + 0.03;
        let out = env.step(&s, &[0.0, 0.0, 1.0]);
        assert_eq!(out.next_state[GRASP], 1.0);
        assert!(env.high_goal_reached(&out.next_state, 0));
        assert_eq!(out.reward, 0.0);
        // 0.06 away on one axis is outside the 0.05 tolerance
        s[GRIPPER] = s[BLOCK1] - 0.06;
        let out = env.step(&s, &[0.0, 0.0, 1.0]);
        assert_eq!(out.next_state[GRASP], 0.0);
        assert_eq!(out.reward, -1.0);
    }

    #[test]
    fn place_requires_grasp_first() {
        let env = GripperChain::new(HighGoal::Place);
        let mut s = start();
        s[BLOCK1] = s[BLOCK2];
        s[BLOCK1 + 1] = s[BLOCK2 + 1];
        let out = env.step(&s, &[0.0, 0.0, -1.0]);
        assert!(!env.high_goal_reached(&out.next_state, 1));
    }

    #[test]
    fn scripted_chain_sets_bits_in_order_and_keeps_them() {
        let env = GripperChain::new(HighGoal::ReturnHome);
        let mut s = start();
        let mut seen = [false; 3];
        for _ in 0..HORIZON {
            let phase = (0..3).find(|&k| !env.high_goal_reached(&s, k)).unwrap_or(2);
            let g = env.low_level_goal(&s, phase);
            let target = if phase == 0 || GripperChain::holding(&s) || phase == 2 {
                [g[0], g[1]]
            } else {
                [s[BLOCK1], s[BLOCK1 + 1]]
            };
            let dx = (target[0] - s[GRIPPER]).clamp(-MAX_MOVE, MAX_MOVE);
            let dy = (target[1] - s[GRIPPER + 1]).clamp(-MAX_MOVE, MAX_MOVE);
            let arrive = (s[GRIPPER] + dx - target[0]).abs() < GRIPPER_EPSILON
                && (s[GRIPPER + 1] + dy - target[1]).abs() < GRIPPER_EPSILON;
            let grip = match phase {
                0 => if arrive { 1.0 } else { -1.0 },
                1 => if GripperChain::holding(&s) && arrive { -1.0 } else { 1.0 },
                _ => -1.0,
            };
            let next = env.step(&s, &[dx, dy, grip]).next_state;
            for k in 0..3 {
                if seen[k] {
                    assert!(env.high_goal_reached(&next, k), "goal {k} became unset");
                }
                seen[k] |= env.high_goal_reached(&next, k);
                if seen[k] && k > 0 {
                    assert!(seen[k - 1]);
                }
            }
            s = next;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn low_level_goals_match_their_high_goals() {
        let env = GripperChain::new(HighGoal::Grasp);
        let s = start();
        let g0 = env.low_level_goal(&s, 0);
        assert_eq!(&g0[..2], GripperChain::block1(&s));
        assert_eq!(g0[4], 1.0);
        assert!(!env.low_goal_reached(&s, &g0));
        let g2 = env.low_level_goal(&s, 2);
        assert_eq!(&g2[..2], &GRIPPER_HOME);
    }
}
