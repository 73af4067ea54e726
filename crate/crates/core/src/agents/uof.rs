//! Goal-conditioned two-level agent: a high-level Q-function over the
//! environment's predefined low-level goals, learned with intra-option
//! targets relabeled across every high-level goal, and a goal-conditioned
//! deterministic low-level policy trained with hindsight relabeling.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{argmax, Controller};
use crate::data::NormStats;
use crate::env::GoalConditioned;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, AdamState, Activation, Mlp, Tape};
use crate::pmdp::RlEnv;
use crate::util::{format_floats, parse_floats, KeyValues};

/// The action sequence that reaches high-level goal `goal`: `0, 1, ..., goal`.
pub fn abstract_demonstration(goal: usize) -> Vec<usize> {
    (0..=goal).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UofConfig {
    pub episodes: usize,
    /// High-level goals sampled as tasks during training.
    pub tasks: Vec<usize>,
    /// One sequence per high-level goal; `None` disables demonstrations.
    pub demonstrations: Option<Vec<Vec<usize>>>,
    pub demo_start: f64,
    pub demo_end: f64,
    /// Episodes over which the demonstration probability decays linearly.
    pub demo_decay_episodes: usize,
    pub epsilon: f64,
    pub high_learning_rate: f64,
    pub high_gamma: f64,
    pub actor_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub updates_per_episode: usize,
    pub her_relabels: usize,
    /// Exploration noise on the low-level unit action.
    pub noise: f64,
    /// Probability of a uniformly random low-level unit action.
    pub random_eps: f64,
    pub action_l2: f64,
    pub replay_capacity: usize,
    /// Replace the low-level policy by uniform random actions (control runs).
    pub random_low_level: bool,
    /// Episodes between progress callbacks.
    pub report_every: usize,
    pub seed: u64,
}

impl Default for UofConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            tasks: vec![0, 1, 2],
            demonstrations: Some((0..3).map(abstract_demonstration).collect()),
            demo_start: 1.0,
            demo_end: 0.1,
            demo_decay_episodes: 2500,
            epsilon: 0.1,
            high_learning_rate: 1e-3,
            high_gamma: 0.95,
            actor_learning_rate: 1e-3,
            critic_learning_rate: 1e-3,
            gamma: 0.98,
            tau: 0.05,
            batch_size: 128,
            updates_per_episode: 20,
            her_relabels: 4,
            noise: 0.2,
            random_eps: 0.2,
            action_l2: 1.0,
            replay_capacity: 200_000,
            random_low_level: false,
            report_every: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UofAgent {
    high_q: Mlp,
    actor: Mlp,
    critic: Mlp,
    norm: NormStats,
    n_high: usize,
    goal_dim: usize,
    /// `Some(scale)`: the low-level acts in a latent space, `z = scale * u`.
    latent_scale: Option<f64>,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    pub max_option_steps: usize,
    task: usize,
    current: Option<(usize, Vec<f64>, usize)>,
}

impl UofAgent {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        n_high: usize,
        goal_dim: usize,
        hidden: &[usize],
        norm: NormStats,
        action_low: &[f64],
        action_high: &[f64],
        latent_scale: Option<f64>,
        max_option_steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let sd = norm.dim();
        let ad = action_low.len();
        let high_q = Mlp::with_hidden(sd + n_high, hidden, n_high, Activation::Relu, Activation::Identity, rng)?;
        let mut actor = Mlp::with_hidden(sd + goal_dim, hidden, ad, Activation::Relu, Activation::Tanh, rng)?;
        actor.scale_output_layer(0.1);
        let critic = Mlp::with_hidden(sd + goal_dim + ad, hidden, 1, Activation::Relu, Activation::Identity, rng)?;
        Ok(Self {
            high_q,
            actor,
            critic,
            norm,
            n_high,
            goal_dim,
            latent_scale,
            action_low: action_low.to_vec(),
            action_high: action_high.to_vec(),
            max_option_steps,
            task: n_high - 1,
            current: None,
        })
    }

    pub fn num_high_actions(&self) -> usize {
        self.n_high
    }

    pub fn latent_actions(&self) -> bool {
        self.latent_scale.is_some()
    }

    fn high_input(&self, state: &[f64], task: usize, out: &mut Vec<f64>) {
        self.norm.normalize_into(state, out);
        out.extend((0..self.n_high).map(|k| f64::from(u8::from(k == task))));
    }

    pub fn high_values(&self, state: &[f64], task: usize) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.high_q.input_dim());
        self.high_input(state, task, &mut x);
        self.high_q.forward(&x)
    }

    fn low_input(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        self.norm.normalize_into(state, out);
        out.extend_from_slice(goal);
    }

    pub fn low_unit_action(&self, state: &[f64], goal: &[f64]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.actor.input_dim());
        self.low_input(state, goal, &mut x);
        self.actor.forward(&x)
    }

    /// Maps a unit action in `[-1, 1]^d` to what the environment consumes.
    pub fn unit_to_action(&self, unit: &[f64]) -> Vec<f64> {
        match self.latent_scale {
            Some(scale) => unit.iter().map(|u| scale * u).collect(),
            None => unit
                .iter()
                .zip(self.action_low.iter().zip(&self.action_high))
                .map(|(u, (lo, hi))| lo + (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo))
                .collect(),
        }
    }

    fn option_over(&self, state: &[f64], goals: &dyn GoalConditioned) -> bool {
        match &self.current {
            None => true,
            Some((_, goal, steps)) => *steps >= self.max_option_steps || goals.low_goal_reached(state, goal),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.high_q, &dir.join("high_q.ofnn"))?;
        checkpoint::save(&self.actor, &dir.join("actor.ofnn"))?;
        checkpoint::save(&self.critic, &dir.join("critic.ofnn"))?;
        let mut kv = KeyValues::default();
        kv.set("kind", "uof");
        kv.set("options", self.n_high);
        kv.set("goal_dim", self.goal_dim);
        kv.set("latent_actions", self.latent_scale.is_some());
        kv.set("latent_scale", format_floats(&[self.latent_scale.unwrap_or(0.0)]));
        kv.set("action_low", format_floats(&self.action_low));
        kv.set("action_high", format_floats(&self.action_high));
        kv.set("max_option_steps", self.max_option_steps);
        kv.set("norm_mean", format_floats(&self.norm.mean));
        kv.set("norm_std", format_floats(&self.norm.std));
        kv.write(&dir.join("agent.meta"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("agent.meta"))?;
        let n_high: usize = kv.parse("options")?;
        let latent: bool = kv.parse("latent_actions")?;
        let scale = parse_floats(kv.get("latent_scale")?)?[0];
        Ok(Self {
            high_q: checkpoint::load(&dir.join("high_q.ofnn"))?,
            actor: checkpoint::load(&dir.join("actor.ofnn"))?,
            critic: checkpoint::load(&dir.join("critic.ofnn"))?,
            norm: NormStats {
                mean: parse_floats(kv.get("norm_mean")?)?,
                std: parse_floats(kv.get("norm_std")?)?,
            },
            n_high,
            goal_dim: kv.parse("goal_dim")?,
            latent_scale: latent.then_some(scale),
            action_low: parse_floats(kv.get("action_low")?)?,
            action_high: parse_floats(kv.get("action_high")?)?,
            max_option_steps: kv.parse("max_option_steps")?,
            task: n_high - 1,
            current: None,
        })
    }
}

impl Controller for UofAgent {
    fn begin_episode(&mut self, task: Option<usize>) {
        self.task = task.unwrap_or(self.n_high - 1).min(self.n_high - 1);
        self.current = None;
    }

    fn act(
        &mut self,
        state: &[f64],
        goals: Option<&dyn GoalConditioned>,
        _deterministic: bool,
        _rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let goals = goals.ok_or_else(|| Error::Config("the hierarchical goal agent needs a goal environment".into()))?;
        if self.option_over(state, goals) {
            let k = argmax(&self.high_values(state, self.task)?);
            self.current = Some((k, goals.low_level_goal(state, k), 0));
        }
        let (_, goal, steps) = self.current.as_mut().expect("option selected above");
        *steps += 1;
        let goal = goal.clone();
        let unit = self.low_unit_action(state, &goal)?;
        Ok((self.unit_to_action(&unit), Some(goal)))
    }

    fn current_option(&self) -> Option<usize> {
        self.current.as_ref().map(|c| c.0)
    }
}

struct Ring<T> {
    items: Vec<T>,
    capacity: usize,
    next: usize,
}

impl<T> Ring<T> {
    fn new(capacity: usize) -> Self {
        Self {
            items: Vec::new(),
            capacity: capacity.max(1),
            next: 0,
        }
    }

    fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    fn len(&self) -> usize {
        self.items.len()
    }
}

/// A low-level transition; relabeling rewrites only `goal` and `reward`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowTransition {
    pub state: Vec<f64>,
    pub unit_action: Vec<f64>,
    pub goal: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

struct HighTransition {
    state: Vec<f64>,
    option: usize,
    next_state: Vec<f64>,
    option_ends: bool,
}

/// Hindsight "future" relabeling of one episode: the original transition
/// plus `k` copies whose goal is achieved later in the same episode.
pub fn her_relabel(
    episode: &[LowTransition],
    goals: &dyn GoalConditioned,
    k: usize,
    rng: &mut dyn RngCore,
) -> Vec<LowTransition> {
    let mut out = Vec::with_capacity(episode.len() * (k + 1));
    for (t, tr) in episode.iter().enumerate() {
        out.push(tr.clone());
        for _ in 0..k {
            let j = rng.random_range(t..episode.len());
            let goal = goals.achieved_goal(&episode[j].next_state);
            let reward = goals.low_reward(&tr.next_state, &goal);
            out.push(LowTransition {
                goal,
                reward,
                ..tr.clone()
            });
        }
    }
    out
}

/// Training progress over the episodes since the previous report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UofProgress {
    pub episodes: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub success_rate: f64,
}

pub type UofCallback<'c> = dyn FnMut(&mut UofAgent, &UofProgress) -> Result<()> + 'c;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UofReport {
    /// `(task, reached)` per training episode.
    pub episodes: Vec<(usize, bool)>,
}

struct Learner {
    high_target: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    high_opt: AdamState,
    actor_opt: AdamState,
    critic_opt: AdamState,
    tapes: [Tape; 3],
}

fn ddpg_update(agent: &mut UofAgent, l: &mut Learner, batch: &[&LowTransition], config: &UofConfig) -> Result<()> {
    let b = batch.len();
    let ad = agent.action_low.len();
    let sgw = agent.norm.dim() + agent.goal_dim;
    let mut x = Vec::with_capacity(b * sgw);
    let mut xn = Vec::with_capacity(b * sgw);
    for t in batch {
        agent.low_input(&t.state, &t.goal, &mut x);
        agent.low_input(&t.next_state, &t.goal, &mut xn);
    }
    let with_action = |sg: &[f64], u: &[f64]| {
        let mut out = Vec::with_capacity(b * (sgw + ad));
        for r in 0..b {
            out.extend_from_slice(&sg[r * sgw..(r + 1) * sgw]);
            out.extend_from_slice(&u[r * ad..(r + 1) * ad]);
        }
        out
    };
    let un = l.actor_target.forward_batch(&xn, b)?;
    let qn = l.critic_target.forward_batch(&with_action(&xn, &un), b)?;
    let floor = -1.0 / (1.0 - config.gamma);
    let y: Vec<f64> = batch
        .iter()
        .zip(&qn)
        .map(|(t, q)| (t.reward + config.gamma * q).clamp(floor, 0.0))
        .collect();
    let u_data: Vec<f64> = batch.iter().flat_map(|t| t.unit_action.iter().copied()).collect();
    let [actor_tape, critic_tape, critic_tape2] = &mut l.tapes;
    let q = agent.critic.forward_recorded(&with_action(&x, &u_data), b, critic_tape)?;
    let gq: Vec<f64> = q.iter().zip(&y).map(|(q, y)| 2.0 * (q - y) / b as f64).collect();
    let g = agent.critic.backward(critic_tape, &gq)?;
    l.critic_opt.step(&mut agent.critic, &g.params)?;

    let u_pi = agent.actor.forward_recorded(&x, b, actor_tape)?;
    agent.critic.forward_recorded(&with_action(&x, &u_pi), b, critic_tape2)?;
    let g = agent.critic.backward(critic_tape2, &vec![-1.0 / b as f64; b])?;
    let mut gu = vec![0.0; b * ad];
    for r in 0..b {
        for d in 0..ad {
            gu[r * ad + d] = g.input[r * (sgw + ad) + sgw + d] + config.action_l2 * 2.0 * u_pi[r * ad + d] / (b * ad) as f64;
        }
    }
    let ga = agent.actor.backward(actor_tape, &gu)?;
    l.actor_opt.step(&mut agent.actor, &ga.params)?;
    l.actor_target.soft_update_from(&agent.actor, config.tau);
    l.critic_target.soft_update_from(&agent.critic, config.tau);
    Ok(())
}

fn high_update(
    agent: &mut UofAgent,
    l: &mut Learner,
    batch: &[&HighTransition],
    goals: &dyn GoalConditioned,
    config: &UofConfig,
) -> Result<()> {
    let n = agent.n_high;
    let rows = batch.len() * n;
    let mut x = Vec::with_capacity(rows * agent.high_q.input_dim());
    let mut xn = Vec::with_capacity(rows * agent.high_q.input_dim());
    for t in batch {
        for task in 0..n {
            agent.high_input(&t.state, task, &mut x);
            agent.high_input(&t.next_state, task, &mut xn);
        }
    }
    let qn = l.high_target.forward_batch(&xn, rows)?;
    let [tape, _, _] = &mut l.tapes;
    let q = agent.high_q.forward_recorded(&x, rows, tape)?;
    let mut grad = vec![0.0; rows * n];
    for (i, t) in batch.iter().enumerate() {
        for task in 0..n {
            let r = i * n + task;
            let reached = goals.high_goal_reached(&t.next_state, task);
            let next = &qn[r * n..(r + 1) * n];
            let target = if reached {
                0.0
            } else {
                let cont = if t.option_ends {
                    next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    next[t.option]
                };
                -1.0 + config.high_gamma * cont
            };
            grad[r * n + t.option] = 2.0 * (q[r * n + t.option] - target) / rows as f64;
        }
    }
    let g = agent.high_q.backward(tape, &grad)?;
    l.high_opt.step(&mut agent.high_q, &g.params)?;
    l.high_target.soft_update_from(&agent.high_q, config.tau);
    Ok(())
}

pub fn uof_train(
    env: &mut dyn RlEnv,
    agent: &mut UofAgent,
    config: &UofConfig,
    mut callback: Option<&mut UofCallback<'_>>,
) -> Result<UofReport> {
    if env.goals().is_none() {
        return Err(Error::Config("the hierarchical goal agent needs a goal environment".into()));
    }
    if let Some(demos) = &config.demonstrations {
        for &task in &config.tasks {
            let demo = demos
                .get(task)
                .ok_or_else(|| Error::Config(format!("no demonstration for high-level goal {task}")))?;
            if demo.is_empty() || demo.iter().any(|&k| k >= agent.n_high) {
                return Err(Error::Config(format!("invalid demonstration for high-level goal {task}")));
            }
        }
    }
    if config.tasks.is_empty() || config.tasks.iter().any(|&t| t >= agent.n_high) {
        return Err(Error::Config("training tasks must index high-level goals".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut learner = Learner {
        high_target: agent.high_q.clone(),
        actor_target: agent.actor.clone(),
        critic_target: agent.critic.clone(),
        high_opt: AdamState::for_net(&agent.high_q, config.high_learning_rate),
        actor_opt: AdamState::for_net(&agent.actor, config.actor_learning_rate),
        critic_opt: AdamState::for_net(&agent.critic, config.critic_learning_rate),
        tapes: [Tape::new(), Tape::new(), Tape::new()],
    };
    let mut low_replay: Ring<LowTransition> = Ring::new(config.replay_capacity);
    let mut high_replay: Ring<HighTransition> = Ring::new(config.replay_capacity);
    let mut report = UofReport::default();
    let ad = agent.action_low.len();
    let mut steps_total = 0usize;
    let (mut window_return, mut window_success, mut window_n) = (0.0, 0usize, 0usize);

    for episode in 0..config.episodes {
        let frac = (episode as f64 / config.demo_decay_episodes.max(1) as f64).min(1.0);
        let p_demo = config.demo_start + (config.demo_end - config.demo_start) * frac;
        let task = config.tasks[rng.random_range(0..config.tasks.len())];
        let mut state = env.reset(&mut rng)?;
        let mut current: Option<(usize, Vec<f64>, usize)> = None;
        let mut demo_pos = 0usize;
        let mut low_episode = Vec::new();
        let success = loop {
            let goals = env.goals().expect("checked above");
            let over = match &current {
                None => true,
                Some((_, g, steps)) => *steps >= agent.max_option_steps || goals.low_goal_reached(&state, g),
            };
            if over {
                if let (Some((k, g, _)), Some(demos)) = (&current, &config.demonstrations) {
                    if goals.low_goal_reached(&state, g) && demos[task].get(demo_pos) == Some(k) {
                        demo_pos += 1;
                    }
                }
                let k = match &config.demonstrations {
                    Some(demos) if rng.random::<f64>() < p_demo => {
                        let d = &demos[task];
                        d[demo_pos.min(d.len() - 1)]
                    }
                    _ if rng.random::<f64>() < config.epsilon => rng.random_range(0..agent.n_high),
                    _ => argmax(&agent.high_values(&state, task)?),
                };
                current = Some((k, goals.low_level_goal(&state, k), 0));
            }
            let (k, goal, steps) = current.as_mut().expect("option selected above");
            let unit: Vec<f64> = if config.random_low_level || rng.random::<f64>() < config.random_eps {
                (0..ad).map(|_| rng.random_range(-1.0..=1.0)).collect()
            } else {
                agent
                    .low_unit_action(&state, goal)?
                    .into_iter()
                    .map(|u| (u + config.noise * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
                    .collect()
            };
            let action = agent.unit_to_action(&unit);
            let step = env.step(&action, Some(goal))?;
            *steps += 1;
            steps_total += 1;
            window_return += step.reward;
            let goals = env.goals().expect("checked above");
            let reached_low = goals.low_goal_reached(&step.next_state, goal);
            high_replay.push(HighTransition {
                state: state.clone(),
                option: *k,
                next_state: step.next_state.clone(),
                option_ends: reached_low,
            });
            low_episode.push(LowTransition {
                state: state.clone(),
                unit_action: unit,
                goal: goal.clone(),
                reward: goals.low_reward(&step.next_state, goal),
                next_state: step.next_state.clone(),
            });
            let reached = goals.high_goal_reached(&step.next_state, task);
            state = step.next_state;
            if step.done || reached {
                break reached;
            }
        };
        report.episodes.push((task, success));
        window_n += 1;
        window_success += usize::from(success);
        if window_n >= config.report_every.max(1) || episode + 1 == config.episodes {
            if let Some(cb) = callback.as_mut() {
                let progress = UofProgress {
                    episodes: episode + 1,
                    steps: steps_total,
                    mean_return: window_return / window_n as f64,
                    success_rate: window_success as f64 / window_n as f64,
                };
                cb(agent, &progress)?;
            }
            (window_return, window_success, window_n) = (0.0, 0, 0);
        }
        let goals = env.goals().expect("checked above");
        for t in her_relabel(&low_episode, goals, config.her_relabels, &mut rng) {
            low_replay.push(t);
        }
        if low_replay.len() < config.batch_size {
            continue;
        }
        for _ in 0..config.updates_per_episode {
            if !config.random_low_level {
                let batch: Vec<&LowTransition> = (0..config.batch_size)
                    .map(|_| &low_replay.items[rng.random_range(0..low_replay.len())])
                    .collect();
                ddpg_update(agent, &mut learner, &batch, config)?;
            }
            let hb = config.batch_size.min(high_replay.len());
            let batch: Vec<&HighTransition> = (0..hb)
                .map(|_| &high_replay.items[rng.random_range(0..high_replay.len())])
                .collect();
            high_update(agent, &mut learner, &batch, goals, config)?;
        }
        if !(agent.actor.is_finite() && agent.critic.is_finite() && agent.high_q.is_finite()) {
            return Err(Error::NonFinite("hierarchical goal agent parameters".into()));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Environment, GripperChain, HighGoal};

    #[test]
    fn demonstrations_list_the_chain() {
        assert_eq!(abstract_demonstration(0), vec![0]);
        assert_eq!(abstract_demonstration(2), vec![0, 1, 2]);
    }

    #[test]
    fn relabeling_keeps_dynamics_and_recomputes_reward() {
        let env = GripperChain::new(HighGoal::ReturnHome);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = env.reset(&mut rng);
        let goal = env.low_level_goal(&s, 0);
        let mut episode = Vec::new();
        for _ in 0..6 {
            let a = [0.05, 0.03, -1.0];
            let next = env.step(&s, &a).next_state;
            episode.push(LowTransition {
                state: s.clone(),
                unit_action: a.to_vec(),
                goal: goal.clone(),
                reward: env.low_reward(&next, &goal),
                next_state: next.clone(),
            });
            s = next;
        }
        let out = her_relabel(&episode, &env, 4, &mut rng);
        assert_eq!(out.len(), 30);
        for (i, t) in out.iter().enumerate() {
            let orig = &episode[i / 5];
            assert_eq!((&t.state, &t.unit_action, &t.next_state), (&orig.state, &orig.unit_action, &orig.next_state));
            assert_eq!(t.reward, env.low_reward(&t.next_state, &t.goal));
        }
        // the final transition relabeled with its own outcome is a success
        assert!(out[25..].iter().skip(1).all(|t| t.reward == 0.0));
    }
}
