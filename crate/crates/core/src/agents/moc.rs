//! Option-critic with clipped intra-option updates applied to every option
//! (weighted by the probability that it would be in control), and the flat
//! clipped-surrogate actor-critic obtained with a single option.

use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{argmax, gaussian_log_prob, sigmoid, softmax, Controller};
use crate::data::NormStats;
use crate::env::GoalConditioned;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, clip_grad_norm, AdamState, Activation, Mlp, Tape};
use crate::pmdp::RlEnv;
use crate::util::{format_floats, parse_floats, KeyValues};

const LOG_STD_RANGE: (f64, f64) = (-5.0, 2.0);
const TERMINATION_LOGIT_LIMIT: f64 = 30.0;

/// `N` options sharing a trunk: per-option Gaussian heads, termination heads
/// and a softmax policy over options; a separate critic gives `Q(s, o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptionSet {
    n: usize,
    action_dim: usize,
    actor: Mlp,
    critic: Mlp,
    log_std: Vec<f64>,
    norm: NormStats,
    current: Option<usize>,
}

/// Actor outputs for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub means: Vec<Vec<f64>>,
    pub termination: Vec<f64>,
    pub option_probs: Vec<f64>,
}

impl OptionSet {
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        action_dim: usize,
        hidden: &[usize],
        norm: NormStats,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("an option set needs at least one option".into()));
        }
        let sd = norm.dim();
        let mut actor = Mlp::with_hidden(sd, hidden, n * action_dim + 2 * n, Activation::Tanh, Activation::Identity, rng)?;
        actor.scale_output_layer(0.01);
        let critic = Mlp::with_hidden(sd, hidden, n, Activation::Tanh, Activation::Identity, rng)?;
        Ok(Self {
            n,
            action_dim,
            actor,
            critic,
            log_std: vec![init_log_std; n * action_dim],
            norm,
            current: None,
        })
    }

    pub fn num_options(&self) -> usize {
        self.n
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn split(&self, out: &[f64]) -> Heads {
        let (n, a) = (self.n, self.action_dim);
        let means = (0..n).map(|o| out[o * a..(o + 1) * a].to_vec()).collect();
        let termination = out[n * a..n * a + n]
            .iter()
            .map(|x| sigmoid(x.clamp(-TERMINATION_LOGIT_LIMIT, TERMINATION_LOGIT_LIMIT)))
            .collect();
        let option_probs = softmax(&out[n * a + n..n * a + 2 * n]);
        Heads {
            means,
            termination,
            option_probs,
        }
    }

    pub fn heads(&self, state: &[f64]) -> Result<Heads> {
        Ok(self.split(&self.actor.forward(&self.norm.normalize(state))?))
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.critic.forward(&self.norm.normalize(state))
    }

    fn batch_inputs(&self, states: &[&[f64]]) -> Vec<f64> {
        let mut x = Vec::with_capacity(states.len() * self.state_dim());
        for s in states {
            self.norm.normalize_into(s, &mut x);
        }
        x
    }

    fn option_log_std(&self, o: usize) -> &[f64] {
        &self.log_std[o * self.action_dim..(o + 1) * self.action_dim]
    }

    pub fn save(&self, dir: &Path, kind: &str, latent: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.actor, &dir.join("actor.ofnn"))?;
        checkpoint::save(&self.critic, &dir.join("critic.ofnn"))?;
        let mut kv = KeyValues::default();
        kv.set("kind", kind);
        kv.set("options", self.n);
        kv.set("action_dim", self.action_dim);
        kv.set("latent_actions", latent);
        kv.set("log_std", format_floats(&self.log_std));
        kv.set("norm_mean", format_floats(&self.norm.mean));
        kv.set("norm_std", format_floats(&self.norm.std));
        kv.write(&dir.join("agent.meta"))
    }

    /// Returns the agent, its kind and whether it acts in a latent space.
    pub fn load(dir: &Path) -> Result<(Self, String, bool)> {
        let kv = KeyValues::read(&dir.join("agent.meta"))?;
        let n: usize = kv.parse("options")?;
        let action_dim: usize = kv.parse("action_dim")?;
        let actor = checkpoint::load(&dir.join("actor.ofnn"))?;
        let critic = checkpoint::load(&dir.join("critic.ofnn"))?;
        let norm = NormStats {
            mean: parse_floats(kv.get("norm_mean")?)?,
            std: parse_floats(kv.get("norm_std")?)?,
        };
        let log_std = parse_floats(kv.get("log_std")?)?;
        if actor.output_dim() != n * action_dim + 2 * n || critic.output_dim() != n || log_std.len() != n * action_dim {
            return Err(Error::Config("agent checkpoint shapes disagree with its metadata".into()));
        }
        let agent = Self {
            n,
            action_dim,
            actor,
            critic,
            log_std,
            norm,
            current: None,
        };
        Ok((agent, kv.get("kind")?.to_string(), kv.parse("latent_actions")?))
    }
}

fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Controller for OptionSet {
    fn begin_episode(&mut self, _task: Option<usize>) {
        self.current = None;
    }

    fn act(
        &mut self,
        state: &[f64],
        _goals: Option<&dyn GoalConditioned>,
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let h = self.heads(state)?;
        let terminate = match self.current {
            None => true,
            Some(o) if deterministic => h.termination[o] > 0.5,
            Some(o) => rng.random::<f64>() < h.termination[o],
        };
        if terminate {
            self.current = Some(if deterministic {
                argmax(&h.option_probs)
            } else {
                sample_index(&h.option_probs, rng)
            });
        }
        let o = self.current.unwrap_or(0);
        let action = if deterministic {
            h.means[o].clone()
        } else {
            h.means[o]
                .iter()
                .zip(self.option_log_std(o))
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        Ok((action, None))
    }

    fn current_option(&self) -> Option<usize> {
        self.current
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MocConfig {
    pub total_steps: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    /// Shared by the intra-option, termination and high-level heads.
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    /// Weight of the all-option update; 0 updates only the executing option.
    pub eta: f64,
    /// Termination regularizer added to the advantage of continuing.
    pub xi: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for MocConfig {
    fn default() -> Self {
        Self {
            total_steps: 1_000_000,
            rollout_steps: 2048,
            epochs: 10,
            minibatch: 64,
            learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            eta: 0.7,
            xi: 0.01,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            seed: 0,
        }
    }
}

/// Statistics of one rollout, passed to the training callback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutStats {
    pub total_steps: usize,
    pub completed_episodes: usize,
    pub mean_return: Option<f64>,
    pub pessimistic_terminations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MocReport {
    pub rollouts: Vec<RolloutStats>,
    /// Rollouts whose update was skipped for non-finite advantages.
    pub skipped_updates: usize,
}

/// Called after every update with the step count so far; returning `false`
/// stops training early.
pub type TrainCallback<'c> = dyn FnMut(&mut OptionSet, &RolloutStats) -> Result<bool> + 'c;

struct Sample {
    state: Vec<f64>,
    next_state: Vec<f64>,
    option: usize,
    decision: bool,
    action: Vec<f64>,
    old_log_probs: Vec<f64>,
    old_option_prob: f64,
    weights: Vec<f64>,
    reward: f64,
    done: bool,
}

/// Per-sample quantities computed with the pre-update networks.
struct Targets {
    returns: Vec<f64>,
    advantages: Vec<Vec<f64>>,
    high_advantage: Vec<f64>,
    termination_advantage: Vec<Vec<f64>>,
}

/// Probability that option `o` controls step `t`, mixed with the indicator
/// of the executing option: `(1 - eta) 1[o = executing] + eta P(o | s, prev)`.
pub fn multi_update_weights(
    eta: f64,
    executing: usize,
    previous: Option<usize>,
    prev_termination: f64,
    option_probs: &[f64],
) -> Vec<f64> {
    option_probs
        .iter()
        .enumerate()
        .map(|(o, &p)| {
            let in_control = match previous {
                None => p,
                Some(prev) => (1.0 - prev_termination) * f64::from(u8::from(o == prev)) + prev_termination * p,
            };
            (1.0 - eta) * f64::from(u8::from(o == executing)) + eta * in_control
        })
        .collect()
}

fn collect(
    env: &mut dyn RlEnv,
    agent: &OptionSet,
    config: &MocConfig,
    rng: &mut ChaCha8Rng,
    state: &mut Option<(Vec<f64>, Option<usize>, f64)>,
    stats: &mut RolloutStats,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::with_capacity(config.rollout_steps);
    let mut returns = Vec::new();
    for _ in 0..config.rollout_steps {
        let (s, prev, ep_return) = match state.take() {
            Some(x) => x,
            None => (env.reset(rng)?, None, 0.0),
        };
        let h = agent.heads(&s)?;
        let prev_beta = prev.map_or(1.0, |p| h.termination[p]);
        let decision = match prev {
            None => true,
            Some(_) => rng.random::<f64>() < prev_beta,
        };
        let option = if decision {
            sample_index(&h.option_probs, rng)
        } else {
            prev.unwrap_or(0)
        };
        let weights = multi_update_weights(config.eta, option, prev, prev_beta, &h.option_probs);
        let ls = agent.option_log_std(option);
        let action: Vec<f64> = h.means[option]
            .iter()
            .zip(ls)
            .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let old_log_probs = (0..agent.n)
            .map(|o| gaussian_log_prob(&action, &h.means[o], agent.option_log_std(o)))
            .collect();
        let step = env.step(&action, None)?;
        stats.total_steps += 1;
        stats.pessimistic_terminations += usize::from(step.terminated_by_pessimism);
        let total = ep_return + step.reward;
        samples.push(Sample {
            state: s,
            next_state: step.next_state.clone(),
            option,
            decision,
            action,
            old_log_probs,
            old_option_prob: h.option_probs[option],
            weights,
            reward: step.reward,
            done: step.done,
        });
        if step.done {
            returns.push(total);
        } else {
            *state = Some((step.next_state, Some(option), total));
        }
    }
    stats.completed_episodes = returns.len();
    stats.mean_return = (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64);
    Ok(samples)
}

fn compute_targets(agent: &OptionSet, samples: &[Sample], config: &MocConfig) -> Result<Targets> {
    let n = agent.n;
    let t_len = samples.len();
    let states: Vec<&[f64]> = samples.iter().map(|s| s.state.as_slice()).collect();
    let next: Vec<&[f64]> = samples.iter().map(|s| s.next_state.as_slice()).collect();
    let q = agent.critic.forward_batch(&agent.batch_inputs(&states), t_len)?;
    let q_next = agent.critic.forward_batch(&agent.batch_inputs(&next), t_len)?;
    let out_next = agent.actor.forward_batch(&agent.batch_inputs(&next), t_len)?;
    let out_now = agent.actor.forward_batch(&agent.batch_inputs(&states), t_len)?;
    let w_out = agent.actor.output_dim();

    let value = |q: &[f64], probs: &[f64]| q.iter().zip(probs).map(|(a, b)| a * b).sum::<f64>();
    let mut returns = vec![0.0; t_len];
    let mut termination_advantage = vec![vec![0.0; n]; t_len];
    let mut high_advantage = vec![0.0; t_len];
    let mut next_return: Option<f64> = None;
    for t in (0..t_len).rev() {
        let s = &samples[t];
        let hn = agent.split(&out_next[t * w_out..(t + 1) * w_out]);
        let qn = &q_next[t * n..(t + 1) * n];
        let vn = value(qn, &hn.option_probs);
        let o = s.option;
        let u = (1.0 - hn.termination[o]) * qn[o] + hn.termination[o] * vn;
        for (k, adv) in termination_advantage[t].iter_mut().enumerate() {
            *adv = qn[k] - vn + config.xi;
        }
        let g = if s.done {
            s.reward
        } else {
            let tail = match next_return {
                Some(g_next) => (1.0 - config.lambda) * u + config.lambda * g_next,
                None => u,
            };
            s.reward + config.gamma * tail
        };
        returns[t] = g;
        // a done step starts a fresh episode at t + 1: do not chain across it
        next_return = Some(g);
        if t > 0 && samples[t - 1].done {
            next_return = None;
        }
        let hs = agent.split(&out_now[t * w_out..(t + 1) * w_out]);
        high_advantage[t] = g - value(&q[t * n..(t + 1) * n], &hs.option_probs);
    }
    // The chain must also break between the rollout's last step and the next
    // rollout: handled because `next_return` starts as `None`.
    let advantages = (0..t_len)
        .map(|t| (0..n).map(|o| returns[t] - q[t * n + o]).collect())
        .collect();
    Ok(Targets {
        returns,
        advantages,
        high_advantage,
        termination_advantage,
    })
}

/// Gradients of one minibatch for the actor, the log-stds and the critic.
pub(crate) struct MinibatchGrads {
    pub actor: Vec<f64>,
    pub log_std: Vec<f64>,
    pub critic: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn minibatch_grads(
    agent: &OptionSet,
    samples: &[Sample],
    targets: &Targets,
    idx: &[usize],
    adv_shift: f64,
    adv_scale: f64,
    config: &MocConfig,
    actor_tape: &mut Tape,
    critic_tape: &mut Tape,
) -> Result<MinibatchGrads> {
    let (n, a_dim) = (agent.n, agent.action_dim);
    let b = idx.len();
    let inv = 1.0 / b as f64;
    let mut rows: Vec<&[f64]> = idx.iter().map(|&i| samples[i].state.as_slice()).collect();
    rows.extend(idx.iter().map(|&i| samples[i].next_state.as_slice()));
    let out = agent.actor.forward_recorded(&agent.batch_inputs(&rows), 2 * b, actor_tape)?;
    let q = agent.critic.forward_recorded(&agent.batch_inputs(&rows[..b]), b, critic_tape)?;
    let w = agent.actor.output_dim();
    let mut g_out = vec![0.0; 2 * b * w];
    let mut g_log_std = vec![-config.ent_coef; n * a_dim];
    let mut g_q = vec![0.0; b * n];
    let (lo, hi) = (1.0 - config.clip, 1.0 + config.clip);

    for (r, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        let row = &out[r * w..(r + 1) * w];
        for o in 0..n {
            let weight = s.weights[o];
            if weight == 0.0 {
                continue;
            }
            let mean = &row[o * a_dim..(o + 1) * a_dim];
            let ls = agent.option_log_std(o);
            let adv = (targets.advantages[i][o] - adv_shift) / adv_scale;
            let ratio = (gaussian_log_prob(&s.action, mean, ls) - s.old_log_probs[o]).exp();
            if ratio * adv > ratio.clamp(lo, hi) * adv {
                continue;
            }
            let g_logp = -weight * adv * ratio * inv;
            for d in 0..a_dim {
                let var_inv = (-2.0 * ls[d]).exp();
                let diff = s.action[d] - mean[d];
                g_out[r * w + o * a_dim + d] += g_logp * diff * var_inv;
                g_log_std[o * a_dim + d] += g_logp * (diff * diff * var_inv - 1.0);
            }
        }
        if n > 1 {
            if !s.done {
                let next_row = &out[(b + r) * w..(b + r + 1) * w];
                for o in 0..n {
                    let weight = s.weights[o];
                    let x = next_row[n * a_dim + o];
                    if weight == 0.0 || x.abs() >= TERMINATION_LOGIT_LIMIT {
                        continue;
                    }
                    let beta = sigmoid(x);
                    let adv = targets.termination_advantage[i][o] / adv_scale;
                    g_out[(b + r) * w + n * a_dim + o] += weight * adv * beta * (1.0 - beta) * inv;
                }
            }
            if s.decision {
                let probs = softmax(&row[n * a_dim + n..]);
                let adv = targets.high_advantage[i] / adv_scale;
                let ratio = probs[s.option] / s.old_option_prob;
                if ratio * adv <= ratio.clamp(lo, hi) * adv {
                    let g_logp = -adv * ratio * inv;
                    for j in 0..n {
                        let ind = f64::from(u8::from(j == s.option));
                        g_out[r * w + n * a_dim + n + j] += g_logp * (ind - probs[j]);
                    }
                }
                let entropy: f64 = -probs.iter().map(|p| p * p.max(1e-300).ln()).sum::<f64>();
                for j in 0..n {
                    g_out[r * w + n * a_dim + n + j] +=
                        config.ent_coef * probs[j] * (probs[j].max(1e-300).ln() + entropy) * inv;
                }
            }
        }
        let qo = q[r * n + s.option];
        g_q[r * n + s.option] = config.vf_coef * (qo - targets.returns[i]) * inv;
    }
    let actor = agent.actor.backward(actor_tape, &g_out)?.params;
    let critic = agent.critic.backward(critic_tape, &g_q)?.params;
    Ok(MinibatchGrads {
        actor,
        log_std: g_log_std,
        critic,
    })
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt().max(1e-8))
}

struct Optimizers {
    actor: AdamState,
    log_std: AdamState,
    critic: AdamState,
}

fn update(
    agent: &mut OptionSet,
    samples: &[Sample],
    targets: &Targets,
    config: &MocConfig,
    opt: &mut Optimizers,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    use rand::seq::SliceRandom;
    let (shift, scale) = mean_std(samples.iter().zip(&targets.advantages).map(|(s, a)| a[s.option]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let (mut actor_tape, mut critic_tape) = (Tape::new(), Tape::new());
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch) {
            let mut g = minibatch_grads(agent, samples, targets, chunk, shift, scale, config, &mut actor_tape, &mut critic_tape)?;
            clip_grad_norm(&mut g.actor, config.max_grad_norm);
            clip_grad_norm(&mut g.critic, config.max_grad_norm);
            clip_grad_norm(&mut g.log_std, config.max_grad_norm);
            opt.actor.step(&mut agent.actor, &g.actor)?;
            opt.critic.step(&mut agent.critic, &g.critic)?;
            opt.log_std.step_slice(&mut agent.log_std, &g.log_std)?;
            for l in &mut agent.log_std {
                *l = l.clamp(LOG_STD_RANGE.0, LOG_STD_RANGE.1);
            }
        }
    }
    Ok(())
}

/// Trains `agent` on-policy in `env` for `config.total_steps` steps.
pub fn moc_train(
    env: &mut dyn RlEnv,
    agent: &mut OptionSet,
    config: &MocConfig,
    mut callback: Option<&mut TrainCallback<'_>>,
) -> Result<MocReport> {
    if env.spec().action_dim != agent.action_dim || env.spec().state_dim != agent.state_dim() {
        return Err(Error::dim("agent/env action", env.spec().action_dim, agent.action_dim));
    }
    if config.rollout_steps == 0 || config.minibatch == 0 {
        return Err(Error::Config("rollout and minibatch sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizers {
        actor: AdamState::for_net(&agent.actor, config.learning_rate),
        log_std: AdamState::new(agent.log_std.len(), config.learning_rate),
        critic: AdamState::for_net(&agent.critic, config.critic_learning_rate),
    };
    let mut report = MocReport::default();
    let mut carry = None;
    let mut stats = RolloutStats::default();
    while stats.total_steps < config.total_steps {
        let samples = collect(env, agent, config, &mut rng, &mut carry, &mut stats)?;
        let targets = compute_targets(agent, &samples, config)?;
        let finite = targets.returns.iter().all(|g| g.is_finite())
            && targets.advantages.iter().flatten().all(|a| a.is_finite());
        if finite {
            update(agent, &samples, &targets, config, &mut opt, &mut rng)?;
        } else {
            report.skipped_updates += 1;
        }
        report.rollouts.push(stats.clone());
        if let Some(cb) = callback.as_mut() {
            if !cb(agent, &stats)? {
                break;
            }
        }
        stats.pessimistic_terminations = 0;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatConfig {
    pub total_steps: usize,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FlatConfig {
    fn default() -> Self {
        Self {
            total_steps: 1_000_000,
            rollout_steps: 2048,
            epochs: 10,
            minibatch: 64,
            learning_rate: 3e-4,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            vf_coef: 0.835671,
            ent_coef: 0.00229519,
            max_grad_norm: 0.5,
            seed: 0,
        }
    }
}

impl FlatConfig {
    /// The equivalent single-option configuration.
    pub fn as_moc(&self) -> MocConfig {
        MocConfig {
            total_steps: self.total_steps,
            rollout_steps: self.rollout_steps,
            epochs: self.epochs,
            minibatch: self.minibatch,
            learning_rate: self.learning_rate,
            critic_learning_rate: self.learning_rate,
            gamma: self.gamma,
            lambda: self.lambda,
            clip: self.clip,
            eta: 0.0,
            xi: 0.0,
            ent_coef: self.ent_coef,
            vf_coef: self.vf_coef,
            max_grad_norm: self.max_grad_norm,
            seed: self.seed,
        }
    }
}

/// Gaussian policy with a state-value critic: a one-option [`OptionSet`],
/// for which the option-value return is the usual generalized advantage.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatAgent {
    pub inner: OptionSet,
}

impl FlatAgent {
    pub fn new<R: Rng + ?Sized>(
        action_dim: usize,
        hidden: &[usize],
        norm: NormStats,
        init_log_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: OptionSet::new(1, action_dim, hidden, norm, init_log_std, rng)?,
        })
    }
}

impl Controller for FlatAgent {
    fn begin_episode(&mut self, task: Option<usize>) {
        self.inner.begin_episode(task);
    }

    fn act(
        &mut self,
        state: &[f64],
        goals: Option<&dyn GoalConditioned>,
        deterministic: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.inner.act(state, goals, deterministic, rng)
    }
}

pub fn flat_train(
    env: &mut dyn RlEnv,
    agent: &mut FlatAgent,
    config: &FlatConfig,
    callback: Option<&mut TrainCallback<'_>>,
) -> Result<MocReport> {
    moc_train(env, &mut agent.inner, &config.as_moc(), callback)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_eta_weights_only_the_executing_option() {
        let w = multi_update_weights(0.0, 2, Some(1), 0.3, &[0.2, 0.3, 0.5]);
        assert_eq!(w, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn weights_mix_continuation_and_switch_probabilities() {
        let w = multi_update_weights(1.0, 1, Some(1), 0.25, &[0.5, 0.5]);
        // P(0) = 0.25 * 0.5, P(1) = 0.75 + 0.25 * 0.5
        assert!((w[0] - 0.125).abs() < 1e-15 && (w[1] - 0.875).abs() < 1e-15);
        let fresh = multi_update_weights(0.5, 0, None, 1.0, &[0.6, 0.4]);
        assert!((fresh[0] - 0.8).abs() < 1e-15 && (fresh[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn heads_are_valid_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = OptionSet::new(4, 2, &[16], NormStats::identity(3), -0.5, &mut rng).unwrap();
        let h = agent.heads(&[0.1, 2.0, -4.0]).unwrap();
        assert!((h.option_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(h.termination.iter().all(|&b| b > 0.0 && b < 1.0));
    }
}
