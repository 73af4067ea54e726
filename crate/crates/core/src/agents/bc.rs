use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Controller;
use crate::data::{self, Dataset, NormStats};
use crate::env::GoalConditioned;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, l1_loss, Activation, AdamState, Mlp, Tape};
use crate::util::{format_floats, parse_floats, KeyValues};

#[derive(Debug, Clone, PartialEq)]
pub struct BcConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Regression of the dataset's actions on the normalized state and, when
/// the dataset records goals, the low-level goal.
#[derive(Debug, Clone, PartialEq)]
pub struct BcPolicy {
    net: Mlp,
    norm: NormStats,
    goal_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    task: Option<usize>,
}

impl BcPolicy {
    pub fn goal_dim(&self) -> usize {
        self.goal_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn input(&self, state: &[f64], goal: &[f64], out: &mut Vec<f64>) {
        self.norm.normalize_into(state, out);
        out.extend_from_slice(goal);
    }

    fn to_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(u, (lo, hi))| (lo + (u + 1.0) * 0.5 * (hi - lo)).clamp(*lo, *hi))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.net, &dir.join("policy.ofnn"))?;
        let mut kv = KeyValues::default();
        kv.set("kind", "bc");
        kv.set("goal_dim", self.goal_dim);
        kv.set("action_low", format_floats(&self.action_low));
        kv.set("action_high", format_floats(&self.action_high));
        kv.set("norm_mean", format_floats(&self.norm.mean));
        kv.set("norm_std", format_floats(&self.norm.std));
        kv.write(&dir.join("agent.meta"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("agent.meta"))?;
        let net: Mlp = checkpoint::load(&dir.join("policy.ofnn"))?;
        let policy = Self {
            norm: NormStats {
                mean: parse_floats(kv.get("norm_mean")?)?,
                std: parse_floats(kv.get("norm_std")?)?,
            },
            goal_dim: kv.parse("goal_dim")?,
            action_low: parse_floats(kv.get("action_low")?)?,
            action_high: parse_floats(kv.get("action_high")?)?,
            task: None,
            net,
        };
        if policy.net.input_dim() != policy.norm.dim() + policy.goal_dim || policy.net.output_dim() != policy.action_low.len() {
            return Err(Error::Config("policy checkpoint shapes disagree with its metadata".into()));
        }
        Ok(policy)
    }

    pub fn predict(&self, state: &[f64], goal: &[f64]) -> Result<Vec<f64>> {
        if goal.len() != self.goal_dim {
            return Err(Error::dim("bc goal", self.goal_dim, goal.len()));
        }
        let mut x = Vec::with_capacity(self.net.input_dim());
        self.input(state, goal, &mut x);
        Ok(self.to_action(&self.net.forward(&x)?))
    }
}

impl Controller for BcPolicy {
    fn begin_episode(&mut self, task: Option<usize>) {
        self.task = task;
    }

    fn act(
        &mut self,
        state: &[f64],
        goals: Option<&dyn GoalConditioned>,
        _deterministic: bool,
        _rng: &mut dyn RngCore,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let goal = match (goals, self.goal_dim) {
            (_, 0) => Vec::new(),
            (Some(g), _) => g.low_level_goal(state, self.task.unwrap_or(g.num_high_goals() - 1)),
            (None, _) => return Err(Error::Config("goal-conditioned policy in a goal-free environment".into())),
        };
        Ok((self.predict(state, &goal)?, None))
    }
}

/// Returns the policy and the per-epoch held-out l1 in action units.
pub fn bc_train(dataset: &Dataset, action_low: &[f64], action_high: &[f64], config: &BcConfig) -> Result<(BcPolicy, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot clone an empty dataset".into()));
    }
    let meta = dataset.meta();
    let (sd, gd, ad) = (meta.state_dim, meta.goal_dim, meta.action_dim);
    if action_low.len() != ad || action_high.len() != ad {
        return Err(Error::dim("action bounds", ad, action_low.len()));
    }
    let stats = data::compute_norm_stats(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = Mlp::with_hidden(sd + gd, &config.hidden, ad, Activation::Relu, Activation::Tanh, &mut rng)?;
    let mut policy = BcPolicy {
        net,
        norm: stats.state,
        goal_dim: gd,
        action_low: action_low.to_vec(),
        action_high: action_high.to_vec(),
        task: None,
    };
    let (train_idx, val_idx) = data::split_indices(dataset.len(), config.train_fraction, config.seed)?;
    let unit = |a: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(action_low.iter().zip(action_high))
            .map(|(a, (lo, hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    };
    let gather = |idx: &[usize]| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in idx {
            let t = dataset.get(i);
            policy.input(&t.state, &t.goal, &mut x);
            y.extend(unit(&t.action));
        }
        (x, y)
    };
    let (tx, ty) = gather(&train_idx);
    let (vx, vy) = gather(&val_idx);
    let din = sd + gd;
    let mut adam = AdamState::for_net(&policy.net, config.learning_rate);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&tx[i * din..(i + 1) * din]);
                by.extend_from_slice(&ty[i * ad..(i + 1) * ad]);
            }
            let pred = policy.net.forward_recorded(&bx, chunk.len(), &mut tape)?;
            let (loss, grad) = l1_loss(&pred, &by)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    component: "bc",
                    member: 0,
                });
            }
            let g = policy.net.backward(&tape, &grad)?;
            adam.step(&mut policy.net, &g.params)?;
        }
        let nv = val_idx.len();
        let l1 = if nv == 0 {
            0.0
        } else {
            let pred = policy.net.forward_batch(&vx, nv)?;
            pred.iter()
                .zip(&vy)
                .enumerate()
                .map(|(i, (p, t))| (p - t).abs() * 0.5 * (action_high[i % ad] - action_low[i % ad]))
                .sum::<f64>()
                / (nv * ad) as f64
        };
        curve.push(l1);
    }
    Ok((policy, curve))
}
