//! Ensemble of residual dynamics and reward networks, the disagreement
//! measure over it, and threshold calibration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, Dataset, NormStats};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, l1_loss, Activation, AdamState, Mlp, Tape};
use crate::util::{format_floats, parse_floats, KeyValues};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Percentile in `(0, 100]` of the dataset discrepancies.
    Quantile(f64),
    /// Multiple of the largest dataset discrepancy.
    Fraction(f64),
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Quantile(q) => write!(f, "quantile:{q}"),
            ThresholdMode::Fraction(x) => write!(f, "fraction:{x}"),
        }
    }
}

impl FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("threshold mode {s:?} must look like quantile:99")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Config(format!("bad threshold value {value:?}")))?;
        let mode = match kind {
            "quantile" => ThresholdMode::Quantile(v),
            "fraction" => ThresholdMode::Fraction(v),
            _ => return Err(Error::Config(format!("unknown threshold mode {kind:?}"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

impl ThresholdMode {
    pub fn validate(self) -> Result<()> {
        match self {
            ThresholdMode::Quantile(q) if q > 0.0 && q <= 100.0 => Ok(()),
            ThresholdMode::Fraction(f) if f > 0.0 && f.is_finite() => Ok(()),
            other => Err(Error::Config(format!("invalid threshold mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub reward_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub threshold_mode: ThresholdMode,
    pub penalty: f64,
    /// Learn reward networks; goal environments use their known sparse reward.
    pub learn_reward: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: vec![512, 512],
            reward_hidden: vec![512, 512],
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-4,
            train_fraction: 0.9,
            threshold_mode: ThresholdMode::Fraction(1.08),
            penalty: 20.0,
            learn_reward: true,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Manipulation defaults: quantile threshold, larger penalty, no reward nets.
    pub fn gripper() -> Self {
        Self {
            train_fraction: 0.85,
            threshold_mode: ThresholdMode::Quantile(99.0),
            penalty: 50.0,
            learn_reward: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WorldTrainReport {
    /// Validation l1 of the predicted state delta, per member, per epoch.
    pub dynamics_validation: Vec<Vec<f64>>,
    pub reward_validation: Vec<Vec<f64>>,
}

impl WorldTrainReport {
    pub fn best_dynamics_validation(&self) -> Vec<f64> {
        self.dynamics_validation
            .iter()
            .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// `T_k(s_bar, a) = delta_scale * net_k(s_bar, a)`, `R_k = mu + sigma * net_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    dynamics: Vec<Mlp>,
    rewards: Option<Vec<Mlp>>,
    norm: NormStats,
    delta_scale: Vec<f64>,
    reward_shift: f64,
    reward_scale: f64,
    state_dim: usize,
    action_dim: usize,
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub penalty: f64,
}

fn build_input(norm: &NormStats, state: &[f64], action: &[f64], out: &mut Vec<f64>) {
    norm.normalize_into(state, out);
    out.extend_from_slice(action);
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl WorldModel {
    /// Assembles a model from already-built networks. Each dynamics net maps
    /// `state_dim + action_dim` inputs to `state_dim` outputs.
    pub fn from_parts(
        dynamics: Vec<Mlp>,
        rewards: Option<Vec<Mlp>>,
        norm: NormStats,
        action_dim: usize,
    ) -> Result<Self> {
        if dynamics.len() < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        let state_dim = norm.dim();
        for net in &dynamics {
            if net.input_dim() != state_dim + action_dim || net.output_dim() != state_dim {
                return Err(Error::dim("dynamics member", state_dim + action_dim, net.input_dim()));
            }
        }
        if let Some(r) = &rewards {
            if r.len() != dynamics.len() {
                return Err(Error::dim("reward members", dynamics.len(), r.len()));
            }
        }
        Ok(Self {
            dynamics,
            rewards,
            norm,
            delta_scale: vec![1.0; state_dim],
            reward_shift: 0.0,
            reward_scale: 1.0,
            state_dim,
            action_dim,
            threshold: f64::INFINITY,
            threshold_mode: ThresholdMode::Quantile(100.0),
            penalty: 0.0,
        })
    }

    pub fn members(&self) -> usize {
        self.dynamics.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn has_reward_model(&self) -> bool {
        self.rewards.is_some()
    }

    pub fn dynamics_net(&self, k: usize) -> &Mlp {
        &self.dynamics[k]
    }

    fn check(&self, state: &[f64], action: &[f64]) -> Result<()> {
        if state.len() != self.state_dim {
            return Err(Error::dim("world state", self.state_dim, state.len()));
        }
        if action.len() != self.action_dim {
            return Err(Error::dim("world action", self.action_dim, action.len()));
        }
        Ok(())
    }

    fn delta_of(&self, k: usize, input: &[f64], batch: usize) -> Result<Vec<f64>> {
        let mut out = self.dynamics[k].forward_batch(input, batch)?;
        for row in out.chunks_exact_mut(self.state_dim) {
            for (v, s) in row.iter_mut().zip(&self.delta_scale) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Predicted state deltas of every member, `members x state_dim`.
    pub fn member_deltas(&self, state: &[f64], action: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(state, action)?;
        let mut input = Vec::with_capacity(self.state_dim + self.action_dim);
        build_input(&self.norm, state, action, &mut input);
        (0..self.members()).map(|k| self.delta_of(k, &input, 1)).collect()
    }

    /// Mean over state dimensions of the population variance of the members'
    /// predicted deltas.
    pub fn discrepancy(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(variance_discrepancy(&self.member_deltas(state, action)?))
    }

    /// Discrepancy of many `(state, action)` pairs at once.
    pub fn discrepancy_batch(&self, pairs: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        let n = pairs.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut input = Vec::with_capacity(n * (self.state_dim + self.action_dim));
        for (s, a) in pairs {
            self.check(s, a)?;
            build_input(&self.norm, s, a, &mut input);
        }
        let deltas: Vec<Vec<f64>> = (0..self.members())
            .map(|k| self.delta_of(k, &input, n))
            .collect::<Result<_>>()?;
        let d = self.state_dim;
        Ok((0..n)
            .map(|i| {
                let rows: Vec<Vec<f64>> = deltas.iter().map(|m| m[i * d..(i + 1) * d].to_vec()).collect();
                variance_discrepancy(&rows)
            })
            .collect())
    }

    pub fn dataset_discrepancies(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(dataset.len());
        for chunk in dataset.transitions().chunks(1024) {
            let pairs: Vec<(&[f64], &[f64])> = chunk.iter().map(|t| (t.state.as_slice(), t.action.as_slice())).collect();
            out.extend(self.discrepancy_batch(&pairs)?);
        }
        Ok(out)
    }

    /// Sets and returns the pessimism threshold from the dataset's discrepancies.
    pub fn calibrate_threshold(&mut self, dataset: &Dataset, mode: ThresholdMode) -> Result<f64> {
        mode.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("cannot calibrate on an empty dataset".into()));
        }
        let values = self.dataset_discrepancies(dataset)?;
        let threshold = threshold_from(&values, mode);
        self.threshold = threshold;
        self.threshold_mode = mode;
        Ok(threshold)
    }

    /// Next state and (when reward nets exist) reward from member `k`.
    pub fn predict(&self, k: usize, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
        self.check(state, action)?;
        if k >= self.members() {
            return Err(Error::Config(format!("member {k} out of range ({} members)", self.members())));
        }
        let mut input = Vec::with_capacity(self.state_dim + self.action_dim);
        build_input(&self.norm, state, action, &mut input);
        let delta = self.delta_of(k, &input, 1)?;
        let next: Vec<f64> = state.iter().zip(&delta).map(|(s, d)| s + d).collect();
        let reward = match &self.rewards {
            Some(r) => Some(self.reward_shift + self.reward_scale * r[k].forward(&input)?[0]),
            None => None,
        };
        Ok((next, reward))
    }

    /// Like [`WorldModel::predict`], falling back to the environment's known
    /// reward when no reward nets were learned.
    pub fn predict_with_env(
        &self,
        k: usize,
        state: &[f64],
        action: &[f64],
        env: &dyn Environment,
    ) -> Result<(Vec<f64>, f64)> {
        let (next, reward) = self.predict(k, state, action)?;
        let reward = reward.unwrap_or_else(|| env.reward(state, action, &next));
        Ok((next, reward))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (k, net) in self.dynamics.iter().enumerate() {
            checkpoint::save(net, &dir.join(format!("dynamics_{k}.ofnn")))?;
        }
        if let Some(r) = &self.rewards {
            for (k, net) in r.iter().enumerate() {
                checkpoint::save(net, &dir.join(format!("reward_{k}.ofnn")))?;
            }
        }
        let mut kv = KeyValues::default();
        kv.set("members", self.members());
        kv.set("state_dim", self.state_dim);
        kv.set("action_dim", self.action_dim);
        kv.set("reward_nets", self.rewards.is_some());
        kv.set("norm_mean", format_floats(&self.norm.mean));
        kv.set("norm_std", format_floats(&self.norm.std));
        kv.set("delta_scale", format_floats(&self.delta_scale));
        kv.set("reward_shift", format_floats(&[self.reward_shift]));
        kv.set("reward_scale", format_floats(&[self.reward_scale]));
        kv.set("threshold", format_floats(&[self.threshold]));
        kv.set("threshold_mode", self.threshold_mode);
        kv.set("penalty", format_floats(&[self.penalty]));
        kv.write(&dir.join("world.meta"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("world.meta"))?;
        let members: usize = kv.parse("members")?;
        let action_dim: usize = kv.parse("action_dim")?;
        let reward_nets: bool = kv.parse("reward_nets")?;
        let dynamics = (0..members)
            .map(|k| checkpoint::load(&dir.join(format!("dynamics_{k}.ofnn"))))
            .collect::<Result<Vec<_>>>()?;
        let rewards = if reward_nets {
            Some(
                (0..members)
                    .map(|k| checkpoint::load(&dir.join(format!("reward_{k}.ofnn"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let norm = NormStats {
            mean: parse_floats(kv.get("norm_mean")?)?,
            std: parse_floats(kv.get("norm_std")?)?,
        };
        let mut w = Self::from_parts(dynamics, rewards, norm, action_dim)?;
        w.delta_scale = parse_floats(kv.get("delta_scale")?)?;
        w.reward_shift = parse_floats(kv.get("reward_shift")?)?[0];
        w.reward_scale = parse_floats(kv.get("reward_scale")?)?[0];
        w.threshold = parse_floats(kv.get("threshold")?)?[0];
        w.threshold_mode = kv.get("threshold_mode")?.parse()?;
        w.penalty = parse_floats(kv.get("penalty")?)?[0];
        Ok(w)
    }
}

pub fn variance_discrepancy(deltas: &[Vec<f64>]) -> f64 {
    let k = deltas.len() as f64;
    let dim = deltas[0].len();
    let mut total = 0.0;
    for d in 0..dim {
        // shifted by the first member so identical predictions give exactly 0
        let origin = deltas[0][d];
        let mean = deltas.iter().map(|m| m[d] - origin).sum::<f64>() / k;
        total += deltas.iter().map(|m| (m[d] - origin - mean).powi(2)).sum::<f64>() / k;
    }
    total / dim as f64
}

pub fn threshold_from(values: &[f64], mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Quantile(q) => percentile(values, q),
        ThresholdMode::Fraction(f) => f * values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Trains one regression net with l1 loss and best-validation selection.
/// Returns the net and its per-epoch validation loss (in target units).
#[allow(clippy::too_many_arguments)]
fn fit_l1(
    mut net: Mlp,
    train_x: &[f64],
    train_y: &[f64],
    val_x: &[f64],
    val_y: &[f64],
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha8Rng,
    out_scale: &[f64],
) -> Result<(Mlp, Vec<f64>, bool)> {
    let din = net.input_dim();
    let dout = net.output_dim();
    let n = train_x.len() / din;
    let nv = val_x.len() / din;
    let mut adam = AdamState::for_net(&net, learning_rate);
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = net.clone();
    let mut best_loss = f64::INFINITY;
    let mut curve = Vec::with_capacity(epochs);
    let mut bx = Vec::new();
    let mut by = Vec::new();
    let validate = |net: &Mlp| -> Result<f64> {
        if nv == 0 {
            return Ok(0.0);
        }
        let pred = net.forward_batch(val_x, nv)?;
        let mut total = 0.0;
        for (i, (p, y)) in pred.iter().zip(val_y).enumerate() {
            total += (p - y).abs() * out_scale[i % dout];
        }
        Ok(total / (nv * dout) as f64)
    };
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&train_x[i * din..(i + 1) * din]);
                by.extend_from_slice(&train_y[i * dout..(i + 1) * dout]);
            }
            let pred = net.forward_recorded(&bx, chunk.len(), &mut tape)?;
            let (loss, grad) = l1_loss(&pred, &by)?;
            if !loss.is_finite() {
                return Ok((net, curve, false));
            }
            let g = net.backward(&tape, &grad)?;
            adam.step(&mut net, &g.params)?;
        }
        let v = validate(&net)?;
        if !v.is_finite() {
            return Ok((net, curve, false));
        }
        curve.push(v);
        if v < best_loss {
            best_loss = v;
            best = net.clone();
        }
    }
    if epochs == 0 {
        best = net;
    }
    Ok((best, curve, true))
}

fn member_seed(seed: u64, salt: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (salt << 32) ^ (k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn train_world(dataset: &Dataset, config: &WorldConfig) -> Result<(WorldModel, WorldTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a world model on an empty dataset".into()));
    }
    if config.members < 2 {
        return Err(Error::Config("an ensemble needs at least two members".into()));
    }
    config.threshold_mode.validate()?;
    let meta = dataset.meta();
    let (sd, ad) = (meta.state_dim, meta.action_dim);
    let stats = data::compute_norm_stats(dataset)?;
    let (train_idx, val_idx) = data::split_indices(dataset.len(), config.train_fraction, config.seed)?;

    let delta_rows: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| {
            let t = dataset.get(i);
            t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect()
        })
        .collect();
    let delta_stats = NormStats::from_rows(delta_rows.iter().map(Vec::as_slice), sd)?;
    let delta_scale = delta_stats.std.clone();
    let rewards: Vec<f64> = train_idx.iter().map(|&i| dataset.get(i).reward).collect();
    let reward_stats = NormStats::from_rows(rewards.iter().map(std::slice::from_ref), 1)?;
    let (reward_shift, reward_scale) = (reward_stats.mean[0], reward_stats.std[0]);

    let assemble = |idx: &[usize]| {
        let mut x = Vec::with_capacity(idx.len() * (sd + ad));
        let mut y = Vec::with_capacity(idx.len() * sd);
        let mut r = Vec::with_capacity(idx.len());
        for &i in idx {
            let t = dataset.get(i);
            build_input(&stats.state, &t.state, &t.action, &mut x);
            for d in 0..sd {
                y.push((t.next_state[d] - t.state[d]) / delta_scale[d]);
            }
            r.push((t.reward - reward_shift) / reward_scale);
        }
        (x, y, r)
    };
    let (tx, ty, tr) = assemble(&train_idx);
    let (vx, vy, vr) = assemble(&val_idx);

    let mut report = WorldTrainReport::default();
    let mut dynamics = Vec::with_capacity(config.members);
    let mut reward_nets = Vec::new();
    for k in 0..config.members {
        let mut rng = ChaCha8Rng::seed_from_u64(member_seed(config.seed, 1, k));
        let net = Mlp::with_hidden(sd + ad, &config.hidden, sd, Activation::Relu, Activation::Identity, &mut rng)?;
        let (net, curve, ok) = fit_l1(
            net,
            &tx,
            &ty,
            &vx,
            &vy,
            config.epochs,
            config.batch_size,
            config.learning_rate,
            &mut rng,
            &delta_scale,
        )?;
        if !ok {
            return Err(Error::Divergence {
                component: "dynamics",
                member: k,
            });
        }
        report.dynamics_validation.push(curve);
        dynamics.push(net);

        if config.learn_reward {
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed(config.seed, 2, k));
            let net = Mlp::with_hidden(sd + ad, &config.reward_hidden, 1, Activation::Relu, Activation::Identity, &mut rng)?;
            let (net, curve, ok) = fit_l1(
                net,
                &tx,
                &tr,
                &vx,
                &vr,
                config.epochs,
                config.batch_size,
                config.learning_rate,
                &mut rng,
                &[reward_scale],
            )?;
            if !ok {
                return Err(Error::Divergence {
                    component: "reward",
                    member: k,
                });
            }
            report.reward_validation.push(curve);
            reward_nets.push(net);
        }
    }
    let rewards = config.learn_reward.then_some(reward_nets);
    let mut world = WorldModel::from_parts(dynamics, rewards, stats.state, ad)?;
    world.delta_scale = delta_scale;
    world.reward_shift = reward_shift;
    world.reward_scale = reward_scale;
    world.penalty = config.penalty;
    world.calibrate_threshold(dataset, config.threshold_mode)?;
    Ok((world, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_member(delta: f64) -> Mlp {
        // 1-D state, 1-D action, output = bias
        Mlp::from_parameters(&[2, 1], &[Activation::Identity], vec![0.0, 0.0, delta]).unwrap()
    }

    #[test]
    fn identical_members_have_zero_discrepancy() {
        let net = constant_member(0.7);
        let w = WorldModel::from_parts(vec![net.clone(), net.clone(), net], None, NormStats::identity(1), 1).unwrap();
        assert_eq!(w.discrepancy(&[0.3], &[-0.2]).unwrap(), 0.0);
    }

    #[test]
    fn two_member_variance() {
        let w = WorldModel::from_parts(
            vec![constant_member(0.0), constant_member(2.0)],
            None,
            NormStats::identity(1),
            1,
        )
        .unwrap();
        assert_eq!(w.discrepancy(&[0.0], &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn zero_member_predicts_same_state() {
        let w = WorldModel::from_parts(
            vec![constant_member(0.0), constant_member(0.0)],
            None,
            NormStats::identity(1),
            1,
        )
        .unwrap();
        assert_eq!(w.predict(0, &[1.25], &[0.5]).unwrap().0, vec![1.25]);
        assert!(w.predict(2, &[1.25], &[0.5]).is_err());
    }

    #[test]
    fn single_member_rejected() {
        assert!(WorldModel::from_parts(vec![constant_member(0.0)], None, NormStats::identity(1), 1).is_err());
    }

    #[test]
    fn percentile_edges() {
        let v = [3.0, 1.0, 2.0, 5.0, 4.0];
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(threshold_from(&v, ThresholdMode::Fraction(0.5)), 2.5);
    }

    #[test]
    fn threshold_mode_parsing() {
        assert_eq!("quantile:99".parse::<ThresholdMode>().unwrap(), ThresholdMode::Quantile(99.0));
        assert_eq!("fraction:1.08".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fraction(1.08));
        assert!("quantile:0".parse::<ThresholdMode>().is_err());
        assert!("median:3".parse::<ThresholdMode>().is_err());
    }
}
