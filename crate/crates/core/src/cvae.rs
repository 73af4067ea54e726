//! State (and goal) conditioned latent action space.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{self, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, gaussian_kl, Activation, AdamState, Mlp, Tape};
use crate::util::{format_floats, parse_floats, KeyValues};

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub train_fraction: f64,
    /// Condition on the recorded low-level goal (ignored for goal-free data).
    pub goal_conditioned: bool,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![720, 720],
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-4,
            kl_weight: 1.0,
            train_fraction: 0.9,
            goal_conditioned: true,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn gripper() -> Self {
        Self {
            batch_size: 128,
            train_fraction: 0.85,
            ..Self::default()
        }
    }
}

/// Per-epoch training curves; losses are batch means of the per-example sums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvaeReport {
    pub train_loss: Vec<f64>,
    pub train_kl: Vec<f64>,
    /// Mean absolute action error of `decode(encode_mean(..))` on held-out
    /// data, in action units.
    pub validation_l1: Vec<f64>,
}

/// Encoder `E(s_bar, [g], a) -> (mean, log_variance)` and decoder
/// `D(s_bar, [g], z) -> a` with tanh squashing onto the action box.
///
/// Actions enter the encoder and the reconstruction loss rescaled to
/// `[-1, 1]` per dimension; on unit boxes this is the raw action.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    encoder: Mlp,
    decoder: Mlp,
    norm: NormStats,
    goal_dim: usize,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
}

impl LatentCodec {
    pub fn new(
        encoder: Mlp,
        decoder: Mlp,
        norm: NormStats,
        goal_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
    ) -> Result<Self> {
        let sd = norm.dim();
        let ad = action_low.len();
        if action_high.len() != ad {
            return Err(Error::dim("action bounds", ad, action_high.len()));
        }
        if encoder.input_dim() != sd + goal_dim + ad {
            return Err(Error::dim("encoder input", sd + goal_dim + ad, encoder.input_dim()));
        }
        if encoder.output_dim() != 2 * ad {
            return Err(Error::dim("encoder output", 2 * ad, encoder.output_dim()));
        }
        if decoder.input_dim() != sd + goal_dim + ad {
            return Err(Error::dim("decoder input", sd + goal_dim + ad, decoder.input_dim()));
        }
        if decoder.output_dim() != ad || decoder.activations().last() != Some(&Activation::Tanh) {
            return Err(Error::Config("decoder must end in a tanh layer of action width".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            norm,
            goal_dim,
            action_low,
            action_high,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn state_dim(&self) -> usize {
        self.norm.dim()
    }

    pub fn goal_dim(&self) -> usize {
        self.goal_dim
    }

    pub fn goal_conditioned(&self) -> bool {
        self.goal_dim > 0
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn action_bounds(&self) -> (&[f64], &[f64]) {
        (&self.action_low, &self.action_high)
    }

    fn condition(&self, state: &[f64], goal: Option<&[f64]>, out: &mut Vec<f64>) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::dim("codec state", self.state_dim(), state.len()));
        }
        match (goal, self.goal_dim) {
            (None, 0) => {}
            (Some(g), d) if d > 0 && g.len() == d => {}
            (Some(g), d) => return Err(Error::dim("codec goal", d, g.len())),
            (None, d) => return Err(Error::dim("codec goal", d, 0)),
        }
        self.norm.normalize_into(state, out);
        if let Some(g) = goal {
            out.extend_from_slice(g);
        }
        Ok(())
    }

    fn to_action(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(u, (lo, hi))| (lo + (u + 1.0) * 0.5 * (hi - lo)).clamp(*lo, *hi))
            .collect()
    }

    fn to_unit(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn decode(&self, state: &[f64], goal: Option<&[f64]>, latent: &[f64]) -> Result<Vec<f64>> {
        if latent.len() != self.latent_dim() {
            return Err(Error::dim("latent action", self.latent_dim(), latent.len()));
        }
        let mut input = Vec::with_capacity(self.decoder.input_dim());
        self.condition(state, goal, &mut input)?;
        input.extend_from_slice(latent);
        let unit = self.decoder.forward(&input)?;
        Ok(self.to_action(&unit))
    }

    /// Posterior `(mean, log_variance)` of the latent for `action`.
    pub fn encode(&self, state: &[f64], goal: Option<&[f64]>, action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if action.len() != self.action_dim() {
            return Err(Error::dim("codec action", self.action_dim(), action.len()));
        }
        let mut input = Vec::with_capacity(self.encoder.input_dim());
        self.condition(state, goal, &mut input)?;
        input.extend(self.to_unit(action));
        let mut out = self.encoder.forward(&input)?;
        let log_variance = out.split_off(self.latent_dim());
        Ok((out, log_variance))
    }

    pub fn encode_mean(&self, state: &[f64], goal: Option<&[f64]>, action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode(state, goal, action)?.0)
    }

    /// Decodes a latent drawn from the standard normal prior.
    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], goal: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>> {
        let z: Vec<f64> = (0..self.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.decode(state, goal, &z)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.encoder, &dir.join("encoder.ofnn"))?;
        checkpoint::save(&self.decoder, &dir.join("decoder.ofnn"))?;
        let mut kv = KeyValues::default();
        kv.set("latent_dim", self.latent_dim());
        kv.set("goal_dim", self.goal_dim);
        kv.set("goal_conditioned", self.goal_conditioned());
        kv.set("action_low", format_floats(&self.action_low));
        kv.set("action_high", format_floats(&self.action_high));
        kv.set("norm_mean", format_floats(&self.norm.mean));
        kv.set("norm_std", format_floats(&self.norm.std));
        kv.write(&dir.join("codec.meta"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let kv = KeyValues::read(&dir.join("codec.meta"))?;
        let norm = NormStats {
            mean: parse_floats(kv.get("norm_mean")?)?,
            std: parse_floats(kv.get("norm_std")?)?,
        };
        Self::new(
            checkpoint::load(&dir.join("encoder.ofnn"))?,
            checkpoint::load(&dir.join("decoder.ofnn"))?,
            norm,
            kv.parse("goal_dim")?,
            parse_floats(kv.get("action_low")?)?,
            parse_floats(kv.get("action_high")?)?,
        )
    }
}

struct Batch {
    cond: Vec<f64>,
    unit_action: Vec<f64>,
}

fn gather(codec: &LatentCodec, dataset: &Dataset, idx: &[usize], use_goal: bool) -> Result<Batch> {
    let mut cond = Vec::new();
    let mut unit_action = Vec::new();
    for &i in idx {
        let t = dataset.get(i);
        codec.condition(&t.state, use_goal.then_some(t.goal.as_slice()), &mut cond)?;
        unit_action.extend(codec.to_unit(&t.action));
    }
    Ok(Batch { cond, unit_action })
}

fn concat_rows(a: &[f64], a_w: usize, b: &[f64], b_w: usize, rows: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * (a_w + b_w));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_w..(r + 1) * a_w]);
        out.extend_from_slice(&b[r * b_w..(r + 1) * b_w]);
    }
    out
}

/// Loss value and gradients of one reparameterized minibatch.
pub struct CvaeStep {
    pub loss: f64,
    pub kl: f64,
    pub encoder_grad: Vec<f64>,
    pub decoder_grad: Vec<f64>,
}

/// Computes `mean_b[ sum_d |u_hat - u| + kl_weight * KL ]` for one minibatch,
/// where `u` is the action mapped to `[-1, 1]` and `z = mu + exp(lv/2) eps`.
pub fn cvae_minibatch(
    encoder: &Mlp,
    decoder: &Mlp,
    cond: &[f64],
    unit_action: &[f64],
    eps: &[f64],
    kl_weight: f64,
) -> Result<CvaeStep> {
    let ad = decoder.output_dim();
    let rows = unit_action.len() / ad;
    let cw = cond.len() / rows.max(1);
    let mut enc_tape = Tape::new();
    let mut dec_tape = Tape::new();
    let enc_in = concat_rows(cond, cw, unit_action, ad, rows);
    let enc_out = encoder.forward_recorded(&enc_in, rows, &mut enc_tape)?;
    let mut mean = Vec::with_capacity(rows * ad);
    let mut logvar = Vec::with_capacity(rows * ad);
    let mut z = Vec::with_capacity(rows * ad);
    for r in 0..rows {
        let o = &enc_out[r * 2 * ad..(r + 1) * 2 * ad];
        for d in 0..ad {
            let (m, lv) = (o[d], o[ad + d]);
            mean.push(m);
            logvar.push(lv);
            z.push(m + (0.5 * lv).exp() * eps[r * ad + d]);
        }
    }
    let dec_in = concat_rows(cond, cw, &z, ad, rows);
    let pred = decoder.forward_recorded(&dec_in, rows, &mut dec_tape)?;
    let inv = 1.0 / rows as f64;
    let mut recon = 0.0;
    let grad_pred: Vec<f64> = pred
        .iter()
        .zip(unit_action)
        .map(|(p, t)| {
            let d = p - t;
            recon += d.abs();
            inv * if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    let kl = gaussian_kl(&mean, &logvar)?;
    let loss = (recon + kl_weight * kl.value) * inv;
    let dec_grads = decoder.backward(&dec_tape, &grad_pred)?;
    let mut grad_enc_out = vec![0.0; rows * 2 * ad];
    for r in 0..rows {
        for d in 0..ad {
            let i = r * ad + d;
            let gz = dec_grads.input[r * (cw + ad) + cw + d];
            let sd = (0.5 * logvar[i]).exp();
            grad_enc_out[r * 2 * ad + d] = gz + kl_weight * kl.grad_mean[i] * inv;
            grad_enc_out[r * 2 * ad + ad + d] = gz * eps[i] * 0.5 * sd + kl_weight * kl.grad_log_variance[i] * inv;
        }
    }
    let enc_grads = encoder.backward(&enc_tape, &grad_enc_out)?;
    Ok(CvaeStep {
        loss,
        kl: kl.value * inv,
        encoder_grad: enc_grads.params,
        decoder_grad: dec_grads.params,
    })
}

pub fn train_cvae(
    dataset: &Dataset,
    action_low: &[f64],
    action_high: &[f64],
    config: &CvaeConfig,
) -> Result<(LatentCodec, CvaeReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot train a codec on an empty dataset".into()));
    }
    let meta = dataset.meta();
    let (sd, ad) = (meta.state_dim, meta.action_dim);
    if action_low.len() != ad {
        return Err(Error::dim("action bounds", ad, action_low.len()));
    }
    let goal_dim = if config.goal_conditioned { meta.goal_dim } else { 0 };
    let stats = data::compute_norm_stats(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC0DE_C0DE);
    let encoder = Mlp::with_hidden(sd + goal_dim + ad, &config.hidden, 2 * ad, Activation::Relu, Activation::Identity, &mut rng)?;
    let decoder = Mlp::with_hidden(sd + goal_dim + ad, &config.hidden, ad, Activation::Relu, Activation::Tanh, &mut rng)?;
    let mut codec = LatentCodec::new(encoder, decoder, stats.state, goal_dim, action_low.to_vec(), action_high.to_vec())?;

    let (train_idx, val_idx) = data::split_indices(dataset.len(), config.train_fraction, config.seed)?;
    let use_goal = goal_dim > 0;
    let train = gather(&codec, dataset, &train_idx, use_goal)?;
    let val = gather(&codec, dataset, &val_idx, use_goal)?;
    let cw = sd + goal_dim;

    let mut enc_adam = AdamState::for_net(&codec.encoder, config.learning_rate);
    let mut dec_adam = AdamState::for_net(&codec.decoder, config.learning_rate);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    let mut report = CvaeReport::default();
    let (mut bc, mut ba, mut eps) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            bc.clear();
            ba.clear();
            eps.clear();
            for &i in chunk {
                bc.extend_from_slice(&train.cond[i * cw..(i + 1) * cw]);
                ba.extend_from_slice(&train.unit_action[i * ad..(i + 1) * ad]);
            }
            eps.extend((0..chunk.len() * ad).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let step = cvae_minibatch(&codec.encoder, &codec.decoder, &bc, &ba, &eps, config.kl_weight)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence {
                    component: "cvae",
                    member: 0,
                });
            }
            enc_adam.step(&mut codec.encoder, &step.encoder_grad)?;
            dec_adam.step(&mut codec.decoder, &step.decoder_grad)?;
            loss_sum += step.loss;
            kl_sum += step.kl;
            batches += 1;
        }
        report.train_loss.push(loss_sum / batches.max(1) as f64);
        report.train_kl.push(kl_sum / batches.max(1) as f64);
        report.validation_l1.push(round_trip_l1(&codec, &val, cw)?);
    }
    Ok((codec, report))
}

fn round_trip_l1(codec: &LatentCodec, val: &Batch, cw: usize) -> Result<f64> {
    let ad = codec.action_dim();
    let rows = val.unit_action.len() / ad;
    if rows == 0 {
        return Ok(0.0);
    }
    let enc_in = concat_rows(&val.cond, cw, &val.unit_action, ad, rows);
    let enc_out = codec.encoder.forward_batch(&enc_in, rows)?;
    let mut z = Vec::with_capacity(rows * ad);
    for r in 0..rows {
        z.extend_from_slice(&enc_out[r * 2 * ad..r * 2 * ad + ad]);
    }
    let dec_in = concat_rows(&val.cond, cw, &z, ad, rows);
    let pred = codec.decoder.forward_batch(&dec_in, rows)?;
    let mut total = 0.0;
    for (i, (p, t)) in pred.iter().zip(&val.unit_action).enumerate() {
        let d = i % ad;
        total += (p - t).abs() * 0.5 * (codec.action_high[d] - codec.action_low[d]);
    }
    Ok(total / (rows * ad) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(goal_dim: usize) -> LatentCodec {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Mlp::with_hidden(2 + goal_dim + 2, &[8], 4, Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let dec = Mlp::with_hidden(2 + goal_dim + 2, &[8], 2, Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        LatentCodec::new(enc, dec, NormStats::identity(2), goal_dim, vec![-0.1, -1.0], vec![0.1, 1.0]).unwrap()
    }

    #[test]
    fn goal_arity_is_enforced() {
        let plain = tiny(0);
        assert!(plain.decode(&[0.0, 0.0], None, &[0.0, 0.0]).is_ok());
        assert!(plain.decode(&[0.0, 0.0], Some(&[1.0]), &[0.0, 0.0]).is_err());
        let goal = tiny(3);
        assert!(goal.decode(&[0.0, 0.0], None, &[0.0, 0.0]).is_err());
        assert!(goal.decode(&[0.0, 0.0], Some(&[1.0, 2.0]), &[0.0, 0.0]).is_err());
        assert!(goal.decode(&[0.0, 0.0], Some(&[1.0, 2.0, 3.0]), &[0.0, 0.0]).is_ok());
    }

    #[test]
    fn sampling_is_seeded() {
        let c = tiny(0);
        let a = c.sample_action(&[0.3, 0.1], None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = c.sample_action(&[0.3, 0.1], None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_latent_decodes_in_bounds() {
        let c = tiny(0);
        let a = c.decode(&[5.0, -3.0], None, &[0.0, 0.0]).unwrap();
        assert!(a[0].abs() <= 0.1 && a[1].abs() <= 1.0);
    }

    #[test]
    fn unit_mapping_inverts() {
        let c = tiny(0);
        let a = [0.05, -0.5];
        let back = c.to_action(&c.to_unit(&a));
        assert!((back[0] - a[0]).abs() < 1e-15 && (back[1] - a[1]).abs() < 1e-15);
    }
}
