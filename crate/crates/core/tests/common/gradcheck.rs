//! Finite-difference checks of every reverse pass used for training.

use ofhrl::cvae::cvae_minibatch;
use ofhrl::nn::{Activation, Mlp, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const PROBES: usize = 24;

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Relative error between an analytic and a central-difference derivative,
/// or `None` when the one-sided slopes disagree (a relu or l1 kink lies
/// inside the probe interval and the derivative is not defined there).
fn compare(analytic: f64, f_plus: f64, f0: f64, f_minus: f64) -> Option<f64> {
    let fwd = (f_plus - f0) / H;
    let bwd = (f0 - f_minus) / H;
    if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs().max(bwd.abs())) {
        return None;
    }
    let numeric = (f_plus - f_minus) / (2.0 * H);
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        return Some(0.0);
    }
    Some((analytic - numeric).abs() / scale)
}

/// Probes `PROBES` random coordinates of `x` against `grad` using `f`.
fn check_coords(
    x: &mut [f64],
    grad: &[f64],
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (f64, usize) {
    let f0 = f(x);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for _ in 0..PROBES {
        let i = rng.random_range(0..x.len());
        let orig = x[i];
        x[i] = orig + H;
        let fp = f(x);
        x[i] = orig - H;
        let fm = f(x);
        x[i] = orig;
        match compare(grad[i], fp, f0, fm) {
            Some(e) => worst = worst.max(e),
            None => skipped += 1,
        }
    }
    (worst, skipped)
}

/// Scalar objective `sum_i c_i y_i` over a batch.
fn linear_readout(net: &Mlp, input: &[f64], batch: usize, c: &[f64]) -> f64 {
    let y = net.forward_batch(input, batch).unwrap();
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Worst relative error over all probes, and how many probes hit a kink.
#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub worst: f64,
    pub skipped: usize,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < TOL && self.skipped * 20 < self.probes
    }
}

pub fn check_mlp(hidden_act: Activation, out_act: Activation) -> CheckResult {
    let (mut worst, mut skipped, mut probes) = (0.0f64, 0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = rng.random_range(2..7);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(3..9)).collect();
        let output_dim = rng.random_range(1..5);
        let batch = rng.random_range(1..5);
        let mut net = Mlp::with_hidden(input_dim, &hidden, output_dim, hidden_act, out_act, &mut rng).unwrap();
        let input = normals(batch * input_dim, &mut rng);
        let c = normals(batch * output_dim, &mut rng);

        let mut tape = Tape::new();
        net.forward_recorded(&input, batch, &mut tape).unwrap();
        let grads = net.backward(&tape, &c).unwrap();

        let mut params = net.parameters().to_vec();
        let (e, s) = check_coords(&mut params, &grads.params, &mut rng, |p| {
            net.parameters_mut().copy_from_slice(p);
            linear_readout(&net, &input, batch, &c)
        });
        net.parameters_mut().copy_from_slice(&params);
        worst = worst.max(e);
        skipped += s;

        let (e, s) = check_coords(&mut input.clone(), &grads.input, &mut rng, |x| linear_readout(&net, x, batch, &c));
        worst = worst.max(e);
        skipped += s;
        probes += 2 * PROBES;
    }
    CheckResult { worst, skipped, probes }
}

pub fn check_cvae_minibatch() -> CheckResult {
    let (mut worst, mut skipped, mut probes) = (0.0f64, 0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cw = rng.random_range(1..6);
        let ad = rng.random_range(1..4);
        let rows = rng.random_range(1..6);
        let h = rng.random_range(4..10);
        let kl_weight = [1.0, 0.05, 0.3][seed as usize % 3];
        let mut enc = Mlp::with_hidden(cw + ad, &[h], 2 * ad, Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let mut dec = Mlp::with_hidden(cw + ad, &[h], ad, Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let cond = normals(rows * cw, &mut rng);
        let unit: Vec<f64> = (0..rows * ad).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = normals(rows * ad, &mut rng);
        let step = cvae_minibatch(&enc, &dec, &cond, &unit, &eps, kl_weight).unwrap();

        let mut p = enc.parameters().to_vec();
        let (e, s) = check_coords(&mut p, &step.encoder_grad, &mut rng, |q| {
            enc.parameters_mut().copy_from_slice(q);
            cvae_minibatch(&enc, &dec, &cond, &unit, &eps, kl_weight).unwrap().loss
        });
        enc.parameters_mut().copy_from_slice(&p);
        worst = worst.max(e);
        skipped += s;

        let mut p = dec.parameters().to_vec();
        let (e, s) = check_coords(&mut p, &step.decoder_grad, &mut rng, |q| {
            dec.parameters_mut().copy_from_slice(q);
            cvae_minibatch(&enc, &dec, &cond, &unit, &eps, kl_weight).unwrap().loss
        });
        dec.parameters_mut().copy_from_slice(&p);
        worst = worst.max(e);
        skipped += s;
        probes += 2 * PROBES;
    }
    CheckResult { worst, skipped, probes }
}

/// Deterministic actor trained through the critic's input gradient:
/// d Q(s, pi(s)) / d theta_pi.
pub fn check_actor_chain() -> CheckResult {
    let (mut worst, mut skipped, mut probes) = (0.0f64, 0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = rng.random_range(2..6);
        let ad = rng.random_range(1..4);
        let mut actor = Mlp::with_hidden(sd, &[6], ad, Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let critic = Mlp::with_hidden(sd + ad, &[6], 1, Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let state = normals(sd, &mut rng);
        let q_of = |actor: &Mlp| {
            let mut x = state.clone();
            x.extend(actor.forward(&state).unwrap());
            critic.forward(&x).unwrap()[0]
        };

        let mut at = Tape::new();
        let a = actor.forward_recorded(&state, 1, &mut at).unwrap();
        let mut x = state.clone();
        x.extend(&a);
        let mut ct = Tape::new();
        critic.forward_recorded(&x, 1, &mut ct).unwrap();
        let dq = critic.backward(&ct, &[1.0]).unwrap();
        let ga = actor.backward(&at, &dq.input[sd..]).unwrap();

        let mut p = actor.parameters().to_vec();
        let (e, s) = check_coords(&mut p, &ga.params, &mut rng, |q| {
            actor.parameters_mut().copy_from_slice(q);
            q_of(&actor)
        });
        worst = worst.max(e);
        skipped += s;
        probes += PROBES;
    }
    CheckResult { worst, skipped, probes }
}

/// Every architecture trained in the library, with a label.
pub fn check_all() -> Vec<(&'static str, CheckResult)> {
    vec![
        ("relu/identity mlp", check_mlp(Activation::Relu, Activation::Identity)),
        ("relu/tanh mlp", check_mlp(Activation::Relu, Activation::Tanh)),
        ("tanh/identity mlp", check_mlp(Activation::Tanh, Activation::Identity)),
        ("cvae minibatch", check_cvae_minibatch()),
        ("actor through critic", check_actor_chain()),
    ]
}
