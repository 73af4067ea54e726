//! Dense feed-forward network with a hand-written reverse pass.
//!
//! Parameters live in one flat vector. Each layer contributes its weight
//! matrix (shape `fan_out x fan_in`, row-major) followed by its bias vector,
//! layers in input-to-output order. Batched inputs and outputs are flat
//! row-major buffers of shape `(batch, dim)`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    /// Start of each layer's weight block inside `params`.
    offsets: Vec<usize>,
}

/// Post-activation values recorded by [`Mlp::forward_recorded`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    batch: usize,
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.batch = 0;
    }
}

/// Result of a reverse pass: gradients with respect to the parameters and
/// with respect to the network input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

fn layout(sizes: &[usize], activations: &[Activation]) -> Result<Vec<usize>> {
    if sizes.len() < 2 {
        return Err(Error::Config("an mlp needs at least an input and an output size".into()));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    if activations.len() != sizes.len() - 1 {
        return Err(Error::dim("mlp activations", sizes.len() - 1, activations.len()));
    }
    let mut offsets = Vec::with_capacity(sizes.len() - 1);
    let mut at = 0;
    for w in sizes.windows(2) {
        offsets.push(at);
        at += (w[0] + 1) * w[1];
    }
    offsets.push(at);
    Ok(offsets)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        sum += a[i] * b[i];
    }
    sum
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        for l in 0..net.num_layers() {
            let (fan_in, fan_out) = (net.sizes[l], net.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
            let start = net.offsets[l];
            for w in &mut net.params[start..start + fan_in * fan_out] {
                *w = dist.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        let offsets = layout(sizes, activations)?;
        let count = *offsets.last().unwrap();
        Ok(Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; count],
            offsets,
        })
    }

    pub fn from_parameters(
        sizes: &[usize],
        activations: &[Activation],
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeros(sizes, activations)?;
        if params.len() != net.params.len() {
            return Err(Error::dim("mlp parameters", net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    /// Hidden layers share `hidden` activation; the output layer uses `output`.
    pub fn with_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![hidden_activation; hidden.len()];
        acts.push(output_activation);
        Self::new(&sizes, &acts, rng)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight matrix of layer `l` (row-major, `fan_out x fan_in`).
    pub fn weights(&self, l: usize) -> &[f64] {
        let start = self.offsets[l];
        &self.params[start..start + self.sizes[l] * self.sizes[l + 1]]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let start = self.offsets[l];
        let n = self.sizes[l] * self.sizes[l + 1];
        &mut self.params[start..start + n]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let start = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        &self.params[start..start + self.sizes[l + 1]]
    }

    pub fn biases_mut(&mut self, l: usize) -> &mut [f64] {
        let start = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
        let n = self.sizes[l + 1];
        &mut self.params[start..start + n]
    }

    /// Multiplies the output layer's weights and biases by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.num_layers() - 1;
        let start = self.offsets[last];
        for p in &mut self.params[start..] {
            *p *= factor;
        }
    }

    /// Polyak averaging toward `source`: `self = (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        debug_assert_eq!(self.params.len(), source.params.len());
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_batch(&self, inputs: &[f64], batch: usize) -> Result<()> {
        let expected = batch * self.input_dim();
        if inputs.len() != expected || batch == 0 {
            return Err(Error::dim("mlp input", expected.max(self.input_dim()), inputs.len()));
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, input: &[f64], batch: usize, out: &mut Vec<f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.weights(l);
        let b = self.biases(l);
        let act = self.activations[l];
        out.clear();
        out.resize(batch * fan_out, 0.0);
        for r in 0..batch {
            let x = &input[r * fan_in..(r + 1) * fan_in];
            let y = &mut out[r * fan_out..(r + 1) * fan_out];
            for j in 0..fan_out {
                y[j] = act.apply(b[j] + dot(&w[j * fan_in..(j + 1) * fan_in], x));
            }
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_batch(inputs, batch)?;
        let mut cur = inputs.to_vec();
        let mut next = Vec::new();
        for l in 0..self.num_layers() {
            self.layer_forward(l, &cur, batch, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass that keeps every layer's output for a later [`Mlp::backward`].
    pub fn forward_recorded(&self, inputs: &[f64], batch: usize, tape: &mut Tape) -> Result<Vec<f64>> {
        self.check_batch(inputs, batch)?;
        tape.values.clear();
        tape.batch = batch;
        tape.values.push(inputs.to_vec());
        for l in 0..self.num_layers() {
            let mut out = Vec::new();
            self.layer_forward(l, &tape.values[l], batch, &mut out);
            tape.values.push(out);
        }
        Ok(tape.values.last().unwrap().clone())
    }

    /// Reverse pass given dL/d(output) for the batch recorded on `tape`.
    pub fn backward(&self, tape: &Tape, grad_output: &[f64]) -> Result<Gradients> {
        if tape.values.len() != self.sizes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let batch = tape.batch;
        if tape.values[0].len() != batch * self.input_dim() {
            return Err(Error::State("tape was recorded by a different network".into()));
        }
        let out_len = batch * self.output_dim();
        if grad_output.len() != out_len {
            return Err(Error::dim("mlp output gradient", out_len, grad_output.len()));
        }

        let mut grads = vec![0.0; self.params.len()];
        let last = self.num_layers() - 1;
        let mut delta: Vec<f64> = grad_output
            .iter()
            .zip(&tape.values[last + 1])
            .map(|(g, &y)| g * self.activations[last].derivative_from_output(y))
            .collect();

        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &tape.values[l];
            let w = self.weights(l);
            let w_start = self.offsets[l];
            let (gw, gb) = grads[w_start..w_start + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
            let mut grad_in = vec![0.0; batch * fan_in];
            for r in 0..batch {
                let x = &input[r * fan_in..(r + 1) * fan_in];
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let gi = &mut grad_in[r * fan_in..(r + 1) * fan_in];
                for j in 0..fan_out {
                    let dj = d[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    axpy(dj, x, &mut gw[j * fan_in..(j + 1) * fan_in]);
                    axpy(dj, &w[j * fan_in..(j + 1) * fan_in], gi);
                }
            }
            if l > 0 {
                let act = self.activations[l - 1];
                for (g, &y) in grad_in.iter_mut().zip(input) {
                    *g *= act.derivative_from_output(y);
                }
            }
            delta = grad_in;
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_matches_layer_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::with_hidden(5, &[7, 3], 2, Activation::Relu, Activation::Identity, &mut rng).unwrap();
        assert_eq!(net.parameter_count(), 6 * 7 + 8 * 3 + 4 * 2);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], &[Activation::Tanh, Activation::Identity]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let net = Mlp::from_parameters(&[3, 3], &[Activation::Identity], params).unwrap();
        assert_eq!(net.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        let tape = Tape::new();
        assert!(matches!(net.backward(&tape, &[1.0, 1.0]), Err(Error::State(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::with_hidden(2, &[4], 1, Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut tape = Tape::new();
        net.forward_recorded(&[0.3, 0.1], 1, &mut tape).unwrap();
        let g = net.backward(&tape, &[0.0]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_forward_matches_rowwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::with_hidden(3, &[5, 5], 2, Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let xs = [0.1, 0.2, 0.3, -1.0, 0.5, 2.0];
        let both = net.forward_batch(&xs, 2).unwrap();
        assert_eq!(&both[..2], net.forward(&xs[..3]).unwrap().as_slice());
        assert_eq!(&both[2..], net.forward(&xs[3..]).unwrap().as_slice());
    }
}
