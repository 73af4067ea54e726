use crate::error::{Error, Result};
use crate::nn::Mlp;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(parameter_count: usize, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn for_net(net: &Mlp, learning_rate: f64) -> Self {
        Self::new(net.parameter_count(), learning_rate)
    }

    pub fn step(&mut self, net: &mut Mlp, gradient: &[f64]) -> Result<()> {
        self.step_slice(net.parameters_mut(), gradient)
    }

    /// Applies one update to an arbitrary parameter slice. The update is
    /// rejected before any state changes if the gradient is not finite.
    pub fn step_slice(&mut self, params: &mut [f64], gradient: &[f64]) -> Result<()> {
        if gradient.len() != self.first_moment.len() || params.len() != gradient.len() {
            return Err(Error::dim("adam gradient", self.first_moment.len(), gradient.len()));
        }
        if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("adam gradient entry {i}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = gradient[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let m_hat = m / bc1;
            let v_hat = v / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Rescales `gradient` in place so its l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(gradient: &mut [f64], max_norm: f64) -> f64 {
    let norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        gradient.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn zero_gradient_leaves_parameters_and_moments() {
        let mut net = Mlp::from_parameters(&[1, 1], &[Activation::Identity], vec![0.7, -0.2]).unwrap();
        let before = net.clone();
        let mut st = AdamState::for_net(&net, 1e-3);
        st.step(&mut net, &[0.0, 0.0]).unwrap();
        assert_eq!(net, before);
        assert!(st.first_moment.iter().chain(&st.second_moment).all(|&m| m == 0.0));
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn single_step_matches_scalar_arithmetic() {
        // fresh state, g = 0.5: m = 0.05, v = 0.00025, m_hat = 0.5, v_hat = 0.25
        // delta = -lr * 0.5 / (0.5 + 1e-8)
        let lr = 0.01;
        let mut p = [1.0];
        let mut st = AdamState::new(1, lr);
        st.step_slice(&mut p, &[0.5]).unwrap();
        let expected = 1.0 - lr * 0.5 / (0.5 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = [1.0, 2.0];
        let mut st = AdamState::new(2, 0.1);
        let err = st.step_slice(&mut p, &[0.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(st.step_count, 0);
        assert_eq!(p, [1.0, 2.0]);
    }
}
