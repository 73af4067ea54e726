use crate::error::{Error, Result};

/// Mean absolute deviation and its subgradient with respect to `prediction`.
/// The subgradient at an exact tie is 0.
pub fn l1_loss(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() {
        return Err(Error::dim("l1 loss", prediction.len(), target.len()));
    }
    let n = prediction.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Mean squared error and its gradient.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() {
        return Err(Error::dim("mse loss", prediction.len(), target.len()));
    }
    let n = prediction.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

/// Output of [`gaussian_kl`].
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub value: f64,
    pub grad_mean: Vec<f64>,
    pub grad_log_variance: Vec<f64>,
}

/// KL( N(mean, diag(exp(log_variance))) || N(0, I) ), summed over dimensions.
pub fn gaussian_kl(mean: &[f64], log_variance: &[f64]) -> Result<KlTerm> {
    if mean.len() != log_variance.len() {
        return Err(Error::dim("gaussian kl", mean.len(), log_variance.len()));
    }
    let mut value = 0.0;
    let mut grad_mean = Vec::with_capacity(mean.len());
    let mut grad_log_variance = Vec::with_capacity(mean.len());
    for (&m, &lv) in mean.iter().zip(log_variance) {
        let var = lv.exp();
        // expm1 keeps small-lv terms accurate: var - 1 - lv ~ lv^2/2
        value += 0.5 * (m * m + (lv.exp_m1() - lv));
        grad_mean.push(m);
        grad_log_variance.push(0.5 * (var - 1.0));
    }
    Ok(KlTerm {
        value,
        grad_mean,
        grad_log_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_identical_is_zero() {
        let (l, g) = l1_loss(&[1.0, -2.0], &[1.0, -2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn l1_arithmetic() {
        let (l, g) = l1_loss(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 1.5);
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn l1_length_mismatch() {
        assert!(l1_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]).unwrap().value, 0.0);
    }

    #[test]
    fn kl_unit_mean_shift() {
        assert_eq!(gaussian_kl(&[1.0], &[0.0]).unwrap().value, 0.5);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mean = [0.3, -1.2, 0.05];
        let lv = [-0.4, 0.7, 0.0];
        let kl = gaussian_kl(&mean, &lv).unwrap();
        let h = 1e-5;
        for i in 0..3 {
            let (mut mp, mut mm) = (mean, mean);
            mp[i] += h;
            mm[i] -= h;
            let fd = (gaussian_kl(&mp, &lv).unwrap().value - gaussian_kl(&mm, &lv).unwrap().value) / (2.0 * h);
            assert!((fd - kl.grad_mean[i]).abs() <= 1e-3 * fd.abs().max(1e-6));
            let (mut lp, mut lm) = (lv, lv);
            lp[i] += h;
            lm[i] -= h;
            let fd = (gaussian_kl(&mean, &lp).unwrap().value - gaussian_kl(&mean, &lm).unwrap().value) / (2.0 * h);
            assert!((fd - kl.grad_log_variance[i]).abs() <= 1e-3 * fd.abs().max(1e-6));
        }
    }
}
