//! Adam: adaptive moment estimation with bias correction.

use crate::config::TrainConfig;
use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// First and second moment estimates per parameter tensor, plus the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            m: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&mut Tensor<T>]) -> Self {
        Self::new(&params.iter().map(|p| p.numel()).collect::<Vec<_>>())
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One optimizer step over all parameter tensors:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr * mhat / (sqrt(vhat) + eps)` with bias-corrected moments.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} parameter tensors vs {} moment buffers",
            params.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.adam_eps);
    let corr1 = T::from_f64(1.0 - cfg.adam_beta1.powi(state.t as i32));
    let corr2 = T::from_f64(1.0 - cfg.adam_beta2.powi(state.t as i32));

    for ((param, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if param.numel() != m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: parameter of {} elements vs moment buffer of {}",
                param.numel(),
                m.len()
            )));
        }
        param.ensure_grad();
        let grads = param.grad().expect("grad allocated").to_vec();
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grads[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    fn tensor_with_grad(values: &[f64], grads: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::from_vec(&[values.len()], values.to_vec());
        t.grad_mut().copy_from_slice(grads);
        t
    }

    #[test]
    fn first_step_magnitude_is_the_learning_rate() {
        let cfg = cfg();
        for &g in &[0.5, -3.0, 1e-3, 40.0] {
            let mut p = tensor_with_grad(&[1.0], &[g]);
            let mut params = [&mut p];
            let mut state = AdamState::for_params(&params);
            adam_step(&mut params, &mut state, &cfg).unwrap();
            let update = 1.0 - params[0].data()[0];
            // Exact closed-form first step of the bias-corrected update.
            let exact = cfg.learning_rate * g.abs() / (g.abs() + cfg.adam_eps);
            assert_relative_eq!(update.abs(), exact, max_relative = 1e-9);
            // The epsilon-inside-the-correction formulation agrees to well
            // under the epsilon scale, and both are ~ the learning rate.
            let variant = cfg.learning_rate * g.abs()
                / (g.abs() + cfg.adam_eps * (1.0 - cfg.adam_beta2).sqrt());
            assert_relative_eq!(update.abs(), variant, max_relative = 1e-4);
            assert_relative_eq!(update.abs(), cfg.learning_rate, max_relative = 1e-4);
            assert_eq!(update.signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let cfg = cfg();
        let mut p = tensor_with_grad(&[1.5, -2.5], &[0.0, 0.0]);
        let mut params = [&mut p];
        let mut state = AdamState::for_params(&params);
        for _ in 0..25 {
            adam_step(&mut params, &mut state, &cfg).unwrap();
        }
        assert_eq!(params[0].data(), &[1.5, -2.5]);
        assert_eq!(state.step_count(), 25);
    }

    #[test]
    fn identical_gradient_histories_update_identically() {
        let cfg = cfg();
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut p = tensor_with_grad(&[0.3, 0.3], &[0.0, 0.0]);
        let mut params = [&mut p];
        let mut state = AdamState::for_params(&params);
        for _ in 0..50 {
            let g = rng.random_range(-1.0..1.0);
            params[0].grad_mut().copy_from_slice(&[g, g]);
            adam_step(&mut params, &mut state, &cfg).unwrap();
            assert_eq!(params[0].data()[0], params[0].data()[1]);
        }
    }

    #[test]
    fn moment_buffer_mismatch_is_rejected() {
        let cfg = cfg();
        let mut p = tensor_with_grad(&[1.0, 2.0], &[0.1, 0.1]);
        let mut state = AdamState::new(&[3]);
        let mut params = [&mut p];
        assert!(matches!(
            adam_step(&mut params, &mut state, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
