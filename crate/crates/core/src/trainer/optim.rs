use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::LstmWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub decay: f64,
    pub eps: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            decay: 0.95,
            eps: 1e-6,
        }
    }
}

/// Running averages of squared gradients and squared updates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(n_params: usize) -> Self {
        Self {
            sq_grad: vec![0.0; n_params],
            sq_update: vec![0.0; n_params],
        }
    }
}

/// One Adadelta update, in place. A non-finite gradient leaves both the
/// weights and the state untouched.
pub fn adadelta_step(
    weights: &mut LstmWeights,
    grads: &LstmWeights,
    state: &mut AdadeltaState,
    config: AdadeltaConfig,
) -> Result<()> {
    let n = weights.params.len();
    if grads.params.len() != n || state.sq_grad.len() != n || state.sq_update.len() != n {
        return Err(Error::Shape("adadelta buffers differ in length".into()));
    }
    if grads.params.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let AdadeltaConfig { decay, eps } = config;
    for k in 0..n {
        let g = grads.params[k];
        let eg = decay * state.sq_grad[k] + (1.0 - decay) * g * g;
        let dx = -((state.sq_update[k] + eps).sqrt() / (eg + eps).sqrt()) * g;
        state.sq_grad[k] = eg;
        state.sq_update[k] = decay * state.sq_update[k] + (1.0 - decay) * dx * dx;
        weights.params[k] += dx;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::LstmDims;

    fn scalar_dims() -> LstmDims {
        LstmDims::new(1, 1, 1).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixpoint() {
        let d = scalar_dims();
        let mut w = crate::lstm::init_weights(d, 5);
        let mut state = AdadeltaState::new(d.n_params());
        let before = w.clone();
        adadelta_step(&mut w, &LstmWeights::zeros(d), &mut state, AdadeltaConfig::default()).unwrap();
        assert_eq!(w, before);
        assert!(state.sq_grad.iter().chain(&state.sq_update).all(|v| *v == 0.0));
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let d = scalar_dims();
        let mut w = LstmWeights::zeros(d);
        let mut g = LstmWeights::zeros(d);
        g.params[0] = 1.0;
        let mut state = AdadeltaState::new(d.n_params());
        adadelta_step(&mut w, &g, &mut state, AdadeltaConfig::default()).unwrap();
        assert!((state.sq_grad[0] - 0.05).abs() < 1e-15);
        let expected = -(1e-6f64 / 0.050001).sqrt();
        assert!((w.params[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let d = scalar_dims();
        let mut w = LstmWeights::zeros(d);
        let mut g = LstmWeights::zeros(d);
        g.params[0] = 1.0;
        g.params[1] = f64::NAN;
        let mut state = AdadeltaState::new(d.n_params());
        let err = adadelta_step(&mut w, &g, &mut state, AdadeltaConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient)));
        assert!(w.params.iter().all(|v| *v == 0.0));
        assert!(state.sq_grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn frozen_after_zero_gradients() {
        let d = scalar_dims();
        let mut w = crate::lstm::init_weights(d, 2);
        let mut state = AdadeltaState::new(d.n_params());
        let mut g = LstmWeights::zeros(d);
        g.params.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 - 3.0);
        adadelta_step(&mut w, &g, &mut state, AdadeltaConfig::default()).unwrap();
        let after_one = w.clone();
        let zero = LstmWeights::zeros(d);
        adadelta_step(&mut w, &zero, &mut state, AdadeltaConfig::default()).unwrap();
        adadelta_step(&mut w, &zero, &mut state, AdadeltaConfig::default()).unwrap();
        assert_eq!(w, after_one);
    }
}
