use crate::error::{Error, Result};

use super::{Gradients, Mlp};

/// RMSProp accumulator for one network.
///
/// `ms ← ρ·ms + (1-ρ)·g²`, `θ ← θ - lr·g/√(ms + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    mean_square: Vec<f64>,
    pub learning_rate: f64,
    pub decay_rho: f64,
    pub epsilon_stab: f64,
}

impl RmsPropState {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self::with_params(net, learning_rate, 0.9, 1e-8)
    }

    pub fn with_params(net: &Mlp, learning_rate: f64, decay_rho: f64, epsilon_stab: f64) -> Self {
        Self { mean_square: vec![0.0; net.param_count()], learning_rate, decay_rho, epsilon_stab }
    }

    pub fn mean_square(&self) -> &[f64] {
        &self.mean_square
    }

    /// Applies one update; nothing is modified when a gradient is non-finite.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        let count = grads.iter().count();
        if count != self.mean_square.len() || count != net.param_count() {
            return Err(Error::Shape { expected: self.mean_square.len(), actual: count });
        }
        if !grads.is_finite() {
            return Err(Error::TrainingDivergence { update: 0, what: "non-finite gradient".into() });
        }
        let rho = self.decay_rho;
        for ((p, g), ms) in net.params_mut().zip(grads.iter()).zip(&mut self.mean_square) {
            *ms = rho * *ms + (1.0 - rho) * g * g;
            *p -= self.learning_rate * g / (*ms + self.epsilon_stab).sqrt();
        }
        Ok(())
    }
}
