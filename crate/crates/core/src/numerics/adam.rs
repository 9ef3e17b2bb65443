//! Adam optimizer with bias-corrected first and second moments.

use super::NumericsError;

/// Hyperparameters; defaults are the conventional lr 1e-3, betas (0.9, 0.999),
/// epsilon 1e-8.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }
}

/// Per-parameter-tensor moment buffers and step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam step on a flat parameter slice.
///
/// `name` identifies the parameter in diagnostics; non-finite gradients are
/// rejected before any state is touched, so a failed update has no effect.
pub fn adam_update(
    name: &str,
    weights: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<(), NumericsError> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(NumericsError::InvalidArg {
            what: format!(
                "adam_update `{name}`: weights {} / grads {} / state {}",
                weights.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NumericsError::NonFiniteGrad {
            param: name.to_string(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for i in 0..weights.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        weights[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With bias correction, step 1 gives mhat = g, vhat = g^2, so the
        // update is lr * sign(g) (up to eps).
        let mut w = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_update("w", &mut w, &[0.3, -4.0], &mut st, &AdamParams::default()).unwrap();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        // Minimize (w - 3)^2 from w = 0.
        let mut w = vec![0.0];
        let mut st = AdamState::new(1);
        let hp = AdamParams::with_lr(0.05);
        for _ in 0..2000 {
            let g = 2.0 * (w[0] - 3.0);
            adam_update("w", &mut w, &[g], &mut st, &hp).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "ended at {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name_and_no_state_change() {
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        let err = adam_update("classifier.w2", &mut w, &[f64::NAN], &mut st, &AdamParams::default())
            .unwrap_err();
        assert!(err.to_string().contains("classifier.w2"));
        assert_eq!(w[0], 1.0);
        assert_eq!(st.step_count(), 0);
    }
}
