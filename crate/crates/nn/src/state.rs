use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// A named, shaped parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Param { name: name.into(), shape, value }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Trainable parameters of one layer together with their Adam moments.
///
/// Moment arrays always shape-match `params`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub params: Vec<Param>,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl LayerState {
    pub fn new(params: Vec<Param>) -> Self {
        let first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        LayerState { params, first_moment, second_moment, step_count: 0 }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Zeroed gradient buffers aligned with the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    #[inline]
    pub fn value(&self, idx: usize) -> &[f64] {
        &self.params[idx].value
    }

    pub fn reset_moments(&mut self) {
        for (m, v) in self.first_moment.iter_mut().zip(self.second_moment.iter_mut()) {
            m.iter_mut().for_each(|x| *x = 0.0);
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.step_count = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 weight decay added to the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// One bias-corrected Adam update of every parameter in `state`.
pub fn adam_step(state: &mut LayerState, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(shape_err(format!(
            "adam: {} gradient arrays for {} parameters",
            grads.len(),
            state.params.len()
        )));
    }
    for (p, g) in state.params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(shape_err(format!(
                "adam: gradient for '{}' has {} elements, expected {}",
                p.name,
                g.len(),
                p.len()
            )));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in state
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.value.len() {
            let gi = g[i] + cfg.weight_decay * p.value[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(values: Vec<f64>) -> LayerState {
        let n = values.len();
        LayerState::new(vec![Param::new("w", vec![n], values)])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = state(vec![0.5, -1.0, 2.0]);
        adam_step(&mut s, &[vec![0.0; 3]], &AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(s.params[0].value, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // -lr * g / (|g| + eps).
        let g = vec![0.3, -2.0, 1e-3];
        let w0 = vec![1.0, 1.0, 1.0];
        let cfg = AdamConfig::with_lr(0.01);
        let mut s = state(w0.clone());
        adam_step(&mut s, &[g.clone()], &cfg).unwrap();
        for i in 0..3 {
            let expected = w0[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((s.params[0].value[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let mut a = state(vec![0.1, 0.2]);
        let mut b = a.clone();
        let g = vec![vec![0.7, -0.4]];
        for _ in 0..3 {
            adam_step(&mut a, &g, &AdamConfig::default()).unwrap();
            adam_step(&mut b, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = state(vec![0.1, 0.2]);
        assert!(adam_step(&mut s, &[vec![0.0; 3]], &AdamConfig::default()).is_err());
        assert!(adam_step(&mut s, &[], &AdamConfig::default()).is_err());
    }
}
