use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::error::{shape_err, NnError, Result};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::LayerState;
use crate::tensor::Tensor2;

/// Inverted dropout. Identity in inference mode or when `rate == 0`.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
    state: LayerState,
    /// Per-item scale masks; `None` entries mean identity.
    cache: Vec<Option<Vec<f64>>>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed), state: LayerState::empty(), cache: Vec::new() })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, xs: &[Tensor2], mode: Mode) -> Result<Vec<Tensor2>> {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.cache = vec![None; xs.len()];
            return Ok(xs.to_vec());
        }
        let keep = 1.0 - self.rate;
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = Vec::with_capacity(xs.len());
        for x in xs {
            let mask: Vec<f64> = (0..x.data().len())
                .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mut y = x.clone();
            y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
            outs.push(y);
            cache.push(Some(mask));
        }
        self.cache = cache;
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("dropout", grads, self.cache.len())?;
        let mut dxs = Vec::with_capacity(grads.len());
        for (g, mask) in grads.iter().zip(&self.cache) {
            let mut dx = g.clone();
            if let Some(mask) = mask {
                if mask.len() != dx.data().len() {
                    return Err(shape_err("dropout backward: gradient shape differs from output"));
                }
                dx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
            }
            dxs.push(dx);
        }
        Ok(dxs)
    }

    fn state(&self) -> &LayerState {
        &self.state
    }

    fn state_mut(&mut self) -> &mut LayerState {
        &mut self.state
    }

    fn grads(&self) -> &[Vec<f64>] {
        &[]
    }

    fn zero_grad(&mut self) {}

    fn describe(&self) -> Value {
        json!({ "kind": self.kind(), "rate": self.rate })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_at_inference_and_rate_zero() {
        let x = Tensor2::from_fn(20, 3, |t, c| (t + c) as f64);
        let mut d = Dropout::new(0.5, 1).unwrap();
        assert_eq!(d.forward(std::slice::from_ref(&x), Mode::Infer).unwrap()[0], x);
        let mut d0 = Dropout::new(0.0, 1).unwrap();
        assert_eq!(d0.forward(std::slice::from_ref(&x), Mode::Train).unwrap()[0], x);
    }

    #[test]
    fn training_mask_preserves_expectation() {
        let x = Tensor2::from_fn(10_000, 1, |_, _| 1.0);
        let mut d = Dropout::new(0.1, 7).unwrap();
        let y = d.forward(&[x], Mode::Train).unwrap();
        let mean = y[0].sum() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.03);
        assert!(Dropout::new(1.0, 0).is_err());
    }
}
