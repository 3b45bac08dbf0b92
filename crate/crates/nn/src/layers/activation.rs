use serde_json::{json, Value};

use crate::error::Result;
use crate::layer::{check_batch, Layer, Mode};
use crate::state::LayerState;
use crate::tensor::Tensor2;

/// Leaky ReLU; `slope = 0` gives a plain ReLU.
pub struct LeakyRelu {
    slope: f64,
    cache: Vec<Tensor2>,
    state: LayerState,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, cache: Vec::new(), state: LayerState::empty() }
    }

    pub fn relu() -> Self {
        Self::new(0.0)
    }
}

impl Layer for LeakyRelu {
    fn kind(&self) -> &'static str {
        "leaky_relu"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        self.cache = xs.to_vec();
        let s = self.slope;
        Ok(xs.iter().map(|x| x.map(|v| if v > 0.0 { v } else { s * v })).collect())
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("leaky_relu", grads, self.cache.len())?;
        let mut out = Vec::with_capacity(grads.len());
        for (g, x) in grads.iter().zip(&self.cache) {
            let mut dx = g.clone();
            for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                if v <= 0.0 {
                    *d *= self.slope;
                }
            }
            out.push(dx);
        }
        Ok(out)
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
        json!({ "kind": self.kind(), "slope": self.slope })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
