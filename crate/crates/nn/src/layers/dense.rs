use rand::Rng;
use serde_json::{json, Value};

use super::glorot;
use crate::error::{shape_err, Result};
use crate::gemm::{gemm, View};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::{LayerState, Param};
use crate::tensor::Tensor2;

/// Fully connected layer applied to every row: `y = x W + b`.
pub struct Dense {
    inputs: usize,
    outputs: usize,
    state: LayerState,
    grads: Vec<Vec<f64>>,
    cache: Vec<Tensor2>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self::with_weights(inputs, outputs, glorot(rng, inputs, outputs), vec![0.0; outputs])
    }

    pub fn with_weights(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        let state = LayerState::new(vec![
            Param::new("weight", vec![inputs, outputs], weight),
            Param::new("bias", vec![outputs], bias),
        ]);
        let grads = state.zero_grads();
        Dense { inputs, outputs, state, grads, cache: Vec::new() }
    }
}

impl Layer for Dense {
    fn kind(&self) -> &'static str {
        "dense"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        let mut outs = Vec::with_capacity(xs.len());
        for x in xs {
            if x.cols() != self.inputs {
                return Err(shape_err(format!("dense expects {} inputs, got {}", self.inputs, x.cols())));
            }
            let mut y = Tensor2::zeros(x.rows(), self.outputs);
            for r in 0..x.rows() {
                y.row_mut(r).copy_from_slice(self.state.value(1));
            }
            gemm(
                x.rows(),
                self.inputs,
                self.outputs,
                1.0,
                x.data(),
                View::row_major(self.inputs),
                self.state.value(0),
                View::row_major(self.outputs),
                1.0,
                y.data_mut(),
                View::row_major(self.outputs),
            );
            outs.push(y);
        }
        self.cache = xs.to_vec();
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("dense", grads, self.cache.len())?;
        let mut dxs = Vec::with_capacity(grads.len());
        for (dy, x) in grads.iter().zip(&self.cache) {
            if dy.dims() != (x.rows(), self.outputs) {
                return Err(shape_err("dense backward: gradient shape differs from output"));
            }
            gemm(
                self.inputs,
                x.rows(),
                self.outputs,
                1.0,
                x.data(),
                View::transposed(self.inputs),
                dy.data(),
                View::row_major(self.outputs),
                1.0,
                &mut self.grads[0],
                View::row_major(self.outputs),
            );
            for r in 0..dy.rows() {
                for (b, g) in self.grads[1].iter_mut().zip(dy.row(r)) {
                    *b += g;
                }
            }
            let mut dx = Tensor2::zeros(x.rows(), self.inputs);
            gemm(
                x.rows(),
                self.outputs,
                self.inputs,
                1.0,
                dy.data(),
                View::row_major(self.outputs),
                self.state.value(0),
                View::transposed(self.outputs),
                0.0,
                dx.data_mut(),
                View::row_major(self.inputs),
            );
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
        &self.grads
    }

    fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    fn describe(&self) -> Value {
        json!({ "kind": self.kind(), "in": self.inputs, "out": self.outputs })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
