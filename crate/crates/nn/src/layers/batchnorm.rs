use serde_json::{json, Value};

use crate::bundle::NamedArray;
use crate::error::{shape_err, NnError, Result};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::{LayerState, Param};
use crate::tensor::Tensor2;

/// Per-channel batch normalisation over all (item, time) positions of a
/// batch.
///
/// In training mode the batch statistics are used and the running
/// statistics are updated with `running = (1 - momentum) * running +
/// momentum * batch`. In inference mode the running statistics are used and
/// the layer is an affine map, which is what saliency backpropagation sees.
pub struct BatchNorm1d {
    channels: usize,
    eps: f64,
    momentum: f64,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    state: LayerState,
    grads: Vec<Vec<f64>>,
    cache: Option<BnCache>,
}

struct BnCache {
    mode: Mode,
    xhat: Vec<Tensor2>,
    inv_std: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        let state = LayerState::new(vec![
            Param::new("gamma", vec![channels], vec![1.0; channels]),
            Param::new("beta", vec![channels], vec![0.0; channels]),
        ]);
        let grads = state.zero_grads();
        BatchNorm1d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            state,
            grads,
            cache: None,
        }
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }
}

impl Layer for BatchNorm1d {
    fn kind(&self) -> &'static str {
        "batchnorm1d"
    }

    fn forward(&mut self, xs: &[Tensor2], mode: Mode) -> Result<Vec<Tensor2>> {
        let c = self.channels;
        for x in xs {
            if x.cols() != c {
                return Err(shape_err(format!("batchnorm expects {c} channels, got {}", x.cols())));
            }
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let count: usize = xs.iter().map(Tensor2::rows).sum();
                if count == 0 {
                    return Err(shape_err("batchnorm: empty batch"));
                }
                let n = count as f64;
                let mut mean = vec![0.0; c];
                for x in xs {
                    for r in 0..x.rows() {
                        for (m, v) in mean.iter_mut().zip(x.row(r)) {
                            *m += v;
                        }
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; c];
                for x in xs {
                    for r in 0..x.rows() {
                        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                            *s += (v - m) * (v - m);
                        }
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                for i in 0..c {
                    self.running_mean[i] = (1.0 - self.momentum) * self.running_mean[i] + self.momentum * mean[i];
                    self.running_var[i] = (1.0 - self.momentum) * self.running_var[i] + self.momentum * var[i];
                }
                (mean, var)
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let gamma = self.state.value(0);
        let beta = self.state.value(1);
        let mut outs = Vec::with_capacity(xs.len());
        let mut xhats = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xhat = x.clone();
            let mut y = Tensor2::zeros(x.rows(), c);
            for r in 0..x.rows() {
                let xr = xhat.row_mut(r);
                for i in 0..c {
                    xr[i] = (xr[i] - mean[i]) * inv_std[i];
                }
                let yr = y.row_mut(r);
                for i in 0..c {
                    yr[i] = gamma[i] * xr[i] + beta[i];
                }
            }
            outs.push(y);
            xhats.push(xhat);
        }
        self.cache = Some(BnCache { mode, xhat: xhats, inv_std });
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        let cache = self.cache.as_ref().ok_or(NnError::MissingCache("batchnorm1d"))?;
        check_batch("batchnorm1d", grads, cache.xhat.len())?;
        let c = self.channels;
        let gamma = self.state.value(0).to_vec();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (dy, xhat) in grads.iter().zip(&cache.xhat) {
            if dy.dims() != xhat.dims() {
                return Err(shape_err("batchnorm backward: gradient shape differs from output"));
            }
            for r in 0..dy.rows() {
                for i in 0..c {
                    sum_dy[i] += dy.get(r, i);
                    sum_dy_xhat[i] += dy.get(r, i) * xhat.get(r, i);
                }
            }
        }
        for i in 0..c {
            self.grads[0][i] += sum_dy_xhat[i];
            self.grads[1][i] += sum_dy[i];
        }
        let mut dxs = Vec::with_capacity(grads.len());
        match cache.mode {
            Mode::Infer => {
                for dy in grads {
                    let mut dx = dy.clone();
                    for r in 0..dx.rows() {
                        let row = dx.row_mut(r);
                        for i in 0..c {
                            row[i] *= gamma[i] * cache.inv_std[i];
                        }
                    }
                    dxs.push(dx);
                }
            }
            Mode::Train => {
                let n: f64 = cache.xhat.iter().map(|x| x.rows() as f64).sum();
                // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
                for (dy, xhat) in grads.iter().zip(&cache.xhat) {
                    let mut dx = Tensor2::zeros(dy.rows(), c);
                    for r in 0..dy.rows() {
                        let row = dx.row_mut(r);
                        for i in 0..c {
                            row[i] = gamma[i] * cache.inv_std[i] / n
                                * (n * dy.get(r, i) - sum_dy[i] - xhat.get(r, i) * sum_dy_xhat[i]);
                        }
                    }
                    dxs.push(dx);
                }
            }
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

    fn buffers(&self) -> Vec<NamedArray> {
        vec![
            NamedArray::new("running_mean", vec![self.channels], self.running_mean.clone()),
            NamedArray::new("running_var", vec![self.channels], self.running_var.clone()),
        ]
    }

    fn load_buffers(&mut self, buffers: &[NamedArray]) -> Result<()> {
        for b in buffers {
            if b.data.len() != self.channels {
                return Err(shape_err(format!("batchnorm buffer '{}' has wrong length", b.name)));
            }
            match b.name.as_str() {
                "running_mean" => self.running_mean.copy_from_slice(&b.data),
                "running_var" => self.running_var.copy_from_slice(&b.data),
                other => return Err(NnError::Bundle(format!("unknown batchnorm buffer '{other}'"))),
            }
        }
        Ok(())
    }

    fn describe(&self) -> Value {
        json!({ "kind": self.kind(), "channels": self.channels, "eps": self.eps, "momentum": self.momentum })
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
