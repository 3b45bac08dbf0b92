use serde_json::{json, Value};

use crate::error::{shape_err, NnError, Result};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::LayerState;
use crate::tensor::Tensor2;

/// Max pooling along time. Output length is `(T - pool) / stride + 1`.
pub struct MaxPool1d {
    pool: usize,
    stride: usize,
    state: LayerState,
    /// (input rows, argmax source row per output element)
    cache: Vec<(usize, Vec<usize>)>,
}

impl MaxPool1d {
    pub fn new(pool: usize, stride: usize) -> Result<Self> {
        if pool == 0 || stride == 0 {
            return Err(NnError::Config("pool size and stride must be positive".into()));
        }
        Ok(MaxPool1d { pool, stride, state: LayerState::empty(), cache: Vec::new() })
    }

    pub fn output_len(&self, t: usize) -> usize {
        if t < self.pool {
            0
        } else {
            (t - self.pool) / self.stride + 1
        }
    }
}

impl Layer for MaxPool1d {
    fn kind(&self) -> &'static str {
        "maxpool1d"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = Vec::with_capacity(xs.len());
        for x in xs {
            let out_len = self.output_len(x.rows());
            if out_len == 0 {
                return Err(shape_err(format!("maxpool: input length {} below pool size {}", x.rows(), self.pool)));
            }
            let c = x.cols();
            let mut y = Tensor2::zeros(out_len, c);
            let mut arg = vec![0usize; out_len * c];
            for o in 0..out_len {
                let start = o * self.stride;
                let yr = y.row_mut(o);
                yr.copy_from_slice(x.row(start));
                for ch in 0..c {
                    arg[o * c + ch] = start;
                }
                for src in start + 1..start + self.pool {
                    let xr = x.row(src);
                    for ch in 0..c {
                        if xr[ch] > yr[ch] {
                            yr[ch] = xr[ch];
                            arg[o * c + ch] = src;
                        }
                    }
                }
            }
            outs.push(y);
            cache.push((x.rows(), arg));
        }
        self.cache = cache;
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("maxpool1d", grads, self.cache.len())?;
        let mut dxs = Vec::with_capacity(grads.len());
        for (dy, (rows, arg)) in grads.iter().zip(&self.cache) {
            let c = dy.cols();
            if arg.len() != dy.rows() * c {
                return Err(shape_err("maxpool backward: gradient shape differs from output"));
            }
            let mut dx = Tensor2::zeros(*rows, c);
            for o in 0..dy.rows() {
                for ch in 0..c {
                    let src = arg[o * c + ch];
                    let v = dx.get(src, ch) + dy.get(o, ch);
                    dx.set(src, ch, v);
                }
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
        json!({ "kind": self.kind(), "pool": self.pool, "stride": self.stride })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pools_pairs() {
        let mut p = MaxPool1d::new(2, 2).unwrap();
        let y = p.forward(&[Tensor2::column(&[1.0, 3.0, 2.0, 5.0])], Mode::Infer).unwrap();
        assert_eq!(y[0].data(), &[3.0, 5.0]);
        let dx = p.backward(&[Tensor2::column(&[10.0, 20.0])]).unwrap();
        assert_eq!(dx[0].data(), &[0.0, 10.0, 0.0, 20.0]);
    }

    #[test]
    fn trailing_remainder_is_dropped() {
        let mut p = MaxPool1d::new(4, 4).unwrap();
        let y = p.forward(&[Tensor2::zeros(1575, 2)], Mode::Infer).unwrap();
        assert_eq!(y[0].rows(), 393);
        assert!(p.forward(&[Tensor2::zeros(3, 1)], Mode::Infer).is_err());
    }
}
