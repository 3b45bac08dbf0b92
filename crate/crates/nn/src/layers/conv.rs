use rand::Rng;
use serde_json::{json, Value};

use super::uniform;
use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, View};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::{LayerState, Param};
use crate::tensor::Tensor2;

/// Stride-1 1D convolution with "same" zero padding, so the output keeps the
/// input length.
///
/// The kernel is stored as `[kernel][in_ch][out_ch]`, which lets each tap be
/// one GEMM between a shifted view of the padded input and a contiguous
/// `in_ch x out_ch` block.
pub struct Conv1d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    state: LayerState,
    grads: Vec<Vec<f64>>,
    /// Padded inputs, one per batch item.
    cache: Vec<Tensor2>,
}

impl Conv1d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || kernel == 0 {
            return Err(NnError::Config("conv1d dimensions must be positive".into()));
        }
        let bound = 1.0 / ((in_ch * kernel) as f64).sqrt();
        let w = uniform(rng, kernel * in_ch * out_ch, bound);
        let b = uniform(rng, out_ch, bound);
        Ok(Self::with_weights(in_ch, out_ch, kernel, w, b))
    }

    /// Build from explicit weights laid out `[kernel][in_ch][out_ch]`.
    pub fn with_weights(in_ch: usize, out_ch: usize, kernel: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        let state = LayerState::new(vec![
            Param::new("weight", vec![kernel, in_ch, out_ch], weight),
            Param::new("bias", vec![out_ch], bias),
        ]);
        let grads = state.zero_grads();
        Conv1d { in_ch, out_ch, kernel, state, grads, cache: Vec::new() }
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn forward_one(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2)> {
        if x.cols() != self.in_ch || x.rows() == 0 {
            return Err(shape_err(format!(
                "conv1d expects T x {} input, got {}x{}",
                self.in_ch,
                x.rows(),
                x.cols()
            )));
        }
        let t = x.rows();
        let padded_len = t + self.kernel - 1;
        let mut xp = Tensor2::zeros(padded_len, self.in_ch);
        let pl = self.pad_left();
        xp.data_mut()[pl * self.in_ch..(pl + t) * self.in_ch].copy_from_slice(x.data());

        let bias = self.state.value(1);
        let mut out = Tensor2::zeros(t, self.out_ch);
        for r in 0..t {
            out.row_mut(r).copy_from_slice(bias);
        }
        let w = self.state.value(0);
        let block = self.in_ch * self.out_ch;
        for j in 0..self.kernel {
            gemm(
                t,
                self.in_ch,
                self.out_ch,
                1.0,
                xp.data(),
                View::row_major(self.in_ch).at(j * self.in_ch),
                w,
                View::row_major(self.out_ch).at(j * block),
                1.0,
                out.data_mut(),
                View::row_major(self.out_ch),
            );
        }
        Ok((out, xp))
    }
}

impl Layer for Conv1d {
    fn kind(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = Vec::with_capacity(xs.len());
        for x in xs {
            let (y, xp) = self.forward_one(x)?;
            outs.push(y);
            cache.push(xp);
        }
        self.cache = cache;
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("conv1d", grads, self.cache.len())?;
        let block = self.in_ch * self.out_ch;
        let pl = self.pad_left();
        let mut dxs = Vec::with_capacity(grads.len());
        for (dy, xp) in grads.iter().zip(&self.cache) {
            let t = xp.rows() + 1 - self.kernel;
            if dy.dims() != (t, self.out_ch) {
                return Err(shape_err(format!("conv1d backward: gradient {:?} vs output ({t}, {})", dy.dims(), self.out_ch)));
            }
            {
                let db = &mut self.grads[1];
                for r in 0..t {
                    for (b, g) in db.iter_mut().zip(dy.row(r)) {
                        *b += g;
                    }
                }
            }
            let mut dxp = Tensor2::zeros(xp.rows(), self.in_ch);
            let w = self.state.value(0);
            for j in 0..self.kernel {
                // dW_j += xp[j..j+t]^T * dy
                gemm(
                    self.in_ch,
                    t,
                    self.out_ch,
                    1.0,
                    xp.data(),
                    View::transposed(self.in_ch).at(j * self.in_ch),
                    dy.data(),
                    View::row_major(self.out_ch),
                    1.0,
                    &mut self.grads[0],
                    View::row_major(self.out_ch).at(j * block),
                );
                // dxp[j..j+t] += dy * W_j^T
                gemm(
                    t,
                    self.out_ch,
                    self.in_ch,
                    1.0,
                    dy.data(),
                    View::row_major(self.out_ch),
                    w,
                    View::transposed(self.out_ch).at(j * block),
                    1.0,
                    dxp.data_mut(),
                    View::row_major(self.in_ch).at(j * self.in_ch),
                );
            }
            let dx = Tensor2::from_vec(t, self.in_ch, dxp.data()[pl * self.in_ch..(pl + t) * self.in_ch].to_vec())?;
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
        json!({ "kind": self.kind(), "in": self.in_ch, "out": self.out_ch, "kernel": self.kernel, "padding": "same" })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct O(T*k*Cin*Cout) convolution, independent of the GEMM path.
    fn naive(x: &Tensor2, w: &[f64], b: &[f64], k: usize, cout: usize) -> Tensor2 {
        let cin = x.cols();
        let pl = (k - 1) / 2;
        Tensor2::from_fn(x.rows(), cout, |t, o| {
            let mut acc = b[o];
            for j in 0..k {
                let src = t as isize + j as isize - pl as isize;
                if src < 0 || src >= x.rows() as isize {
                    continue;
                }
                for c in 0..cin {
                    acc += x.get(src as usize, c) * w[(j * cin + c) * cout + o];
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let (cin, k) = (3, 5);
        let mut w = vec![0.0; k * cin * cin];
        for c in 0..cin {
            w[(2 * cin + c) * cin + c] = 1.0;
        }
        let mut conv = Conv1d::with_weights(cin, cin, k, w, vec![0.0; cin]);
        let x = Tensor2::from_fn(11, cin, |t, c| (t * 7 + c) as f64 * 0.1 - 1.0);
        let y = conv.forward(std::slice::from_ref(&x), Mode::Infer).unwrap();
        assert_eq!(y[0], x);
    }

    #[test]
    fn matches_naive_convolution() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, t) in &[(1, 4, 9, 30), (3, 2, 4, 7), (2, 5, 1, 6), (4, 3, 3, 2)] {
            let mut conv = Conv1d::new(cin, cout, k, &mut rng).unwrap();
            let x = Tensor2::from_vec(t, cin, uniform(&mut rng, t * cin, 1.0)).unwrap();
            let y = conv.forward(std::slice::from_ref(&x), Mode::Train).unwrap();
            let expected = naive(&x, conv.state.value(0), conv.state.value(1), k, cout);
            for (a, b) in y[0].data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let mut conv = Conv1d::with_weights(2, 1, 3, vec![0.0; 6], vec![0.0]);
        assert!(conv.forward(&[Tensor2::zeros(5, 3)], Mode::Infer).is_err());
        assert!(conv.backward(&[Tensor2::zeros(5, 1)]).is_err());
    }
}
