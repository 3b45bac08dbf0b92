use rand::Rng;
use serde_json::{json, Value};

use super::uniform;
use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, View};
use crate::layer::{check_batch, Layer, Mode};
use crate::state::{LayerState, Param};
use crate::tensor::Tensor2;

/// Weights of one LSTM direction. Gate blocks are ordered input, forget,
/// cell candidate, output along the `4h` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `d x 4h`
    pub w_x: Vec<f64>,
    /// `h x 4h`
    pub w_h: Vec<f64>,
    /// `4h`
    pub bias: Vec<f64>,
}

impl LstmParams {
    /// Uniform in `+-1/sqrt(fan_in)`, forget-gate bias set to 1.
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_x = uniform(rng, input * 4 * hidden, 1.0 / (input as f64).sqrt());
        let w_h = uniform(rng, hidden * 4 * hidden, 1.0 / (hidden as f64).sqrt());
        let mut bias = uniform(rng, 4 * hidden, 1.0 / (hidden as f64).sqrt());
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        LstmParams { w_x, w_h, bias }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmParams { w_x: vec![0.0; input * 4 * hidden], w_h: vec![0.0; hidden * 4 * hidden], bias: vec![0.0; 4 * hidden] }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cached activations of one direction over one sequence.
struct DirCache {
    x: Tensor2,
    /// Post-nonlinearity gates, `T x 4h`.
    gates: Vec<f64>,
    /// Cell states `c_0..c_{T-1}`, `T x h`.
    cells: Vec<f64>,
    /// Hidden states, `T x h`.
    hidden: Vec<f64>,
}

fn run_direction(x: &Tensor2, w_x: &[f64], w_h: &[f64], bias: &[f64], h: usize) -> DirCache {
    let t_len = x.rows();
    let d = x.cols();
    let g4 = 4 * h;
    let mut gates = vec![0.0; t_len * g4];
    for t in 0..t_len {
        gates[t * g4..(t + 1) * g4].copy_from_slice(bias);
    }
    gemm(t_len, d, g4, 1.0, x.data(), View::row_major(d), w_x, View::row_major(g4), 1.0, &mut gates, View::row_major(g4));
    let mut cells = vec![0.0; t_len * h];
    let mut hidden = vec![0.0; t_len * h];
    for t in 0..t_len {
        let (prev_h, prev_c) = if t == 0 {
            (None, None)
        } else {
            (Some(&hidden[(t - 1) * h..t * h]), Some(&cells[(t - 1) * h..t * h]))
        };
        let z = &mut gates[t * g4..(t + 1) * g4];
        if let Some(ph) = prev_h {
            for (k, &hk) in ph.iter().enumerate() {
                if hk == 0.0 {
                    continue;
                }
                let row = &w_h[k * g4..(k + 1) * g4];
                for (zj, wj) in z.iter_mut().zip(row) {
                    *zj += hk * wj;
                }
            }
        }
        for j in 0..h {
            z[j] = sigmoid(z[j]);
            z[h + j] = sigmoid(z[h + j]);
            z[2 * h + j] = z[2 * h + j].tanh();
            z[3 * h + j] = sigmoid(z[3 * h + j]);
        }
        let mut c_new = vec![0.0; h];
        for j in 0..h {
            let cp = prev_c.map_or(0.0, |c| c[j]);
            c_new[j] = z[h + j] * cp + z[j] * z[2 * h + j];
        }
        let o: Vec<f64> = (0..h).map(|j| z[3 * h + j] * c_new[j].tanh()).collect();
        cells[t * h..(t + 1) * h].copy_from_slice(&c_new);
        hidden[t * h..(t + 1) * h].copy_from_slice(&o);
    }
    DirCache { x: x.clone(), gates, cells, hidden }
}

/// Backward through time. `dh_out` is `T x h`. Accumulates into the three
/// gradient buffers and returns `dL/dx`.
fn backprop_direction(
    cache: &DirCache,
    dh_out: &[f64],
    w_x: &[f64],
    w_h: &[f64],
    h: usize,
    gw_x: &mut [f64],
    gw_h: &mut [f64],
    g_bias: &mut [f64],
) -> Tensor2 {
    let t_len = cache.x.rows();
    let d = cache.x.cols();
    let g4 = 4 * h;
    let mut dz_all = vec![0.0; t_len * g4];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for t in (0..t_len).rev() {
        let z = &cache.gates[t * g4..(t + 1) * g4];
        let c = &cache.cells[t * h..(t + 1) * h];
        let dz = &mut dz_all[t * g4..(t + 1) * g4];
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            let tc = c[j].tanh();
            let dh = dh_out[t * h + j] + dh_next[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            let c_prev = if t == 0 { 0.0 } else { cache.cells[(t - 1) * h + j] };
            dz[j] = dc * g * i * (1.0 - i);
            dz[h + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - g * g);
            dz[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        // dh_prev = dz * W_h^T
        for (k, dh) in dh_next.iter_mut().enumerate() {
            let row = &w_h[k * g4..(k + 1) * g4];
            *dh = row.iter().zip(dz.iter()).map(|(w, g)| w * g).sum();
        }
    }
    for t in 0..t_len {
        for (b, g) in g_bias.iter_mut().zip(&dz_all[t * g4..(t + 1) * g4]) {
            *b += g;
        }
    }
    // dW_x += x^T dZ
    gemm(d, t_len, g4, 1.0, cache.x.data(), View::transposed(d), &dz_all, View::row_major(g4), 1.0, gw_x, View::row_major(g4));
    // dW_h += H_prev^T dZ[1..], H_prev rows are h_0..h_{T-2}
    if t_len > 1 {
        gemm(
            h,
            t_len - 1,
            g4,
            1.0,
            &cache.hidden,
            View::transposed(h),
            &dz_all,
            View::row_major(g4).at(g4),
            1.0,
            gw_h,
            View::row_major(g4),
        );
    }
    let mut dx = Tensor2::zeros(t_len, d);
    gemm(t_len, g4, d, 1.0, &dz_all, View::row_major(g4), w_x, View::transposed(g4), 0.0, dx.data_mut(), View::row_major(d));
    dx
}

/// Bidirectional LSTM: a forward pass left to right and an independent
/// backward pass right to left, concatenated per step as `[h_fw; h_bw]`.
pub struct BiLstm {
    input: usize,
    hidden: usize,
    state: LayerState,
    grads: Vec<Vec<f64>>,
    cache: Vec<(DirCache, DirCache)>,
}

impl BiLstm {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(NnError::Config("bilstm dimensions must be positive".into()));
        }
        let fw = LstmParams::init(input, hidden, rng);
        let bw = LstmParams::init(input, hidden, rng);
        Ok(Self::with_params(input, hidden, fw, bw))
    }

    pub fn with_params(input: usize, hidden: usize, fw: LstmParams, bw: LstmParams) -> Self {
        let g4 = 4 * hidden;
        let mut params = Vec::with_capacity(6);
        for (prefix, p) in [("fw", fw), ("bw", bw)] {
            params.push(Param::new(format!("{prefix}.w_x"), vec![input, g4], p.w_x));
            params.push(Param::new(format!("{prefix}.w_h"), vec![hidden, g4], p.w_h));
            params.push(Param::new(format!("{prefix}.bias"), vec![g4], p.bias));
        }
        let state = LayerState::new(params);
        let grads = state.zero_grads();
        BiLstm { input, hidden, state, grads, cache: Vec::new() }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn direction_params(&self, backward: bool) -> LstmParams {
        let base = if backward { 3 } else { 0 };
        LstmParams {
            w_x: self.state.value(base).to_vec(),
            w_h: self.state.value(base + 1).to_vec(),
            bias: self.state.value(base + 2).to_vec(),
        }
    }
}

impl Layer for BiLstm {
    fn kind(&self) -> &'static str {
        "bilstm"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        let h = self.hidden;
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = Vec::with_capacity(xs.len());
        for x in xs {
            if x.cols() != self.input || x.rows() == 0 {
                return Err(shape_err(format!("bilstm expects T x {} input, got {:?}", self.input, x.dims())));
            }
            let s = &self.state;
            let fw = run_direction(x, s.value(0), s.value(1), s.value(2), h);
            let bw = run_direction(&x.reversed_rows(), s.value(3), s.value(4), s.value(5), h);
            let t_len = x.rows();
            let mut y = Tensor2::zeros(t_len, 2 * h);
            for t in 0..t_len {
                let row = y.row_mut(t);
                row[..h].copy_from_slice(&fw.hidden[t * h..(t + 1) * h]);
                let rt = t_len - 1 - t;
                row[h..].copy_from_slice(&bw.hidden[rt * h..(rt + 1) * h]);
            }
            outs.push(y);
            cache.push((fw, bw));
        }
        self.cache = cache;
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("bilstm", grads, self.cache.len())?;
        let h = self.hidden;
        let mut dxs = Vec::with_capacity(grads.len());
        for (dy, (fw, bw)) in grads.iter().zip(&self.cache) {
            let t_len = fw.x.rows();
            if dy.dims() != (t_len, 2 * h) {
                return Err(shape_err("bilstm backward: gradient shape differs from output"));
            }
            let mut dh_fw = vec![0.0; t_len * h];
            let mut dh_bw = vec![0.0; t_len * h];
            for t in 0..t_len {
                let row = dy.row(t);
                dh_fw[t * h..(t + 1) * h].copy_from_slice(&row[..h]);
                let rt = t_len - 1 - t;
                dh_bw[rt * h..(rt + 1) * h].copy_from_slice(&row[h..]);
            }
            let (g_fw, g_bw) = self.grads.split_at_mut(3);
            let (gx, rest) = g_fw.split_at_mut(1);
            let (gh, gb) = rest.split_at_mut(1);
            let dx_fw = backprop_direction(
                fw,
                &dh_fw,
                self.state.value(0),
                self.state.value(1),
                h,
                &mut gx[0],
                &mut gh[0],
                &mut gb[0],
            );
            let (gx, rest) = g_bw.split_at_mut(1);
            let (gh, gb) = rest.split_at_mut(1);
            let dx_bw_rev = backprop_direction(
                bw,
                &dh_bw,
                self.state.value(3),
                self.state.value(4),
                h,
                &mut gx[0],
                &mut gh[0],
                &mut gb[0],
            );
            let dx_bw = dx_bw_rev.reversed_rows();
            let mut dx = dx_fw;
            dx.data_mut().iter_mut().zip(dx_bw.data()).for_each(|(a, b)| *a += b);
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
        json!({ "kind": self.kind(), "in": self.input, "hidden": self.hidden })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_parameters_and_input_give_zero_output() {
        let mut l = BiLstm::with_params(3, 4, LstmParams::zeros(3, 4), LstmParams::zeros(3, 4));
        let y = l.forward(&[Tensor2::zeros(6, 3)], Mode::Infer).unwrap();
        assert!(y[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(y[0].dims(), (6, 8));
    }

    #[test]
    fn time_reversal_swaps_directions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let fw = LstmParams::init(3, 4, &mut rng);
        let bw = LstmParams::init(3, 4, &mut rng);
        let x = Tensor2::from_vec(6, 3, uniform(&mut rng, 18, 1.0)).unwrap();
        let mut a = BiLstm::with_params(3, 4, fw.clone(), bw.clone());
        let mut b = BiLstm::with_params(3, 4, bw, fw);
        let ya = a.forward(std::slice::from_ref(&x), Mode::Infer).unwrap().remove(0);
        let yb = b.forward(&[x.reversed_rows()], Mode::Infer).unwrap().remove(0);
        for t in 0..6 {
            let ra = ya.row(t);
            let rb = yb.row(5 - t);
            for j in 0..4 {
                assert!((ra[j] - rb[4 + j]).abs() < 1e-14);
                assert!((ra[4 + j] - rb[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(2, 3, &mut rng);
        assert!(p.bias[3..6].iter().all(|&b| b == 1.0));
    }
}
