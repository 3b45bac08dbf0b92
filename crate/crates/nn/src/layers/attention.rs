//! Softmax-weighted temporal pooling.
//!
//! For an input `x` of shape `T x d`:
//!
//! ```text
//! F   = tanh(x W + b)        T x u
//! e   = F w_c                T
//! a   = softmax(e)           T
//! ctx = sum_t a_t * x_t      d
//! ```
//!
//! The bias `b` is `T x u`, so a layer instance is tied to one sequence
//! length.

use rand::Rng;
use serde_json::{json, Value};

use super::glorot;
use crate::error::{shape_err, NnError, Result};
use crate::gemm::{gemm, View};
use crate::layer::{check_batch, Layer, Mode};
use crate::loss::softmax;
use crate::state::{LayerState, Param};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d x u`
    pub w: Vec<f64>,
    /// `u`
    pub w_c: Vec<f64>,
    /// `T x u`
    pub b: Vec<f64>,
    pub steps: usize,
    pub dim: usize,
    pub units: usize,
}

impl AttentionParams {
    pub fn init(steps: usize, dim: usize, units: usize, rng: &mut impl Rng) -> Self {
        AttentionParams {
            w: glorot(rng, dim, units),
            w_c: glorot(rng, units, 1),
            b: vec![0.0; steps * units],
            steps,
            dim,
            units,
        }
    }

    fn check(&self, x: &Tensor2) -> Result<()> {
        if self.w.len() != self.dim * self.units || self.w_c.len() != self.units || self.b.len() != self.steps * self.units {
            return Err(shape_err("attention parameters inconsistent with (T, d, u)"));
        }
        if x.dims() != (self.steps, self.dim) {
            return Err(shape_err(format!(
                "attention expects {}x{} input, got {}x{}",
                self.steps,
                self.dim,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }
}

/// Forward values needed by the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub features: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub x: Tensor2,
    pub w: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b: Vec<f64>,
}

/// Returns `(context, alpha, cache)`.
pub fn attention_forward(x: &Tensor2, p: &AttentionParams) -> Result<(Vec<f64>, Vec<f64>, AttentionCache)> {
    p.check(x)?;
    let (t_len, d, u) = (p.steps, p.dim, p.units);
    let mut features = p.b.clone();
    gemm(t_len, d, u, 1.0, x.data(), View::row_major(d), &p.w, View::row_major(u), 1.0, &mut features, View::row_major(u));
    features.iter_mut().for_each(|v| *v = v.tanh());
    let scores: Vec<f64> = (0..t_len)
        .map(|t| features[t * u..(t + 1) * u].iter().zip(&p.w_c).map(|(f, w)| f * w).sum())
        .collect();
    let alpha = softmax(&scores);
    let mut context = vec![0.0; d];
    for (t, &a) in alpha.iter().enumerate() {
        for (c, v) in context.iter_mut().zip(x.row(t)) {
            *c += v * a;
        }
    }
    Ok((context, alpha.clone(), AttentionCache { features, alpha }))
}

/// Analytic gradients of `upstream . context` with respect to `x`, `W`,
/// `w_c` and `b`.
pub fn attention_backward(
    x: &Tensor2,
    p: &AttentionParams,
    cache: Option<&AttentionCache>,
    upstream: &[f64],
) -> Result<AttentionGrads> {
    let cache = cache.ok_or(NnError::MissingCache("attention"))?;
    p.check(x)?;
    let (t_len, d, u) = (p.steps, p.dim, p.units);
    if upstream.len() != d {
        return Err(shape_err(format!("attention upstream gradient has {} entries, expected {d}", upstream.len())));
    }
    let alpha = &cache.alpha;
    let mut dx = Tensor2::zeros(t_len, d);
    let mut dalpha = vec![0.0; t_len];
    for t in 0..t_len {
        let xr = x.row(t);
        dalpha[t] = xr.iter().zip(upstream).map(|(a, b)| a * b).sum();
        for (o, g) in dx.row_mut(t).iter_mut().zip(upstream) {
            *o = alpha[t] * g;
        }
    }
    let weighted: f64 = alpha.iter().zip(&dalpha).map(|(a, g)| a * g).sum();
    let de: Vec<f64> = alpha.iter().zip(&dalpha).map(|(a, g)| a * (g - weighted)).collect();

    let f = &cache.features;
    let mut dw_c = vec![0.0; u];
    let mut da = vec![0.0; t_len * u];
    for t in 0..t_len {
        for k in 0..u {
            let fk = f[t * u + k];
            dw_c[k] += de[t] * fk;
            da[t * u + k] = de[t] * p.w_c[k] * (1.0 - fk * fk);
        }
    }
    let mut dw = vec![0.0; d * u];
    gemm(d, t_len, u, 1.0, x.data(), View::transposed(d), &da, View::row_major(u), 0.0, &mut dw, View::row_major(u));
    gemm(t_len, u, d, 1.0, &da, View::row_major(u), &p.w, View::transposed(u), 1.0, dx.data_mut(), View::row_major(d));
    Ok(AttentionGrads { x: dx, w: dw, w_c: dw_c, b: da })
}

/// Layer wrapper: maps each `T x d` item to a `1 x d` context row.
pub struct Attention {
    steps: usize,
    dim: usize,
    units: usize,
    state: LayerState,
    grads: Vec<Vec<f64>>,
    cache: Vec<(Tensor2, AttentionCache)>,
}

impl Attention {
    pub fn new(steps: usize, dim: usize, units: usize, rng: &mut impl Rng) -> Result<Self> {
        if steps == 0 || dim == 0 || units == 0 {
            return Err(NnError::Config("attention dimensions must be positive".into()));
        }
        Ok(Self::with_params(AttentionParams::init(steps, dim, units, rng)))
    }

    pub fn with_params(p: AttentionParams) -> Self {
        let state = LayerState::new(vec![
            Param::new("w", vec![p.dim, p.units], p.w),
            Param::new("w_c", vec![p.units, 1], p.w_c),
            Param::new("b", vec![p.steps, p.units], p.b),
        ]);
        let grads = state.zero_grads();
        Attention { steps: p.steps, dim: p.dim, units: p.units, state, grads, cache: Vec::new() }
    }

    pub fn params(&self) -> AttentionParams {
        AttentionParams {
            w: self.state.value(0).to_vec(),
            w_c: self.state.value(1).to_vec(),
            b: self.state.value(2).to_vec(),
            steps: self.steps,
            dim: self.dim,
            units: self.units,
        }
    }

    /// Attention weights from the most recent forward pass.
    pub fn last_alpha(&self) -> Vec<Vec<f64>> {
        self.cache.iter().map(|(_, c)| c.alpha.clone()).collect()
    }
}

impl Layer for Attention {
    fn kind(&self) -> &'static str {
        "attention"
    }

    fn forward(&mut self, xs: &[Tensor2], _mode: Mode) -> Result<Vec<Tensor2>> {
        let p = self.params();
        let mut outs = Vec::with_capacity(xs.len());
        let mut cache = Vec::with_capacity(xs.len());
        for x in xs {
            let (ctx, _, c) = attention_forward(x, &p)?;
            outs.push(Tensor2::row_vector(&ctx));
            cache.push((x.clone(), c));
        }
        self.cache = cache;
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        check_batch("attention", grads, self.cache.len())?;
        let p = self.params();
        let mut dxs = Vec::with_capacity(grads.len());
        for (g, (x, c)) in grads.iter().zip(&self.cache) {
            if g.dims() != (1, self.dim) {
                return Err(shape_err("attention backward expects a 1 x d gradient"));
            }
            let ag = attention_backward(x, &p, Some(c), g.data())?;
            for (acc, v) in self.grads[0].iter_mut().zip(&ag.w) {
                *acc += v;
            }
            for (acc, v) in self.grads[1].iter_mut().zip(&ag.w_c) {
                *acc += v;
            }
            for (acc, v) in self.grads[2].iter_mut().zip(&ag.b) {
                *acc += v;
            }
            dxs.push(ag.x);
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
        json!({ "kind": self.kind(), "steps": self.steps, "dim": self.dim, "units": self.units })
    }

    fn clear_cache(&mut self) {
        self.cache.clear();
    }
}
