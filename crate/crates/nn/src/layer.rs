use serde_json::{json, Value};

use crate::bundle::NamedArray;
use crate::error::{NnError, Result};
use crate::state::{adam_step, AdamConfig, LayerState};
use crate::tensor::Tensor2;

/// Forward-pass mode. Dropout and batch normalisation behave differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A differentiable layer over a batch of sequences.
///
/// `forward` caches whatever `backward` needs; `backward` takes the gradient
/// of the loss with respect to each output, accumulates parameter gradients
/// into [`Layer::grads`] and returns the gradient with respect to each input.
pub trait Layer: Send {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, xs: &[Tensor2], mode: Mode) -> Result<Vec<Tensor2>>;

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>>;

    fn state(&self) -> &LayerState;

    fn state_mut(&mut self) -> &mut LayerState;

    fn grads(&self) -> &[Vec<f64>];

    fn zero_grad(&mut self);

    /// Non-trainable arrays that are part of the model (e.g. running
    /// statistics).
    fn buffers(&self) -> Vec<NamedArray> {
        Vec::new()
    }

    fn load_buffers(&mut self, _buffers: &[NamedArray]) -> Result<()> {
        Ok(())
    }

    /// Topology description written to model manifests.
    fn describe(&self) -> Value {
        json!({ "kind": self.kind() })
    }

    /// Drop cached activations.
    fn clear_cache(&mut self) {}

    /// All trainable parameters concatenated in declaration order.
    fn flat_params(&self) -> Vec<f64> {
        self.state().params.iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total = self.state().param_count();
        if flat.len() != total {
            return Err(NnError::Shape(format!("{} flat values for {total} parameters", flat.len())));
        }
        let mut offset = 0;
        for p in self.state_mut().params.iter_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Accumulated gradients in the same order as [`Layer::flat_params`].
    fn flat_grads(&self) -> Vec<f64> {
        self.grads().iter().flat_map(|g| g.iter().copied()).collect()
    }

    fn step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.state().params.is_empty() {
            return Ok(());
        }
        let grads = self.grads().to_vec();
        adam_step(self.state_mut(), &grads, cfg)
    }
}

pub(crate) fn check_batch(kind: &'static str, xs: &[Tensor2], cache_len: usize) -> Result<()> {
    if xs.len() != cache_len {
        if cache_len == 0 {
            return Err(NnError::MissingCache(kind));
        }
        return Err(NnError::Shape(format!(
            "{kind}: backward got {} gradients for a batch of {cache_len}",
            xs.len()
        )));
    }
    Ok(())
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
    empty: LayerState,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }

    /// Forward pass that also returns the output of layer `tap`.
    pub fn forward_with_tap(
        &mut self,
        xs: &[Tensor2],
        mode: Mode,
        tap: usize,
    ) -> Result<(Vec<Tensor2>, Vec<Tensor2>)> {
        let mut cur = xs.to_vec();
        let mut tapped = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, mode)?;
            if i == tap {
                tapped = Some(cur.clone());
            }
        }
        let tapped = tapped.ok_or_else(|| NnError::Config(format!("tap index {tap} out of range")))?;
        Ok((cur, tapped))
    }

    /// Backpropagate from the network output down to the output of layer
    /// `stop` (exclusive), returning the gradient at that point.
    pub fn backward_to(&mut self, grads: &[Tensor2], stop: usize) -> Result<Vec<Tensor2>> {
        let mut cur = grads.to_vec();
        for layer in self.layers.iter_mut().skip(stop + 1).rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.state().param_count()).sum()
    }

    /// Every parameter and buffer, prefixed with the layer index.
    pub fn export(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for p in &layer.state().params {
                out.push(NamedArray::new(format!("{i}.{}", p.name), p.shape.clone(), p.value.clone()));
            }
            for b in layer.buffers() {
                out.push(NamedArray::new(format!("{i}.{}", b.name), b.shape, b.data));
            }
        }
        out
    }

    /// Inverse of [`Sequential::export`]. Shapes must match exactly.
    pub fn import(&mut self, arrays: &[NamedArray]) -> Result<()> {
        let mut it = arrays.iter();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for p in layer.state_mut().params.iter_mut() {
                let a = it
                    .next()
                    .ok_or_else(|| NnError::Bundle(format!("missing array for {i}.{}", p.name)))?;
                if a.name != format!("{i}.{}", p.name) || a.shape != p.shape {
                    return Err(NnError::Bundle(format!(
                        "expected {i}.{} {:?}, found {} {:?}",
                        p.name, p.shape, a.name, a.shape
                    )));
                }
                p.value.copy_from_slice(&a.data);
            }
            let expected = layer.buffers();
            let mut loaded = Vec::with_capacity(expected.len());
            for b in &expected {
                let a = it
                    .next()
                    .ok_or_else(|| NnError::Bundle(format!("missing buffer {i}.{}", b.name)))?;
                if a.name != format!("{i}.{}", b.name) || a.shape != b.shape {
                    return Err(NnError::Bundle(format!("buffer mismatch at {}", a.name)));
                }
                loaded.push(NamedArray::new(b.name.clone(), a.shape.clone(), a.data.clone()));
            }
            layer.load_buffers(&loaded)?;
        }
        if it.next().is_some() {
            return Err(NnError::Bundle("more arrays than model parameters".into()));
        }
        Ok(())
    }
}

impl Layer for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, xs: &[Tensor2], mode: Mode) -> Result<Vec<Tensor2>> {
        let mut cur = xs.to_vec();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grads: &[Tensor2]) -> Result<Vec<Tensor2>> {
        let mut cur = grads.to_vec();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    // A container has no parameters of its own; gradient checks reach the
    // children through `layers_mut`.
    fn state(&self) -> &LayerState {
        &self.empty
    }

    fn state_mut(&mut self) -> &mut LayerState {
        &mut self.empty
    }

    fn grads(&self) -> &[Vec<f64>] {
        &[]
    }

    fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(|l| l.zero_grad());
    }

    fn describe(&self) -> Value {
        Value::Array(self.layers.iter().map(|l| l.describe()).collect())
    }

    fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_cache());
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.flat_params()).collect()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.param_count();
        if flat.len() != total {
            return Err(NnError::Shape(format!("{} flat values for {total} parameters", flat.len())));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.state().param_count();
            layer.set_flat_params(&flat[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    fn flat_grads(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.flat_grads()).collect()
    }

    fn step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for layer in &mut self.layers {
            layer.step(cfg)?;
        }
        Ok(())
    }
}
