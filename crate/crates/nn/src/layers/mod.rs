//! Concrete layers. Each owns a [`LayerState`](crate::LayerState) and a
//! matching gradient buffer.

mod activation;
mod attention;
mod batchnorm;
mod conv;
mod dense;
mod dropout;
mod lstm;
mod pool;

pub use activation::LeakyRelu;
pub use attention::{attention_backward, attention_forward, Attention, AttentionCache, AttentionGrads, AttentionParams};
pub use batchnorm::BatchNorm1d;
pub use conv::Conv1d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use lstm::{BiLstm, LstmParams};
pub use pool::MaxPool1d;

use rand::Rng;

pub(crate) fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, fan_in * fan_out, bound)
}
