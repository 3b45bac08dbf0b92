use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::layer::{Layer, Mode};
use crate::tensor::Tensor2;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are treated as this when forming relative errors.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst element, e.g. `param[12]` or `input[0][3]`.
    pub worst: String,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares a layer's backward pass against central finite differences on
/// random inputs of the given `(rows, cols)` shapes.
///
/// The scalar probed is `sum(r * y)` for a fixed random `r`, so every output
/// element contributes with a distinct weight.
pub fn grad_check(
    layer: &mut dyn Layer,
    input_shapes: &[(usize, usize)],
    mode: Mode,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor2> = input_shapes
        .iter()
        .map(|&(r, c)| Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    grad_check_with_inputs(layer, &inputs, mode, tolerance, seed.wrapping_add(1))
}

pub fn grad_check_with_inputs(
    layer: &mut dyn Layer,
    inputs: &[Tensor2],
    mode: Mode,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if inputs.is_empty() {
        return Err(shape_err("grad_check needs at least one input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outputs = layer.forward(inputs, mode)?;
    let weights: Vec<Tensor2> = outputs
        .iter()
        .map(|y| Tensor2::from_fn(y.rows(), y.cols(), |_, _| rng.random_range(-1.0..1.0)))
        .collect();

    layer.zero_grad();
    let input_grads = layer.backward(&weights)?;
    let param_grads = layer.flat_grads();

    let probe = |layer: &mut dyn Layer, xs: &[Tensor2]| -> Result<f64> {
        let ys = layer.forward(xs, mode)?;
        Ok(ys
            .iter()
            .zip(&weights)
            .map(|(y, w)| y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };

    let mut worst = (0.0_f64, String::from("none"));
    let mut checked = 0;
    let mut record = |err: f64, label: &dyn Fn() -> String| {
        // NaN must register as a failure.
        if err.is_nan() || err > worst.0 {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, label());
        }
    };

    let base = layer.flat_params();
    let mut params = base.clone();
    for i in 0..params.len() {
        params[i] = base[i] + FD_STEP;
        layer.set_flat_params(&params)?;
        let plus = probe(layer, inputs)?;
        params[i] = base[i] - FD_STEP;
        layer.set_flat_params(&params)?;
        let minus = probe(layer, inputs)?;
        params[i] = base[i];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        record(rel_error(param_grads[i], numeric), &|| format!("param[{i}]"));
        checked += 1;
    }
    layer.set_flat_params(&base)?;

    let mut xs = inputs.to_vec();
    for b in 0..xs.len() {
        for j in 0..xs[b].data().len() {
            let orig = inputs[b].data()[j];
            xs[b].data_mut()[j] = orig + FD_STEP;
            let plus = probe(layer, &xs)?;
            xs[b].data_mut()[j] = orig - FD_STEP;
            let minus = probe(layer, &xs)?;
            xs[b].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            record(rel_error(input_grads[b].data()[j], numeric), &|| format!("input[{b}][{j}]"));
            checked += 1;
        }
    }
    layer.clear_cache();

    let (max_rel_error, worst) = worst;
    Ok(GradCheckReport { max_rel_error, worst, checked, tolerance, passed: max_rel_error < tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-7, 0.0) - 1e-2).abs() < 1e-15);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
