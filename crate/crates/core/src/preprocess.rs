//! Length normalisation, Savitzky-Golay smoothing, gap interpolation and
//! standardisation, applied in that order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, CoreError, Result};
use crate::signal::{OximetrySignal, TARGET_LEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_len: usize,
    pub savgol_window: usize,
    pub savgol_order: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { target_len: TARGET_LEN, savgol_window: 15, savgol_order: 2 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_len == 0 {
            return Err(config_err("target_len must be positive"));
        }
        check_savgol(self.savgol_window, self.savgol_order)
    }
}

fn check_savgol(window: usize, order: usize) -> Result<()> {
    if window < 3 || window % 2 == 0 {
        return Err(config_err(format!("savgol window must be odd and >= 3, got {window}")));
    }
    if order >= window {
        return Err(config_err(format!("savgol order {order} must be below window {window}")));
    }
    Ok(())
}

/// Zero-pads (padding counts as valid) or truncates to `target_len`.
pub fn pad_or_truncate(signal: &OximetrySignal, target_len: usize) -> OximetrySignal {
    let n = signal.len().min(target_len);
    let mut samples = signal.samples()[..n].to_vec();
    let mut valid = signal.validity()[..n].to_vec();
    samples.resize(target_len, 0.0);
    valid.resize(target_len, true);
    OximetrySignal::new(samples, valid).expect("lengths agree")
}

/// Weights that evaluate, at offset `at`, the degree-`order` least-squares
/// polynomial through samples at offsets `0..window`.
pub fn savgol_weights(window: usize, order: usize, at: usize) -> Result<Vec<f64>> {
    if order >= window {
        return Err(config_err(format!("savgol order {order} must be below window {window}")));
    }
    // Centred, scaled abscissae keep the normal equations well conditioned.
    let half = (window - 1) as f64 / 2.0;
    let scale = half.max(1.0);
    let x = |j: usize| (j as f64 - half) / scale;
    let a = DMatrix::from_fn(window, order + 1, |r, c| x(r).powi(c as i32));
    let e = DVector::from_fn(order + 1, |c, _| x(at).powi(c as i32));
    let ata = a.transpose() * &a;
    let z = ata
        .lu()
        .solve(&e)
        .ok_or_else(|| CoreError::Numeric("singular Savitzky-Golay system".into()))?;
    Ok((a * z).iter().copied().collect())
}

/// Savitzky-Golay smoothing. Interior samples use the centred window; the
/// first and last `window / 2` samples evaluate the fit over the window
/// flush with the edge. An output sample is invalid if any sample in its
/// window is invalid.
pub fn savgol_smooth(signal: &OximetrySignal, window: usize, order: usize) -> Result<OximetrySignal> {
    check_savgol(window, order)?;
    let n = signal.len();
    if n < window {
        return Err(invalid(format!("signal of {n} samples is shorter than the savgol window {window}")));
    }
    let half = window / 2;
    let centre = savgol_weights(window, order, half)?;
    let edges: Vec<Vec<f64>> = (0..half).map(|k| savgol_weights(window, order, k)).collect::<Result<_>>()?;

    // bad[i] = number of invalid samples in [0, i)
    let mut bad = vec![0usize; n + 1];
    for i in 0..n {
        bad[i + 1] = bad[i] + usize::from(!signal.is_valid(i));
    }
    let x = signal.samples();
    let mut out = vec![0.0; n];
    let mut valid = vec![true; n];
    for i in 0..n {
        let (start, w): (usize, &[f64]) = if i < half {
            (0, &edges[i])
        } else if i + half >= n {
            (n - window, &edges[n - 1 - i])
        } else {
            (i - half, &centre)
        };
        if bad[start + window] > bad[start] {
            valid[i] = false;
            continue;
        }
        out[i] = if i + half >= n && i >= half {
            // Right edge: the weights were computed for the mirrored offset.
            w.iter().rev().zip(&x[start..start + window]).map(|(a, b)| a * b).sum()
        } else {
            w.iter().zip(&x[start..start + window]).map(|(a, b)| a * b).sum()
        };
    }
    OximetrySignal::new(out, valid)
}

/// Linear interpolation across interior gaps, edge-hold at the ends.
pub fn interpolate_invalid(signal: &OximetrySignal) -> Result<OximetrySignal> {
    let n = signal.len();
    let idx: Vec<usize> = (0..n).filter(|&i| signal.is_valid(i)).collect();
    if idx.is_empty() {
        return Err(invalid("signal entirely invalid"));
    }
    let x = signal.samples();
    let mut out = x.to_vec();
    let (first, last) = (idx[0], idx[idx.len() - 1]);
    out[..first].fill(x[first]);
    out[last + 1..].fill(x[last]);
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (i, o) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let f = (i - a) as f64 / (b - a) as f64;
            *o = x[a] + f * (x[b] - x[a]);
        }
    }
    OximetrySignal::from_clean(out)
}

/// Zero mean, unit population standard deviation. A constant input maps to
/// all zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

pub fn preprocess_pipeline(signal: &OximetrySignal, cfg: &PreprocessConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if signal.is_empty() {
        return Err(invalid("empty signal"));
    }
    let padded = pad_or_truncate(signal, cfg.target_len);
    let smooth = savgol_smooth(&padded, cfg.savgol_window, cfg.savgol_order)?;
    let filled = interpolate_invalid(&smooth)?;
    Ok(standardize(filled.samples()))
}
