//! Signal-to-concept network: conv blocks, two BiLSTMs, dropout, attention
//! pooling and a dense head of width 10.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sleepcbm_nn::layers::{Attention, BatchNorm1d, BiLstm, Conv1d, Dense, Dropout, LeakyRelu, MaxPool1d};
use sleepcbm_nn::{load_bundle, mae_loss, save_bundle, AdamConfig, Layer, Mode, Sequential, Tensor2};

use crate::concepts::compute_concepts;
use crate::error::{config_err, invalid, CoreError, Result};
use crate::preprocess::{preprocess_pipeline, PreprocessConfig};
use crate::signal::{ConceptVector, SleepStudy, N_CONCEPTS, RATE_CONCEPTS, SATURATION_CONCEPTS, TARGET_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvActivation {
    LeakyRelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub input_len: usize,
    pub n_conv_blocks: usize,
    pub filters_per_block: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub conv_activation: ConvActivation,
    pub leaky_slope: f64,
    pub lstm_hidden: usize,
    pub dropout: f64,
    pub attention_units: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SlamConfig {
    fn default() -> Self {
        SlamConfig {
            input_len: TARGET_LEN,
            n_conv_blocks: 3,
            filters_per_block: vec![8, 16, 16],
            kernel_sizes: vec![9, 9, 9],
            pool_size: 4,
            pool_stride: 4,
            conv_activation: ConvActivation::LeakyRelu,
            leaky_slope: 0.01,
            lstm_hidden: 16,
            dropout: 0.1,
            attention_units: 32,
            lr: 2e-3,
            weight_decay: 0.0,
            epochs: 12,
            batch_size: 8,
            seed: 42,
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_conv_blocks == 0 {
            return Err(config_err("n_conv_blocks must be positive"));
        }
        if self.filters_per_block.len() != self.n_conv_blocks || self.kernel_sizes.len() != self.n_conv_blocks {
            return Err(config_err(format!(
                "filters_per_block ({}) and kernel_sizes ({}) must both have n_conv_blocks = {} entries",
                self.filters_per_block.len(),
                self.kernel_sizes.len(),
                self.n_conv_blocks
            )));
        }
        if self.filters_per_block.contains(&0) || self.kernel_sizes.contains(&0) {
            return Err(config_err("filters and kernel sizes must be positive"));
        }
        if self.pool_size == 0 || self.pool_stride == 0 {
            return Err(config_err("pool_size and pool_stride must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be >= 0"));
        }
        if self.lstm_hidden == 0 || self.attention_units == 0 || self.batch_size == 0 {
            return Err(config_err("lstm_hidden, attention_units and batch_size must be positive"));
        }
        if self.sequence_len() == 0 {
            return Err(config_err("input is too short for the pooling stack"));
        }
        Ok(())
    }

    /// Steps seen by the recurrent layers.
    pub fn sequence_len(&self) -> usize {
        let mut t = self.input_len;
        for _ in 0..self.n_conv_blocks {
            if t < self.pool_size {
                return 0;
            }
            t = (t - self.pool_size) / self.pool_stride + 1;
        }
        t
    }

    /// Index of the last conv block's pooled output in the layer stack.
    pub fn saliency_tap(&self) -> usize {
        4 * self.n_conv_blocks - 1
    }
}

/// Builds the layer stack with freshly initialised weights.
pub fn build_network(cfg: &SlamConfig) -> Result<Sequential> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Sequential::new();
    let mut channels = 1;
    for (&f, &k) in cfg.filters_per_block.iter().zip(&cfg.kernel_sizes) {
        net.push(Conv1d::new(channels, f, k, &mut rng)?);
        net.push(BatchNorm1d::new(f));
        net.push(match cfg.conv_activation {
            ConvActivation::LeakyRelu => LeakyRelu::new(cfg.leaky_slope),
            ConvActivation::Relu => LeakyRelu::relu(),
        });
        net.push(MaxPool1d::new(cfg.pool_size, cfg.pool_stride)?);
        channels = f;
    }
    let h = cfg.lstm_hidden;
    net.push(BiLstm::new(channels, h, &mut rng)?);
    net.push(BiLstm::new(2 * h, h, &mut rng)?);
    net.push(Dropout::new(cfg.dropout, cfg.seed ^ 0x5eed)?);
    net.push(Attention::new(cfg.sequence_len(), 2 * h, cfg.attention_units, &mut rng)?);
    net.push(Dense::new(2 * h, N_CONCEPTS, &mut rng));
    Ok(net)
}

/// A preprocessed input and its oracle concept targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SlamExample {
    pub id: String,
    pub input: Vec<f64>,
    pub target: [f64; N_CONCEPTS],
}

pub fn example_from_study(study: &SleepStudy, pre: &PreprocessConfig) -> Result<SlamExample> {
    let c = compute_concepts(&study.events, &study.signal, study.total_sleep_time_h)?;
    Ok(SlamExample { id: study.id.clone(), input: preprocess_pipeline(&study.signal, pre)?, target: c.to_array() })
}

pub fn examples_from_studies(studies: &[SleepStudy], pre: &PreprocessConfig) -> Result<Vec<SlamExample>> {
    studies.iter().map(|s| example_from_study(s, pre)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlamEpoch {
    pub epoch: usize,
    /// Mean absolute error on standardised targets.
    pub train_mae: f64,
    pub val_mae: f64,
}

pub struct SlamModel {
    pub config: SlamConfig,
    pub network: Sequential,
    pub target_mean: [f64; N_CONCEPTS],
    pub target_sd: [f64; N_CONCEPTS],
    pub history: Vec<SlamEpoch>,
    pub best_epoch: usize,
    pub trained: bool,
}

fn column_stats(rows: &[[f64; N_CONCEPTS]]) -> ([f64; N_CONCEPTS], [f64; N_CONCEPTS]) {
    let n = rows.len() as f64;
    let mut mean = [0.0; N_CONCEPTS];
    let mut sd = [0.0; N_CONCEPTS];
    for r in rows {
        for j in 0..N_CONCEPTS {
            mean[j] += r[j] / n;
        }
    }
    for r in rows {
        for j in 0..N_CONCEPTS {
            sd[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    for (s, m) in sd.iter_mut().zip(&mean) {
        *s = s.sqrt();
        if !(*s > 1e-12 * m.abs().max(1.0)) {
            *s = 1.0;
        }
    }
    (mean, sd)
}

fn to_tensor(x: &[f64]) -> Tensor2 {
    Tensor2::column(x)
}

impl SlamModel {
    /// An untrained model, e.g. for saliency of random weights.
    pub fn untrained(cfg: &SlamConfig) -> Result<Self> {
        Ok(SlamModel {
            config: cfg.clone(),
            network: build_network(cfg)?,
            target_mean: [0.0; N_CONCEPTS],
            target_sd: [1.0; N_CONCEPTS],
            history: Vec::new(),
            best_epoch: 0,
            trained: false,
        })
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_len {
            return Err(invalid(format!("expected an input of length {}, got {}", self.config.input_len, x.len())));
        }
        Ok(())
    }

    fn scale(&self, t: &[f64; N_CONCEPTS]) -> Vec<f64> {
        (0..N_CONCEPTS).map(|j| (t[j] - self.target_mean[j]) / self.target_sd[j]).collect()
    }

    /// Standardised-space outputs for a batch, inference mode.
    fn raw_outputs(&mut self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let xs: Vec<Tensor2> = inputs.iter().map(|x| to_tensor(x)).collect();
        let ys = self.network.forward(&xs, Mode::Infer)?;
        self.network.clear_cache();
        Ok(ys.into_iter().map(Tensor2::into_vec).collect())
    }

    fn unscale(&self, raw: &[f64]) -> [f64; N_CONCEPTS] {
        let mut v = [0.0; N_CONCEPTS];
        for j in 0..N_CONCEPTS {
            v[j] = raw[j] * self.target_sd[j] + self.target_mean[j];
        }
        for &j in &RATE_CONCEPTS {
            v[j] = v[j].max(0.0);
        }
        for &j in &SATURATION_CONCEPTS {
            v[j] = v[j].clamp(0.0, 100.0);
        }
        v
    }

    pub fn predict_concepts(&mut self, input: &[f64]) -> Result<ConceptVector> {
        Ok(ConceptVector::from_slice(&self.predict_batch(&[input])?[0])?)
    }

    /// Clamped concept predictions for several inputs.
    pub fn predict_batch(&mut self, inputs: &[&[f64]]) -> Result<Vec<[f64; N_CONCEPTS]>> {
        for x in inputs {
            self.check_len(x)?;
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.config.batch_size.max(1)) {
            for raw in self.raw_outputs(chunk)? {
                out.push(self.unscale(&raw));
            }
        }
        Ok(out)
    }

    /// Mean absolute error in standardised units over `examples`.
    pub fn scaled_mae(&mut self, examples: &[SlamExample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(self.config.batch_size.max(1)) {
            let inputs: Vec<&[f64]> = chunk.iter().map(|e| e.input.as_slice()).collect();
            for (raw, e) in self.raw_outputs(&inputs)?.iter().zip(chunk) {
                let t = self.scale(&e.target);
                total += raw.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>();
            }
        }
        Ok(total / (examples.len() * N_CONCEPTS) as f64)
    }

    /// Gradient-weighted activation map at the last conv block: channel
    /// weights are time-averaged gradients of the summed outputs, the
    /// weighted channel sum is rectified, linearly upsampled to the input
    /// length and min-max scaled to [0, 1] (all zeros if flat).
    pub fn saliency(&mut self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_len(input)?;
        let tap = self.config.saliency_tap();
        let (out, feats) = self.network.forward_with_tap(&[to_tensor(input)], Mode::Infer, tap)?;
        let ones: Vec<Tensor2> = out.iter().map(|y| y.map(|_| 1.0)).collect();
        let grads = self.network.backward_to(&ones, tap)?;
        self.network.zero_grad();
        self.network.clear_cache();
        let (a, g) = (&feats[0], &grads[0]);
        let (steps, channels) = a.dims();
        let weights = g.column_means();
        let coarse: Vec<f64> = (0..steps)
            .map(|t| (0..channels).map(|c| weights[c] * a.get(t, c)).sum::<f64>().max(0.0))
            .collect();
        let d = self.config.input_len;
        // Pooled step t is anchored at input position (t + 0.5) * factor.
        let factor = (0..self.config.n_conv_blocks).fold(1.0, |f, _| f * self.config.pool_stride as f64);
        let mut fine = Vec::with_capacity(d);
        for i in 0..d {
            let pos = (i as f64 + 0.5) / factor - 0.5;
            let v = if steps == 1 || pos <= 0.0 {
                coarse[0]
            } else if pos >= (steps - 1) as f64 {
                coarse[steps - 1]
            } else {
                let lo = pos.floor() as usize;
                let f = pos - lo as f64;
                coarse[lo] * (1.0 - f) + coarse[lo + 1] * f
            };
            fine.push(v);
        }
        let (lo, hi) = fine.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        if !(hi - lo > 0.0) || !hi.is_finite() {
            return Ok(vec![0.0; d]);
        }
        Ok(fine.into_iter().map(|v| (v - lo) / (hi - lo)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = json!({
            "config": self.config,
            "target_mean": self.target_mean.to_vec(),
            "target_sd": self.target_sd.to_vec(),
            "history": self.history,
            "best_epoch": self.best_epoch,
            "trained": self.trained,
            "layers": self.network.describe(),
        });
        save_bundle(dir, &meta, &self.network.export())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, arrays) = load_bundle(dir)?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| invalid(format!("model bundle lacks '{k}'")));
        let config: SlamConfig = serde_json::from_value(field("config")?)?;
        let mut network = build_network(&config)?;
        network.import(&arrays)?;
        let arr = |k: &str| -> Result<[f64; N_CONCEPTS]> {
            let v: Vec<f64> = serde_json::from_value(field(k)?)?;
            v.try_into().map_err(|_| invalid(format!("'{k}' must have {N_CONCEPTS} entries")))
        };
        Ok(SlamModel {
            target_mean: arr("target_mean")?,
            target_sd: arr("target_sd")?,
            history: serde_json::from_value(field("history")?)?,
            best_epoch: serde_json::from_value(field("best_epoch")?)?,
            trained: serde_json::from_value(field("trained")?)?,
            config,
            network,
        })
    }
}

/// Adam on per-batch MAE of standardised targets. The parameters of the
/// epoch with the lowest validation MAE are kept (training MAE when `val`
/// is empty).
pub fn train_slam(train: &[SlamExample], val: &[SlamExample], cfg: &SlamConfig) -> Result<SlamModel> {
    train_slam_with_progress(train, val, cfg, |_| {})
}

pub fn train_slam_with_progress(
    train: &[SlamExample],
    val: &[SlamExample],
    cfg: &SlamConfig,
    mut progress: impl FnMut(&SlamEpoch),
) -> Result<SlamModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut model = SlamModel::untrained(cfg)?;
    for e in train.iter().chain(val) {
        model.check_len(&e.input)?;
    }
    let targets: Vec<[f64; N_CONCEPTS]> = train.iter().map(|e| e.target).collect();
    (model.target_mean, model.target_sd) = column_stats(&targets);
    let scaled: Vec<Vec<f64>> = train.iter().map(|e| model.scale(&e.target)).collect();
    let adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<sleepcbm_nn::NamedArray>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Tensor2> = batch.iter().map(|&i| to_tensor(&train[i].input)).collect();
            model.network.zero_grad();
            let ys = model.network.forward(&xs, Mode::Train)?;
            let pred: Vec<f64> = ys.iter().flat_map(|y| y.data().iter().copied()).collect();
            let target: Vec<f64> = batch.iter().flat_map(|&i| scaled[i].iter().copied()).collect();
            let (loss, grad) = mae_loss(&pred, &target)?;
            if !loss.is_finite() || !ys.iter().all(Tensor2::is_finite) {
                return Err(CoreError::Numeric(format!(
                    "training diverged at epoch {epoch}: non-finite loss; try a lower lr (currently {})",
                    cfg.lr
                )));
            }
            sum += loss * batch.len() as f64;
            let gs: Vec<Tensor2> = grad.chunks(N_CONCEPTS).map(Tensor2::row_vector).collect();
            model.network.backward(&gs)?;
            model.network.step(&adam)?;
        }
        model.network.clear_cache();
        let train_mae = sum / train.len() as f64;
        let val_mae = if val.is_empty() { train_mae } else { model.scaled_mae(val)? };
        let rec = SlamEpoch { epoch, train_mae, val_mae };
        progress(&rec);
        model.history.push(rec);
        if best.as_ref().is_none_or(|(b, _)| val_mae < *b) {
            best = Some((val_mae, model.network.export()));
            model.best_epoch = epoch;
        }
    }
    if let Some((_, arrays)) = best {
        model.network.import(&arrays)?;
    }
    model.network.zero_grad();
    model.trained = cfg.epochs > 0;
    Ok(model)
}

/// Per-concept MAE of predictions against targets.
pub fn per_concept_mae(pred: &[[f64; N_CONCEPTS]], target: &[[f64; N_CONCEPTS]]) -> [f64; N_CONCEPTS] {
    let mut m = [0.0; N_CONCEPTS];
    for (p, t) in pred.iter().zip(target) {
        for j in 0..N_CONCEPTS {
            m[j] += (p[j] - t[j]).abs() / pred.len() as f64;
        }
    }
    m
}

/// MAE of always predicting the training mean.
pub fn mean_predictor_mae(train: &[[f64; N_CONCEPTS]], test: &[[f64; N_CONCEPTS]]) -> [f64; N_CONCEPTS] {
    let n = train.len() as f64;
    let mut mean = [0.0; N_CONCEPTS];
    for r in train {
        for j in 0..N_CONCEPTS {
            mean[j] += r[j] / n;
        }
    }
    per_concept_mae(&vec![mean; test.len()], test)
}

/// Count of predictions breaking rdi0p >= rdi2p >= rdi3p >= rdi4p.
pub fn rdi_order_violations(pred: &[[f64; N_CONCEPTS]]) -> usize {
    pred.iter().filter(|p| !(p[6] >= p[7] && p[7] >= p[8] && p[8] >= p[9])).count()
}

/// Per-minute means of a preprocessed series (420 for 7 h at 1 Hz).
pub fn minute_features(input: &[f64]) -> Vec<f64> {
    input.chunks(60).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

/// Closed-form ridge regression with an unpenalised intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub x_mean: DVector<f64>,
}

impl RidgeModel {
    /// Fits every output column of `y` at once: `(Xc'Xc + λI) W = Xc'Yc`
    /// on centred data.
    pub fn fit(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(invalid("ridge needs matching, non-empty feature and target rows"));
        }
        if !(lambda >= 0.0) {
            return Err(config_err("ridge penalty must be >= 0"));
        }
        let (n, p, k) = (x.len(), x[0].len(), y[0].len());
        let xm = DMatrix::from_row_iterator(n, p, x.iter().flatten().copied());
        let ym = DMatrix::from_row_iterator(n, k, y.iter().flatten().copied());
        let x_mean = DVector::from_iterator(p, xm.column_iter().map(|c| c.mean()));
        let y_mean = DVector::from_iterator(k, ym.column_iter().map(|c| c.mean()));
        let mut xc = xm;
        for mut row in xc.row_iter_mut() {
            row -= x_mean.transpose();
        }
        let mut yc = ym;
        for mut row in yc.row_iter_mut() {
            row -= y_mean.transpose();
        }
        let mut gram = xc.tr_mul(&xc);
        for i in 0..p {
            gram[(i, i)] += lambda;
        }
        let rhs = xc.tr_mul(&yc);
        let singular = || {
            if lambda == 0.0 {
                invalid("ridge system is singular with lambda = 0; use lambda > 0")
            } else {
                CoreError::Numeric("ridge system is singular".into())
            }
        };
        let weights = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram.lu().solve(&rhs).ok_or_else(singular)?,
        };
        if lambda == 0.0 {
            // Cholesky can succeed on a numerically rank-deficient matrix.
            let svd = xc.clone().svd(false, false);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if n <= p || smin <= smax * 1e-10 {
                return Err(singular());
            }
        }
        let intercept = y_mean - weights.tr_mul(&x_mean);
        Ok(RidgeModel { weights, intercept, x_mean })
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(x);
        (self.weights.tr_mul(&v) + &self.intercept).iter().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RidgeReport {
    pub mae: [f64; N_CONCEPTS],
    pub rmse: [f64; N_CONCEPTS],
}

/// Ridge on per-minute means, one output per concept.
pub fn ridge_concept_baseline(train: &[SlamExample], test: &[SlamExample], lambda: f64) -> Result<RidgeReport> {
    let feats = |s: &[SlamExample]| -> Vec<Vec<f64>> { s.iter().map(|e| minute_features(&e.input)).collect() };
    let targets: Vec<Vec<f64>> = train.iter().map(|e| e.target.to_vec()).collect();
    let model = RidgeModel::fit(&feats(train), &targets, lambda)?;
    let mut mae = [0.0; N_CONCEPTS];
    let mut rmse = [0.0; N_CONCEPTS];
    let n = test.len() as f64;
    for (x, e) in feats(test).iter().zip(test) {
        for (j, p) in model.predict(x).iter().enumerate() {
            let d = p - e.target[j];
            mae[j] += d.abs() / n;
            rmse[j] += d * d / n;
        }
    }
    Ok(RidgeReport { mae, rmse: rmse.map(f64::sqrt) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sleepcbm_nn::grad_check_with_inputs;

    fn tiny() -> SlamConfig {
        SlamConfig {
            input_len: 64,
            n_conv_blocks: 1,
            filters_per_block: vec![3],
            kernel_sizes: vec![5],
            lstm_hidden: 4,
            attention_units: 5,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn wave(len: usize, phase: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64) * 0.3 + phase).sin()).collect()
    }

    #[test]
    fn end_to_end_gradient_check() {
        let cfg = SlamConfig { dropout: 0.0, ..tiny() };
        let mut net = build_network(&cfg).unwrap();
        let xs = vec![Tensor2::column(&wave(64, 0.0)), Tensor2::column(&wave(64, 1.3))];
        let r = grad_check_with_inputs(&mut net, &xs, Mode::Train, 1e-3, 7).unwrap();
        assert!(r.passed, "{r:?}");
        let mut net = build_network(&tiny()).unwrap();
        let r = grad_check_with_inputs(&mut net, &xs[..1], Mode::Infer, 1e-3, 8).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn config_validation() {
        assert!(SlamConfig::default().validate().is_ok());
        assert_eq!(SlamConfig::default().sequence_len(), 393);
        assert!(SlamConfig { filters_per_block: vec![8], ..Default::default() }.validate().is_err());
        assert!(SlamConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(SlamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    }

    fn toy_examples(n: usize) -> Vec<SlamExample> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64;
                let mut target = [0.0; N_CONCEPTS];
                for (j, t) in target.iter_mut().enumerate() {
                    *t = 10.0 * a + j as f64;
                }
                target[4] = 95.0 - a;
                target[5] = 90.0 - 5.0 * a;
                let input = (0..64).map(|t| (a * 4.0) * ((t as f64) * 0.2).sin()).collect();
                SlamExample { id: format!("t{i}"), input, target }
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let data = toy_examples(12);
        let cfg = SlamConfig { epochs: 6, ..tiny() };
        let mut a = train_slam(&data[..8], &data[8..], &cfg).unwrap();
        let b = train_slam(&data[..8], &data[8..], &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let best = a.history.iter().map(|h| h.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch - 1].val_mae, best);
        assert!((a.scaled_mae(&data[8..]).unwrap() - best).abs() < 1e-12);
        assert!(train_slam(&[], &data, &cfg).is_err());
    }

    #[test]
    fn predictions_are_clamped_and_shaped() {
        let mut m = SlamModel::untrained(&tiny()).unwrap();
        m.target_mean = [-50.0; N_CONCEPTS];
        m.target_mean[4] = 150.0;
        let x = wave(64, 0.5);
        let c = m.predict_concepts(&x).unwrap().to_array();
        for &j in &RATE_CONCEPTS {
            assert!(c[j] >= 0.0);
        }
        assert!(c[4] <= 100.0 && c[5] >= 0.0);
        assert_eq!(c, m.predict_concepts(&x).unwrap().to_array());
        assert!(m.predict_concepts(&x[..10]).is_err());
    }

    #[test]
    fn saliency_is_bounded() {
        let mut m = SlamModel::untrained(&tiny()).unwrap();
        let s = m.saliency(&wave(64, 0.1)).unwrap();
        assert_eq!(s.len(), 64);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        let flat = m.saliency(&[0.0; 64]).unwrap();
        assert!(flat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bundle_round_trip() {
        let data = toy_examples(8);
        let mut m = train_slam(&data[..6], &data[6..], &SlamConfig { epochs: 2, ..tiny() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let mut back = SlamModel::load(dir.path()).unwrap();
        assert_eq!(back.history, m.history);
        assert_eq!(back.predict_concepts(&data[7].input).unwrap(), m.predict_concepts(&data[7].input).unwrap());
    }

    #[test]
    fn ridge_matches_least_squares() {
        // y = 2 + 3 x0 - x1 exactly; ordinary least squares must recover it.
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, ((i * 7) % 5) as f64]).collect();
        let y: Vec<Vec<f64>> = x.iter().map(|r| vec![2.0 + 3.0 * r[0] - r[1]]).collect();
        let m = RidgeModel::fit(&x, &y, 0.0).unwrap();
        assert!((m.weights[(0, 0)] - 3.0).abs() < 1e-8);
        assert!((m.weights[(1, 0)] + 1.0).abs() < 1e-8);
        assert!((m.intercept[0] - 2.0).abs() < 1e-8);
        let big = RidgeModel::fit(&x, &y, 1e12).unwrap();
        let mean = y.iter().map(|r| r[0]).sum::<f64>() / 20.0;
        assert!((big.predict(&x[3])[0] - mean).abs() < 1e-3);
        let dup: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], r[0]]).collect();
        let err = RidgeModel::fit(&dup, &y, 0.0).unwrap_err();
        assert!(err.to_string().contains("lambda > 0"));
    }

    #[test]
    fn minute_features_length() {
        assert_eq!(minute_features(&vec![1.0; TARGET_LEN]).len(), 420);
    }
}
