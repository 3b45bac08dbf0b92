//! Fusion regressor: concepts plus encoded clinical features in, AHI out.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, CoreError, Result};
use crate::signal::{ClinicalFeatures, Ethnicity, Gender, Race, SeverityClass, CONCEPT_NAMES};

pub const CLINICAL_ENCODED_NAMES: [&str; 14] = [
    "age",
    "bmi",
    "sbp",
    "dbp",
    "weight_kg",
    "height_cm",
    "race_white",
    "race_black",
    "race_other",
    "ethnicity_non_hispanic",
    "ethnicity_hispanic",
    "smoker",
    "hypertension",
    "gender_female",
];

pub const N_CLINICAL_ENCODED: usize = CLINICAL_ENCODED_NAMES.len();

/// Raw encoding: numerics pass through (the model standardises them),
/// race and ethnicity are one-hot, flags are 0/1.
pub fn encode_clinical(c: &ClinicalFeatures) -> Vec<f64> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    vec![
        c.age,
        c.bmi,
        c.sbp,
        c.dbp,
        c.weight_kg,
        c.height_cm,
        flag(c.race == Race::White),
        flag(c.race == Race::Black),
        flag(c.race == Race::Other),
        flag(c.ethnicity == Ethnicity::NonHispanic),
        flag(c.ethnicity == Ethnicity::Hispanic),
        flag(c.smoker),
        flag(c.hypertension),
        flag(c.gender == Gender::Female),
    ]
}

/// `[concepts ‖ encode_clinical]`.
pub fn fuse(concepts: &[f64], clinical: &ClinicalFeatures) -> Vec<f64> {
    let mut v = concepts.to_vec();
    v.extend(encode_clinical(clinical));
    v
}

pub fn fused_feature_names() -> Vec<String> {
    CONCEPT_NAMES.iter().chain(CLINICAL_ENCODED_NAMES.iter()).map(|s| s.to_string()).collect()
}

pub fn severity(ahi: f64) -> Result<SeverityClass> {
    SeverityClass::from_ahi(ahi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => f64::from(u8::from(z > 0.0)),
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Full-batch gradient with Adam moment scaling.
    Adam,
    /// Plain full-batch gradient descent.
    Gd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden_units: usize,
    pub activation: Activation,
    pub l2_penalty: f64,
    pub lr: f64,
    pub solver: Solver,
    /// Epochs without validation improvement before the step is halved.
    pub patience: usize,
    /// Training stops once the step falls below `lr * min_lr_factor`.
    pub min_lr_factor: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig {
            hidden_units: 50,
            activation: Activation::Relu,
            l2_penalty: 0.1,
            lr: 1e-3,
            solver: Solver::Adam,
            patience: 5,
            min_lr_factor: 1.0 / 1024.0,
            max_epochs: 3000,
            seed: 42,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(config_err("hidden_units must be positive"));
        }
        if !(self.l2_penalty >= 0.0) || !self.l2_penalty.is_finite() {
            return Err(config_err("l2_penalty must be finite and >= 0"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config_err("lr must be positive"));
        }
        if !(self.min_lr_factor > 0.0 && self.min_lr_factor <= 1.0) {
            return Err(config_err("min_lr_factor must be in (0, 1]"));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(config_err("max_epochs and patience must be positive"));
        }
        Ok(())
    }
}

/// Single hidden layer network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub inputs: usize,
    pub hidden: usize,
    /// `inputs x hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpParams {
    pub fn init(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let l1 = (6.0 / (inputs + hidden) as f64).sqrt();
        let l2 = (6.0 / (hidden + 1) as f64).sqrt();
        MlpParams {
            inputs,
            hidden,
            w1: (0..inputs * hidden).map(|_| rng.random_range(-l1..l1)).collect(),
            b1: (0..hidden).map(|_| rng.random_range(-l1..l1)).collect(),
            w2: (0..hidden).map(|_| rng.random_range(-l2..l2)).collect(),
            b2: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            inputs: self.inputs,
            hidden: self.hidden,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.hidden],
            w2: vec![0.0; self.hidden],
            b2: 0.0,
        }
    }

    /// Layout `[w1, b1, w2, b2]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn len(&self) -> usize {
        self.inputs * self.hidden + 2 * self.hidden + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn from_flat(inputs: usize, hidden: usize, flat: &[f64]) -> Result<Self> {
        let n = inputs * hidden;
        if flat.len() != n + 2 * hidden + 1 {
            return Err(invalid(format!("expected {} parameters, got {}", n + 2 * hidden + 1, flat.len())));
        }
        Ok(MlpParams {
            inputs,
            hidden,
            w1: flat[..n].to_vec(),
            b1: flat[n..n + hidden].to_vec(),
            w2: flat[n + hidden..n + 2 * hidden].to_vec(),
            b2: flat[n + 2 * hidden],
        })
    }

    fn w1_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.inputs, self.hidden, &self.w1)
    }

    fn pre_activation(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.w1_matrix();
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        z
    }

    /// Raw network outputs for the rows of `x`.
    pub fn forward(&self, x: &DMatrix<f64>, act: Activation) -> DVector<f64> {
        let a = self.pre_activation(x).map(|z| act.apply(z));
        let mut out = a * DVector::from_column_slice(&self.w2);
        out.add_scalar_mut(self.b2);
        out
    }
}

/// Regularised squared-error loss and its gradient:
///
/// ```text
/// L = 1/(2n) Σ (f(x_i) - y_i)² + λ/(2n) (‖W1‖² + ‖w2‖²)
/// ```
///
/// Biases are not penalised.
pub fn loss_and_grad(
    p: &MlpParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    l2: f64,
    act: Activation,
) -> (f64, MlpParams) {
    let n = x.nrows() as f64;
    let z = p.pre_activation(x);
    let a = z.map(|v| act.apply(v));
    let w2 = DVector::from_column_slice(&p.w2);
    let mut out = &a * &w2;
    out.add_scalar_mut(p.b2);
    let resid = out - y;
    let sq_w: f64 = p.w1.iter().chain(&p.w2).map(|w| w * w).sum();
    let loss = resid.norm_squared() / (2.0 * n) + l2 / (2.0 * n) * sq_w;

    let r = resid / n;
    let g_w2 = a.tr_mul(&r) + &w2 * (l2 / n);
    let mut dz = &r * w2.transpose();
    dz.zip_apply(&z, |d, zv| *d *= act.slope(zv));
    let g_w1 = x.tr_mul(&dz) + p.w1_matrix() * (l2 / n);
    let g_b1: Vec<f64> = dz.column_iter().map(|c| c.sum()).collect();
    let mut w1 = Vec::with_capacity(p.w1.len());
    for row in g_w1.row_iter() {
        w1.extend(row.iter());
    }
    let grad = MlpParams {
        inputs: p.inputs,
        hidden: p.hidden,
        w1,
        b1: g_b1,
        w2: g_w2.iter().copied().collect(),
        b2: r.sum(),
    };
    (loss, grad)
}

/// Per-column mean and population sd; constant columns keep sd 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map(Vec::len).ok_or_else(|| invalid("cannot fit standardisation on zero rows"))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            if r.len() != p {
                return Err(invalid(format!("feature rows differ in length: {} vs {p}", r.len())));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let sd = var.iter().zip(&mean).map(|(v, m)| sd_or_one(v.sqrt(), *m)).collect();
        Ok(Standardizer { mean, sd })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| v * s + m).collect()
    }
}

fn sd_or_one(sd: f64, mean: f64) -> f64 {
    if sd > 1e-12 * mean.abs().max(1.0) {
        sd
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub config: RegressorConfig,
    pub feature_names: Vec<String>,
    pub features: Standardizer,
    pub target_mean: f64,
    pub target_sd: f64,
    pub params: MlpParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Training rows are put in a canonical order first, so full-batch results
/// do not depend on how the caller ordered the subjects.
fn canonical(rows: &[Vec<f64>], y: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(y[a].total_cmp(&y[b]))
    });
    idx
}

fn design(rows: &[Vec<f64>], order: &[usize], std: &Standardizer) -> DMatrix<f64> {
    let p = std.mean.len();
    let mut data = Vec::with_capacity(order.len() * p);
    for &i in order {
        data.extend(std.apply(&rows[i]));
    }
    DMatrix::from_row_slice(order.len(), p, &data)
}

fn check_rows(rows: &[Vec<f64>], y: &[f64], what: &str) -> Result<()> {
    if rows.len() != y.len() {
        return Err(invalid(format!("{what}: {} feature rows but {} targets", rows.len(), y.len())));
    }
    if rows.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid(format!("{what}: features and targets must be finite")));
    }
    Ok(())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Full-batch training. The step is halved whenever the monitored loss
/// (validation if given, training otherwise) has not improved for
/// `patience` epochs; parameters from the best monitored epoch are kept.
pub fn train_regressor(
    rows: &[Vec<f64>],
    targets: &[f64],
    val: Option<(&[Vec<f64>], &[f64])>,
    feature_names: Vec<String>,
    cfg: &RegressorConfig,
) -> Result<RegressorModel> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(invalid("empty training set"));
    }
    check_rows(rows, targets, "training set")?;
    let order = canonical(rows, targets);
    let sorted_rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let targets: Vec<f64> = order.iter().map(|&i| targets[i]).collect();
    let features = Standardizer::fit(&sorted_rows)?;
    let p = features.mean.len();
    if feature_names.len() != p {
        return Err(invalid(format!("{} feature names for {p} features", feature_names.len())));
    }
    let n = targets.len() as f64;
    let target_mean = targets.iter().sum::<f64>() / n;
    let target_sd = sd_or_one(
        (targets.iter().map(|t| (t - target_mean).powi(2)).sum::<f64>() / n).sqrt(),
        target_mean,
    );
    let scale = |ys: &[f64], order: &[usize]| {
        DVector::from_iterator(order.len(), order.iter().map(|&i| (ys[i] - target_mean) / target_sd))
    };
    let identity: Vec<usize> = (0..targets.len()).collect();
    let x = design(&sorted_rows, &identity, &features);
    let y = scale(&targets, &identity);
    let val_xy = match val {
        Some((vr, vy)) if !vr.is_empty() => {
            check_rows(vr, vy, "validation set")?;
            if vr.iter().any(|r| r.len() != p) {
                return Err(invalid("validation rows differ in length from training rows"));
            }
            let vo = canonical(vr, vy);
            Some((design(vr, &vo, &features), scale(vy, &vo)))
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::init(p, cfg.hidden_units, &mut rng);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut lr = cfg.lr;
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let mut history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let (train_loss, grad) = loss_and_grad(&params, &x, &y, cfg.l2_penalty, cfg.activation);
        if !train_loss.is_finite() {
            return Err(CoreError::Numeric(format!("regressor loss became non-finite at epoch {epoch}")));
        }
        // Monitored loss at the current parameters, before the update.
        let monitored = match &val_xy {
            Some((vx, vy)) => (params.forward(vx, cfg.activation) - vy).norm_squared() / (2.0 * vy.len() as f64),
            None => train_loss,
        };
        history.push(EpochRecord { epoch, train_loss, val_loss: monitored, lr });
        if monitored < best_loss {
            best_loss = monitored;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr *= 0.5;
                stale = 0;
                if lr < cfg.lr * cfg.min_lr_factor {
                    break;
                }
            }
        }
        let mut flat = params.to_flat();
        let g = grad.to_flat();
        match cfg.solver {
            Solver::Gd => flat.iter_mut().zip(&g).for_each(|(w, d)| *w -= lr * d),
            Solver::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                adam.t += 1;
                let (c1, c2) = (1.0 - B1.powi(adam.t), 1.0 - B2.powi(adam.t));
                for i in 0..flat.len() {
                    adam.m[i] = B1 * adam.m[i] + (1.0 - B1) * g[i];
                    adam.v[i] = B2 * adam.v[i] + (1.0 - B2) * g[i] * g[i];
                    flat[i] -= lr * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        params = MlpParams::from_flat(p, cfg.hidden_units, &flat)?;
    }
    Ok(RegressorModel {
        config: cfg.clone(),
        feature_names,
        features,
        target_mean,
        target_sd,
        params: best,
        best_epoch,
        history,
    })
}

impl RegressorModel {
    pub fn n_features(&self) -> usize {
        self.features.mean.len()
    }

    /// Unclamped predictions in target units.
    pub fn predict_raw(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let p = self.n_features();
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(invalid(format!("expected {p} features, got {}", r.len())));
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let order: Vec<usize> = (0..rows.len()).collect();
        let x = design(rows, &order, &self.features);
        let out = self.params.forward(&x, self.config.activation);
        Ok(out.iter().map(|o| self.target_mean + self.target_sd * o).collect())
    }

    /// AHI estimates, clamped at 0.
    pub fn predict_ahi(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.predict_raw(rows)?.into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn predict_one(&self, row: &[f64]) -> Result<f64> {
        Ok(self.predict_ahi(&[row.to_vec()])?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clinical() -> ClinicalFeatures {
        ClinicalFeatures {
            age: 60.0,
            bmi: 30.0,
            sbp: 130.0,
            dbp: 80.0,
            weight_kg: 90.0,
            height_cm: 172.0,
            smoker: true,
            hypertension: false,
            ethnicity: Ethnicity::Hispanic,
            race: Race::Black,
            gender: Gender::Male,
        }
    }

    #[test]
    fn encoding_examples() {
        let e = encode_clinical(&clinical());
        assert_eq!(e.len(), N_CLINICAL_ENCODED);
        assert_eq!(&e[6..9], &[0.0, 1.0, 0.0]);
        assert_eq!(&e[9..11], &[0.0, 1.0]);
        assert_eq!(e[11], 1.0);
        assert_eq!(e[12], 0.0);
        assert_eq!(e[13], 0.0);
        assert_eq!(e, encode_clinical(&clinical()));
        assert_eq!(fused_feature_names().len(), fuse(&[0.0; 10], &clinical()).len());
    }

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y = rows.iter().map(|r| 10.0 + 3.0 * r[0] - 2.0 * r[1] * r[1]).collect();
        (rows, y)
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("x{i}")).collect()
    }

    #[test]
    fn fits_a_smooth_function() {
        let (rows, y) = toy(200, 1);
        let (vr, vy) = toy(50, 2);
        let m = train_regressor(&rows, &y, Some((&vr, &vy)), names(3), &RegressorConfig::default()).unwrap();
        let pred = m.predict_raw(&vr).unwrap();
        let r2 = crate::eval::r2(&vy, &pred).unwrap();
        assert!(r2 > 0.9, "r2 {r2}");
        let best = m.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(m.history[m.best_epoch - 1].val_loss, best);
    }

    #[test]
    fn constant_targets() {
        let (rows, _) = toy(40, 3);
        let y = vec![12.5; 40];
        let m = train_regressor(&rows, &y, None, names(3), &RegressorConfig::default()).unwrap();
        for v in m.predict_ahi(&rows).unwrap() {
            assert!((v - 12.5).abs() <= 12.5 * 1e-2 + 0.1);
        }
    }

    #[test]
    fn heavy_penalty_shrinks_weights() {
        let (rows, y) = toy(60, 4);
        let cfg = RegressorConfig { l2_penalty: 1e6, ..Default::default() };
        let m = train_regressor(&rows, &y, None, names(3), &cfg).unwrap();
        let light = train_regressor(&rows, &y, None, names(3), &RegressorConfig::default()).unwrap();
        let norm = |p: &MlpParams| p.w2.iter().map(|w| w * w).sum::<f64>();
        assert!(norm(&m.params) < norm(&light.params));
    }

    #[test]
    fn row_order_does_not_matter() {
        let (rows, y) = toy(50, 5);
        let cfg = RegressorConfig { max_epochs: 200, ..Default::default() };
        let a = train_regressor(&rows, &y, None, names(3), &cfg).unwrap();
        let mut rr = rows.clone();
        let mut yy = y.clone();
        rr.reverse();
        yy.reverse();
        let b = train_regressor(&rr, &yy, None, names(3), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predictions_are_clamped_and_checked() {
        let rows = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![0.0, 0.0, 0.0];
        let m = train_regressor(&rows, &y, None, names(1), &RegressorConfig::default()).unwrap();
        assert!(m.predict_ahi(&[vec![-50.0]]).unwrap()[0] >= 0.0);
        assert!(m.predict_ahi(&[vec![1.0, 2.0]]).is_err());
        assert!(train_regressor(&[], &[], None, names(1), &RegressorConfig::default()).is_err());
    }

    #[test]
    fn standardizer_round_trip() {
        let rows = vec![vec![1.0, 5.0], vec![3.0, 5.0], vec![8.0, 5.0]];
        let s = Standardizer::fit(&rows).unwrap();
        for r in &rows {
            let back = s.invert(&s.apply(r));
            for (a, b) in back.iter().zip(r) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(s.sd[1], 1.0);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = MlpParams::init(4, 3, &mut rng);
        assert_eq!(MlpParams::from_flat(4, 3, &p.to_flat()).unwrap(), p);
        assert!(MlpParams::from_flat(4, 3, &[0.0; 3]).is_err());
    }
}
