//! Agreement, correlation and severity-classification metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, CoreError, Result};
use crate::signal::SeverityClass;

fn check_pair(y: &[f64], y_hat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", y.len(), y_hat.len())));
    }
    if y.len() < min_len {
        return Err(invalid(format!("need at least {min_len} pairs, got {}", y.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 1)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 1)?;
    Ok((y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 2)?;
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if ss_tot == 0.0 {
        return Err(invalid("undefined R²: reference values are constant"));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Two-way ANOVA intraclass correlation with the reference and the model
/// as k = 2 observers of n instances:
///
/// ```text
/// (MS_1 - MS_w) / (MS_1 + (k-1) MS_w + (k/n) (MS_i - MS_w))
/// ```
pub fn icc(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat, 3)?;
    let n = y.len() as f64;
    let k = 2.0;
    let grand = (y.iter().sum::<f64>() + y_hat.iter().sum::<f64>()) / (n * k);
    let ss_rows: f64 = y.iter().zip(y_hat).map(|(a, b)| k * ((a + b) / k - grand).powi(2)).sum();
    let ss_cols = n * ((mean(y) - grand).powi(2) + (mean(y_hat) - grand).powi(2));
    let ss_total: f64 = y.iter().chain(y_hat).map(|v| (v - grand).powi(2)).sum();
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_rows = ss_rows / (n - 1.0);
    let ms_cols = ss_cols / (k - 1.0);
    let ms_err = ss_err / ((n - 1.0) * (k - 1.0));
    let denom = ms_rows + (k - 1.0) * ms_err + k / n * (ms_cols - ms_err);
    if denom == 0.0 {
        return Err(CoreError::Numeric("undefined ICC: no variance between or within instances".into()));
    }
    Ok((ms_rows - ms_err) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Differences are `y_hat - y`; limits are bias ± 1.96 population sd.
pub fn bland_altman(y: &[f64], y_hat: &[f64]) -> Result<BlandAltman> {
    check_pair(y, y_hat, 2)?;
    let d: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| b - a).collect();
    let bias = mean(&d);
    let sd = (d.iter().map(|v| (v - bias) * (v - bias)).sum::<f64>() / d.len() as f64).sqrt();
    Ok(BlandAltman { bias, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(invalid("correlation undefined for a constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Two-sided permutation p-value for a correlation statistic, with the
/// usual +1 correction so p is never 0.
pub fn permutation_p_value(
    x: &[f64],
    y: &[f64],
    stat: fn(&[f64], &[f64]) -> Result<f64>,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    let observed = stat(x, y)?.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = y.to_vec();
    let mut extreme = 0usize;
    for _ in 0..permutations {
        for i in (1..shuffled.len()).rev() {
            let j = rng.random_range(0..=i);
            shuffled.swap(i, j);
        }
        if stat(x, &shuffled)?.abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (permutations + 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AgreementReport {
    pub r2: f64,
    pub icc: f64,
    pub mae: f64,
    pub rmse: f64,
    pub bland_altman: BlandAltman,
    pub n: usize,
}

pub fn agreement_report(y: &[f64], y_hat: &[f64]) -> Result<AgreementReport> {
    Ok(AgreementReport {
        r2: r2(y, y_hat)?,
        icc: icc(y, y_hat)?,
        mae: mae(y, y_hat)?,
        rmse: rmse(y, y_hat)?,
        bland_altman: bland_altman(y, y_hat)?,
        n: y.len(),
    })
}

pub type Confusion = [[u64; 4]; 4];

/// Rows are reference classes, columns predicted.
pub fn confusion_matrix(reference: &[SeverityClass], predicted: &[SeverityClass]) -> Confusion {
    let mut m = [[0u64; 4]; 4];
    for (r, p) in reference.iter().zip(predicted) {
        m[r.index()][p.index()] += 1;
    }
    m
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassScores {
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub support: u64,
}

/// One-vs-rest scores for class `c`. Precision is 0 with no predicted
/// positives; specificity is 1 when there are no reference negatives.
pub fn class_scores(m: &Confusion, c: usize) -> ClassScores {
    let total: u64 = m.iter().flatten().sum();
    let tp = m[c][c];
    let support: u64 = m[c].iter().sum();
    let predicted: u64 = (0..4).map(|r| m[r][c]).sum();
    let fp = predicted - tp;
    let fneg = support - tp;
    let tn = total - tp - fp - fneg;
    let ratio = |a: u64, b: u64, empty: f64| if b == 0 { empty } else { a as f64 / b as f64 };
    let precision = ratio(tp, predicted, 0.0);
    let sensitivity = ratio(tp, support, 0.0);
    let specificity = ratio(tn, tn + fp, 1.0);
    let f1 = if precision + sensitivity == 0.0 { 0.0 } else { 2.0 * precision * sensitivity / (precision + sensitivity) };
    ClassScores { precision, sensitivity, specificity, f1, support }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct WeightedScores {
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Support-weighted average of the one-vs-rest scores.
pub fn weighted_scores(m: &Confusion) -> WeightedScores {
    let total: u64 = m.iter().flatten().sum();
    let mut w = WeightedScores::default();
    if total == 0 {
        return w;
    }
    for c in 0..4 {
        let s = class_scores(m, c);
        let weight = s.support as f64 / total as f64;
        w.f1 += weight * s.f1;
        w.precision += weight * s.precision;
        w.sensitivity += weight * s.sensitivity;
        w.specificity += weight * s.specificity;
    }
    w
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Interval {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub confusion: Confusion,
    pub f1: Interval,
    pub precision: Interval,
    pub sensitivity: Interval,
    pub specificity: Interval,
    pub per_class: [ClassScores; 4],
    pub n: usize,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Weighted one-vs-rest metrics with 95% percentile-bootstrap intervals.
/// Replicate `b` resamples subjects with its own ChaCha stream `b`, so the
/// result does not depend on evaluation order.
pub fn classification_report(
    reference: &[SeverityClass],
    predicted: &[SeverityClass],
    bootstrap_n: usize,
    seed: u64,
) -> Result<ClassificationReport> {
    if reference.len() != predicted.len() || reference.is_empty() {
        return Err(invalid("classification needs equal, non-empty reference and prediction lists"));
    }
    let n = reference.len();
    let confusion = confusion_matrix(reference, predicted);
    let point = weighted_scores(&confusion);
    let mut reps: [Vec<f64>; 4] = Default::default();
    for b in 0..bootstrap_n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut m = [[0u64; 4]; 4];
        for _ in 0..n {
            let i = rng.random_range(0..n);
            m[reference[i].index()][predicted[i].index()] += 1;
        }
        let s = weighted_scores(&m);
        for (r, v) in reps.iter_mut().zip([s.f1, s.precision, s.sensitivity, s.specificity]) {
            r.push(v);
        }
    }
    let interval = |p: f64, r: &mut Vec<f64>| {
        if r.is_empty() {
            return Interval { point: p, lower: p, upper: p };
        }
        r.sort_by(f64::total_cmp);
        Interval { point: p, lower: percentile(r, 0.025).min(p), upper: percentile(r, 0.975).max(p) }
    };
    let [rf, rp, rs, rsp] = &mut reps;
    Ok(ClassificationReport {
        confusion,
        f1: interval(point.f1, rf),
        precision: interval(point.precision, rp),
        sensitivity: interval(point.sensitivity, rs),
        specificity: interval(point.specificity, rsp),
        per_class: [0, 1, 2, 3].map(|c| class_scores(&confusion, c)),
        n,
    })
}

/// Discretises AHI values.
pub fn severities(ahi: &[f64]) -> Result<Vec<SeverityClass>> {
    ahi.iter().map(|&a| SeverityClass::from_ahi(a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use SeverityClass::*;

    #[test]
    fn r2_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&y, &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2(&y, &[1.0, 2.0, 2.0]).unwrap(), 0.5);
        assert!(r2(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn icc_examples() {
        let y = [1.0, 4.0, 2.0, 8.0];
        assert!((icc(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let shifted: Vec<f64> = y.iter().map(|v| v + 1.5).collect();
        assert!(icc(&y, &shifted).unwrap() < 1.0);
        assert!(icc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bland_altman_examples() {
        let y = [1.0, 2.0, 3.0];
        let ba = bland_altman(&y, &y).unwrap();
        assert_eq!((ba.bias, ba.loa_low, ba.loa_high), (0.0, 0.0, 0.0));
        let ba = bland_altman(&y, &[3.0, 4.0, 5.0]).unwrap();
        assert_eq!((ba.bias, ba.loa_low, ba.loa_high), (2.0, 2.0, 2.0));
        let ba = bland_altman(&[0.0, 0.0], &[1.0, -1.0]).unwrap();
        assert_eq!((ba.bias, ba.loa_low, ba.loa_high), (0.0, -1.96, 1.96));
    }

    #[test]
    fn correlation_examples() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let cube: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman(&x, &cube).unwrap() - 1.0).abs() < 1e-15);
        assert!(pearson(&x, &cube).unwrap() < 1.0);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn two_class_weighted_f1() {
        let r = [Normal, Normal, Mild, Mild];
        let p = [Normal, Mild, Mild, Mild];
        let rep = classification_report(&r, &p, 200, 1).unwrap();
        let expected = 0.5 * (2.0 / 3.0) + 0.5 * (4.0 / 5.0);
        assert!((rep.f1.point - expected).abs() < 1e-15);
        assert!(rep.f1.lower <= rep.f1.point && rep.f1.point <= rep.f1.upper);
        assert_eq!(rep.per_class[0].precision, 1.0);
        assert_eq!(rep.per_class[0].sensitivity, 0.5);
        assert!((rep.per_class[1].precision - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_degenerate_classification() {
        let r = [Normal, Mild, Moderate, Severe, Severe];
        let rep = classification_report(&r, &r, 100, 3).unwrap();
        assert_eq!((rep.f1.point, rep.precision.point, rep.sensitivity.point, rep.specificity.point), (1.0, 1.0, 1.0, 1.0));
        for (i, row) in rep.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert!(i == j || v == 0);
            }
        }
        let single = [Mild; 6];
        let rep = classification_report(&single, &single, 100, 3).unwrap();
        assert_eq!(rep.f1.point, 1.0);
        assert_eq!(rep.specificity.point, 1.0);
        // A class in the reference that is never predicted has precision 0.
        let rep = classification_report(&[Normal, Mild], &[Normal, Normal], 10, 0).unwrap();
        assert_eq!(rep.per_class[1].precision, 0.0);
    }

    #[test]
    fn bootstrap_is_seeded() {
        let r = [Normal, Mild, Mild, Severe, Moderate, Normal, Severe, Mild];
        let p = [Normal, Mild, Moderate, Severe, Moderate, Mild, Moderate, Mild];
        let a = classification_report(&r, &p, 300, 9).unwrap();
        let b = classification_report(&r, &p, 300, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_p_value_in_range() {
        let x: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
        let p = permutation_p_value(&x, &y, pearson, 200, 1).unwrap();
        assert!(p > 0.0 && p < 0.01);
        let z: Vec<f64> = (0..30).map(|i| ((i * 7919) % 31) as f64).collect();
        let q = permutation_p_value(&x, &z, spearman, 200, 1).unwrap();
        assert!((0.0..=1.0).contains(&q));
    }
}
