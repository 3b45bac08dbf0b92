//! End-to-end runs and the ablation protocols built on them.
//!
//! Every arm trains a fresh regressor on concepts from some source (oracle,
//! random, SLAM output or a mix) and is scored on the test split with
//! SLAM-predicted concepts, the only ones available at deployment.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};
use crate::eval::{
    agreement_report, classification_report, pearson, permutation_p_value, severities, spearman, AgreementReport,
    ClassificationReport,
};
use crate::preprocess::{preprocess_pipeline, PreprocessConfig};
use crate::regressor::{
    encode_clinical, fuse, fused_feature_names, train_regressor, RegressorConfig, RegressorModel,
    CLINICAL_ENCODED_NAMES,
};
use crate::signal::{
    load_study_bundle, read_table, save_table, Cell, ClinicalFeatures, SeverityClass, SleepStudy, Table,
    N_CONCEPTS,
};
use crate::slam::{minute_features, train_slam_with_progress, SlamConfig, SlamEpoch, SlamExample, SlamModel};
use crate::synth::{generate_studies, SynthConfig, MANIFEST_FILE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSource {
    /// Directory of study bundles with a manifest.
    Path(PathBuf),
    /// Generated in memory.
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCohort {
    pub name: String,
    pub source: CohortSource,
}

/// Shifted population standing in for an external cohort: older, more
/// severe and noisier.
pub fn default_ood_synth() -> SynthConfig {
    SynthConfig {
        n_studies: 100,
        severity_mix: [0.1, 0.3, 0.3, 0.3],
        age_range: [60.0, 90.0],
        noise_sd: 0.5,
        artifact_prob: 0.35,
        id_prefix: "ood".into(),
        seed: 4242,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub cohort: CohortSource,
    pub ood_cohorts: Vec<NamedCohort>,
    pub split: [f64; 3],
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub slam: SlamConfig,
    pub regressor: RegressorConfig,
    pub bootstrap_n: usize,
    /// Percent of training subjects given oracle concepts, in (0, 100].
    pub sweep_grid: Vec<f64>,
    pub intervention_thresholds: Vec<f64>,
    pub partial_correct_fraction: f64,
    pub shuffle_segment_len: usize,
    pub importance_repeats: usize,
    pub bmi_permutations: usize,
    pub ridge_lambda: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            cohort: CohortSource::Synth(SynthConfig { n_studies: 600, ..Default::default() }),
            ood_cohorts: vec![NamedCohort { name: "ood_shifted".into(), source: CohortSource::Synth(default_ood_synth()) }],
            split: [0.65, 0.25, 0.10],
            seed: 42,
            preprocess: PreprocessConfig::default(),
            slam: SlamConfig::default(),
            regressor: RegressorConfig::default(),
            bootstrap_n: 1000,
            sweep_grid: (1..=20).map(|i| 5.0 * i as f64).collect(),
            intervention_thresholds: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0, 1e9],
            partial_correct_fraction: 0.05,
            shuffle_segment_len: 10,
            importance_repeats: 10,
            bmi_permutations: 10_000,
            ridge_lambda: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("split fractions must be >= 0 and sum to 1, got {:?}", self.split)));
        }
        if let Some(p) = self.sweep_grid.iter().find(|p| !(**p > 0.0 && **p <= 100.0)) {
            return Err(config_err(format!("sweep percentages must be in (0, 100], got {p}")));
        }
        if self.intervention_thresholds.iter().any(|t| !(*t >= 0.0)) {
            return Err(config_err("intervention thresholds must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.partial_correct_fraction) {
            return Err(config_err("partial_correct_fraction must be in [0, 1]"));
        }
        if self.shuffle_segment_len == 0 || self.importance_repeats == 0 {
            return Err(config_err("shuffle_segment_len and importance_repeats must be positive"));
        }
        if let CohortSource::Synth(s) = &self.cohort {
            s.validate()?;
        }
        self.preprocess.validate()?;
        self.slam.validate()?;
        if self.slam.input_len != self.preprocess.target_len {
            return Err(config_err(format!(
                "slam.input_len ({}) must equal preprocess.target_len ({})",
                self.slam.input_len, self.preprocess.target_len
            )));
        }
        self.regressor.validate()
    }

    /// Applies one seed to the split, the arms and both models.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.slam.seed = seed;
        self.regressor.seed = seed;
        self
    }
}

/// Seeded shuffle, then contiguous train/val/test parts of sizes
/// round(f0 n), round(f1 n) and the remainder.
pub fn split_cohort<T: Clone>(items: &[T], fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(config_err(format!("split fractions must be >= 0 and sum to 1, got {fractions:?}")));
    }
    let n = items.len();
    // Largest remainder: floors first, leftover units to the biggest remainders.
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|x| x.floor() as usize);
    let mut by_remainder = [0usize, 1, 2];
    by_remainder.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in by_remainder.iter().take(n - counts.iter().sum::<usize>()) {
        counts[i] += 1;
    }
    let [n_train, n_val, n_test] = counts;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(invalid(format!("split {fractions:?} of {n} studies leaves an empty part")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..n_train + n_val]), pick(&order[n_train + n_val..])))
}

/// Loads every bundle listed in `dir/manifest.csv`.
pub fn load_cohort(dir: &Path) -> Result<Vec<SleepStudy>> {
    let manifest = read_table(&dir.join(MANIFEST_FILE))?;
    manifest.texts("id")?.iter().map(|id| load_study_bundle(&dir.join(id))).collect()
}

pub fn load_source(source: &CohortSource) -> Result<Vec<SleepStudy>> {
    match source {
        CohortSource::Path(p) => load_cohort(p),
        CohortSource::Synth(cfg) => Ok(generate_studies(cfg)?.into_iter().map(|g| g.study).collect()),
    }
}

/// A study reduced to what the models consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub input: Vec<f64>,
    pub oracle: [f64; N_CONCEPTS],
    pub clinical: ClinicalFeatures,
    pub reference_ahi: f64,
}

pub fn subject_from_study(study: &SleepStudy, pre: &PreprocessConfig) -> Result<Subject> {
    let c = crate::concepts::compute_concepts(&study.events, &study.signal, study.total_sleep_time_h)?;
    Ok(Subject {
        id: study.id.clone(),
        input: preprocess_pipeline(&study.signal, pre)?,
        oracle: c.to_array(),
        clinical: study.clinical.clone(),
        reference_ahi: study.reference_ahi,
    })
}

fn subjects(studies: &[SleepStudy], pre: &PreprocessConfig) -> Result<Vec<Subject>> {
    studies.iter().map(|s| subject_from_study(s, pre)).collect()
}

pub fn slam_examples(subjects: &[Subject]) -> Vec<SlamExample> {
    subjects.iter().map(|s| SlamExample { id: s.id.clone(), input: s.input.clone(), target: s.oracle }).collect()
}

/// Split cohorts ready for modelling.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Subject>,
    pub val: Vec<Subject>,
    pub test: Vec<Subject>,
    pub ood: Vec<(String, Vec<Subject>)>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let studies = load_source(&cfg.cohort)?;
    let (train, val, test) = split_cohort(&studies, cfg.split, cfg.seed)?;
    let mut ood = Vec::new();
    for c in &cfg.ood_cohorts {
        ood.push((c.name.clone(), subjects(&load_source(&c.source)?, &cfg.preprocess)?));
    }
    Ok(Prepared {
        train: subjects(&train, &cfg.preprocess)?,
        val: subjects(&val, &cfg.preprocess)?,
        test: subjects(&test, &cfg.preprocess)?,
        ood,
    })
}

/// SLAM concept predictions for every prepared subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SlamOutputs {
    pub train: Vec<[f64; N_CONCEPTS]>,
    pub val: Vec<[f64; N_CONCEPTS]>,
    pub test: Vec<[f64; N_CONCEPTS]>,
    pub ood: Vec<Vec<[f64; N_CONCEPTS]>>,
}

pub fn predict_subjects(model: &mut SlamModel, subjects: &[Subject]) -> Result<Vec<[f64; N_CONCEPTS]>> {
    let inputs: Vec<&[f64]> = subjects.iter().map(|s| s.input.as_slice()).collect();
    model.predict_batch(&inputs)
}

pub fn slam_outputs(model: &mut SlamModel, prep: &Prepared) -> Result<SlamOutputs> {
    Ok(SlamOutputs {
        train: predict_subjects(model, &prep.train)?,
        val: predict_subjects(model, &prep.val)?,
        test: predict_subjects(model, &prep.test)?,
        ood: prep.ood.iter().map(|(_, s)| predict_subjects(model, s)).collect::<Result<_>>()?,
    })
}

pub fn train_slam_stage(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    progress: impl FnMut(&SlamEpoch),
) -> Result<SlamModel> {
    train_slam_with_progress(&slam_examples(&prep.train), &slam_examples(&prep.val), &cfg.slam, progress)
}

/// Point metrics of one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArmMetrics {
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub icc: f64,
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub const ARM_METRIC_COLUMNS: [&str; 8] = ["f1", "precision", "sensitivity", "specificity", "icc", "r2", "mae", "rmse"];

impl ArmMetrics {
    pub fn from_reports(a: &AgreementReport, c: &ClassificationReport) -> Self {
        ArmMetrics {
            f1: c.f1.point,
            precision: c.precision.point,
            sensitivity: c.sensitivity.point,
            specificity: c.specificity.point,
            icc: a.icc,
            r2: a.r2,
            mae: a.mae,
            rmse: a.rmse,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        [self.f1, self.precision, self.sensitivity, self.specificity, self.icc, self.r2, self.mae, self.rmse]
            .into_iter()
            .map(Cell::from)
            .collect()
    }
}

/// Full evaluation of one cohort's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortEval {
    pub ids: Vec<String>,
    pub reference: Vec<f64>,
    pub predicted: Vec<f64>,
    pub agreement: AgreementReport,
    pub classification: ClassificationReport,
}

impl CohortEval {
    pub fn metrics(&self) -> ArmMetrics {
        ArmMetrics::from_reports(&self.agreement, &self.classification)
    }
}

pub fn evaluate_predictions(
    ids: Vec<String>,
    reference: Vec<f64>,
    predicted: Vec<f64>,
    bootstrap_n: usize,
    seed: u64,
) -> Result<CohortEval> {
    let agreement = agreement_report(&reference, &predicted)?;
    let classification = classification_report(&severities(&reference)?, &severities(&predicted)?, bootstrap_n, seed)?;
    Ok(CohortEval { ids, reference, predicted, agreement, classification })
}

pub const PREDICTION_COLUMNS: [&str; 5] = ["id", "pred_ahi", "severity", "reference_ahi", "reference_severity"];

pub fn predictions_table(e: &CohortEval) -> Result<Table> {
    prediction_rows(&e.ids, &e.reference, &e.predicted)
}

pub fn prediction_rows(ids: &[String], reference: &[f64], predicted: &[f64]) -> Result<Table> {
    let mut t = Table::new(&PREDICTION_COLUMNS);
    for ((id, r), p) in ids.iter().zip(reference).zip(predicted) {
        t.push(vec![
            id.as_str().into(),
            (*p).into(),
            SeverityClass::from_ahi(*p)?.name().into(),
            (*r).into(),
            SeverityClass::from_ahi(*r)?.name().into(),
        ])?;
    }
    Ok(t)
}

/// Inverse of [`predictions_table`]: (ids, reference, predicted).
pub fn parse_predictions(t: &Table) -> Result<(Vec<String>, Vec<f64>, Vec<f64>)> {
    for c in PREDICTION_COLUMNS {
        if t.column_index(c).is_none() {
            return Err(invalid(format!("prediction file lacks column '{c}'")));
        }
    }
    Ok((t.texts("id")?, t.numbers("reference_ahi")?, t.numbers("pred_ahi")?))
}

/// Writes the agreement, classification, per-class, confusion, Bland-Altman
/// and parity CSVs.
pub fn write_cohort_eval(e: &CohortEval, dir: &Path) -> Result<()> {
    let a = &e.agreement;
    let mut agreement = Table::new(&["metric", "value"]);
    for (k, v) in [
        ("r2", a.r2),
        ("icc", a.icc),
        ("mae", a.mae),
        ("rmse", a.rmse),
        ("bias", a.bland_altman.bias),
        ("loa_low", a.bland_altman.loa_low),
        ("loa_high", a.bland_altman.loa_high),
        ("n", a.n as f64),
    ] {
        agreement.push(vec![k.into(), v.into()])?;
    }
    save_table(&agreement, &dir.join("agreement.csv"))?;

    let c = &e.classification;
    let mut cls = Table::new(&["metric", "point", "lower", "upper"]);
    for (k, i) in [("f1", c.f1), ("precision", c.precision), ("sensitivity", c.sensitivity), ("specificity", c.specificity)] {
        cls.push(vec![k.into(), i.point.into(), i.lower.into(), i.upper.into()])?;
    }
    save_table(&cls, &dir.join("classification.csv"))?;

    let mut per = Table::new(&["class", "precision", "sensitivity", "specificity", "f1", "support"]);
    for (s, class) in c.per_class.iter().zip(SeverityClass::ALL) {
        per.push(vec![
            class.name().into(),
            s.precision.into(),
            s.sensitivity.into(),
            s.specificity.into(),
            s.f1.into(),
            (s.support as f64).into(),
        ])?;
    }
    save_table(&per, &dir.join("per_class.csv"))?;

    let mut conf = Table::new(&["reference", "normal", "mild", "moderate", "severe"]);
    for (row, class) in c.confusion.iter().zip(SeverityClass::ALL) {
        let mut cells: Vec<Cell> = vec![class.name().into()];
        cells.extend(row.iter().map(|&v| Cell::from(v as f64)));
        conf.push(cells)?;
    }
    save_table(&conf, &dir.join("confusion.csv"))?;

    let mut ba = Table::new(&["id", "mean", "diff"]);
    let mut parity = Table::new(&["id", "reference", "predicted", "reference_severity", "predicted_severity"]);
    for ((id, r), p) in e.ids.iter().zip(&e.reference).zip(&e.predicted) {
        ba.push(vec![id.as_str().into(), ((r + p) / 2.0).into(), (p - r).into()])?;
        parity.push(vec![
            id.as_str().into(),
            (*r).into(),
            (*p).into(),
            SeverityClass::from_ahi(*r)?.name().into(),
            SeverityClass::from_ahi(*p)?.name().into(),
        ])?;
    }
    save_table(&ba, &dir.join("bland_altman_points.csv"))?;
    save_table(&parity, &dir.join("parity_points.csv"))?;
    save_table(&predictions_table(e)?, &dir.join("predictions.csv"))
}

fn fused_rows(subjects: &[Subject], concepts: &[[f64; N_CONCEPTS]]) -> Vec<Vec<f64>> {
    subjects.iter().zip(concepts).map(|(s, c)| fuse(c, &s.clinical)).collect()
}

fn targets(subjects: &[Subject]) -> Vec<f64> {
    subjects.iter().map(|s| s.reference_ahi).collect()
}

fn oracle(subjects: &[Subject]) -> Vec<[f64; N_CONCEPTS]> {
    subjects.iter().map(|s| s.oracle).collect()
}

/// Trains a concept regressor from the given train/val concepts and scores
/// it on the test subjects with `test_concepts`.
pub fn concept_arm(
    prep: &Prepared,
    train_concepts: &[[f64; N_CONCEPTS]],
    val_concepts: &[[f64; N_CONCEPTS]],
    test_concepts: &[[f64; N_CONCEPTS]],
    cfg: &ExperimentConfig,
    bootstrap_n: usize,
) -> Result<(RegressorModel, CohortEval)> {
    let train = fused_rows(&prep.train, train_concepts);
    let val = fused_rows(&prep.val, val_concepts);
    let y_val = targets(&prep.val);
    let model =
        train_regressor(&train, &targets(&prep.train), Some((&val, &y_val)), fused_feature_names(), &cfg.regressor)?;
    let pred = model.predict_ahi(&fused_rows(&prep.test, test_concepts))?;
    let ids = prep.test.iter().map(|s| s.id.clone()).collect();
    let eval = evaluate_predictions(ids, targets(&prep.test), pred, bootstrap_n, cfg.seed)?;
    Ok((model, eval))
}

#[derive(Debug)]
pub struct PipelineReport {
    pub regressor: RegressorModel,
    pub test: CohortEval,
    pub ood: Vec<(String, CohortEval)>,
}

/// Regressor on SLAM concepts, scored on the test split and every
/// out-of-distribution cohort.
pub fn run_pipeline(prep: &Prepared, slam: &SlamOutputs, cfg: &ExperimentConfig) -> Result<PipelineReport> {
    let (regressor, test) = concept_arm(prep, &slam.train, &slam.val, &slam.test, cfg, cfg.bootstrap_n)?;
    let mut ood = Vec::new();
    for ((name, subjects), concepts) in prep.ood.iter().zip(&slam.ood) {
        let pred = regressor.predict_ahi(&fused_rows(subjects, concepts))?;
        let ids = subjects.iter().map(|s| s.id.clone()).collect();
        ood.push((name.clone(), evaluate_predictions(ids, targets(subjects), pred, cfg.bootstrap_n, cfg.seed)?));
    }
    Ok(PipelineReport { regressor, test, ood })
}

pub fn write_pipeline_report(r: &PipelineReport, dir: &Path) -> Result<()> {
    write_cohort_eval(&r.test, &dir.join("test"))?;
    for (name, e) in &r.ood {
        write_cohort_eval(e, &dir.join(name))?;
    }
    let mut summary = Table::new(&[&["cohort"][..], &ARM_METRIC_COLUMNS[..]].concat());
    for (name, e) in std::iter::once(("test", &r.test)).chain(r.ood.iter().map(|(n, e)| (n.as_str(), e))) {
        let mut row: Vec<Cell> = vec![name.into()];
        row.extend(e.metrics().cells());
        summary.push(row)?;
    }
    save_table(&summary, &dir.join("summary.csv"))
}

fn arm_rng(seed: u64, arm: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(arm);
    rng
}

/// Per-concept [min, max] over the training oracle concepts.
fn concept_ranges(prep: &Prepared) -> [(f64, f64); N_CONCEPTS] {
    let mut r = [(f64::INFINITY, f64::NEG_INFINITY); N_CONCEPTS];
    for s in &prep.train {
        for (j, v) in s.oracle.iter().enumerate() {
            r[j] = (r[j].0.min(*v), r[j].1.max(*v));
        }
    }
    r
}

fn random_concepts(ranges: &[(f64, f64); N_CONCEPTS], rng: &mut impl Rng) -> [f64; N_CONCEPTS] {
    ranges.map(|(lo, hi)| if hi > lo { rng.random_range(lo..=hi) } else { lo })
}

/// Oracle concepts for a random `fraction` of subjects, uniform random
/// draws within training ranges for the rest.
fn mixed_concepts(
    subjects: &[Subject],
    ranges: &[(f64, f64); N_CONCEPTS],
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<[f64; N_CONCEPTS]> {
    let n_correct = (fraction * subjects.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(rng);
    let mut correct = vec![false; subjects.len()];
    for &i in &order[..n_correct] {
        correct[i] = true;
    }
    subjects
        .iter()
        .zip(correct)
        .map(|(s, ok)| {
            let random = random_concepts(ranges, rng);
            if ok {
                s.oracle
            } else {
                random
            }
        })
        .collect()
}

/// Cuts the oracle concept list into segments of `len` subjects and
/// shuffles the segments, so every subject carries a real but mismatched
/// concept vector.
fn shuffled_segments(subjects: &[Subject], len: usize, rng: &mut impl Rng) -> Vec<[f64; N_CONCEPTS]> {
    let mut segments: Vec<Vec<[f64; N_CONCEPTS]>> = oracle(subjects).chunks(len).map(<[_]>::to_vec).collect();
    // Keep drawing until the order changes, unless there is nothing to shuffle.
    if segments.len() > 1 {
        let original = segments.clone();
        while segments == original {
            segments.shuffle(rng);
        }
    }
    segments.concat()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmRow {
    pub label: String,
    pub metrics: ArmMetrics,
}

pub fn arm_table(first_column: &str, rows: &[ArmRow]) -> Result<Table> {
    let mut t = Table::new(&[&[first_column][..], &ARM_METRIC_COLUMNS[..]].concat());
    for r in rows {
        let mut cells: Vec<Cell> = vec![r.label.as_str().into()];
        cells.extend(r.metrics.cells());
        t.push(cells)?;
    }
    Ok(t)
}

/// Rows: incorrect, incorrect plus 5% correct, correct, shuffled segments.
pub fn corruption_ablation(prep: &Prepared, slam: &SlamOutputs, cfg: &ExperimentConfig) -> Result<Vec<ArmRow>> {
    let ranges = concept_ranges(prep);
    let mut rows = Vec::new();
    let mut arm = |label: &str, train: Vec<[f64; N_CONCEPTS]>, val: Vec<[f64; N_CONCEPTS]>| -> Result<()> {
        let (_, e) = concept_arm(prep, &train, &val, &slam.test, cfg, 0)?;
        rows.push(ArmRow { label: label.into(), metrics: e.metrics() });
        Ok(())
    };
    let mut rng = arm_rng(cfg.seed, 1);
    arm("incorrect", mixed_concepts(&prep.train, &ranges, 0.0, &mut rng), mixed_concepts(&prep.val, &ranges, 0.0, &mut rng))?;
    let f = cfg.partial_correct_fraction;
    let mut rng = arm_rng(cfg.seed, 2);
    arm(
        "incorrect_plus_partial",
        mixed_concepts(&prep.train, &ranges, f, &mut rng),
        mixed_concepts(&prep.val, &ranges, f, &mut rng),
    )?;
    arm("correct", oracle(&prep.train), oracle(&prep.val))?;
    let mut rng = arm_rng(cfg.seed, 4);
    let len = cfg.shuffle_segment_len;
    arm("shuffled_segments", shuffled_segments(&prep.train, len, &mut rng), shuffled_segments(&prep.val, len, &mut rng))?;
    Ok(rows)
}

/// One row per grid percentage.
pub fn proportion_sweep(prep: &Prepared, slam: &SlamOutputs, cfg: &ExperimentConfig) -> Result<Vec<ArmRow>> {
    let ranges = concept_ranges(prep);
    let mut rows = Vec::new();
    for (k, &p) in cfg.sweep_grid.iter().enumerate() {
        let mut rng = arm_rng(cfg.seed, 100 + k as u64);
        let train = mixed_concepts(&prep.train, &ranges, p / 100.0, &mut rng);
        let val = mixed_concepts(&prep.val, &ranges, p / 100.0, &mut rng);
        let (_, e) = concept_arm(prep, &train, &val, &slam.test, cfg, 0)?;
        rows.push(ArmRow { label: crate::signal::format_number(p), metrics: e.metrics() });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InterventionRow {
    pub tau: f64,
    pub fraction_intercepted: f64,
    pub metrics: ArmMetrics,
}

/// SLAM concept vectors whose ahi_a0h4 error exceeds `tau` are replaced
/// by the oracle vector.
fn intercept(subjects: &[Subject], predicted: &[[f64; N_CONCEPTS]], tau: f64) -> (Vec<[f64; N_CONCEPTS]>, usize) {
    let mut hits = 0;
    let out = subjects
        .iter()
        .zip(predicted)
        .map(|(s, p)| {
            if (p[0] - s.oracle[0]).abs() > tau {
                hits += 1;
                s.oracle
            } else {
                *p
            }
        })
        .collect();
    (out, hits)
}

pub fn intervention_study(prep: &Prepared, slam: &SlamOutputs, cfg: &ExperimentConfig) -> Result<Vec<InterventionRow>> {
    let mut rows = Vec::new();
    for &tau in &cfg.intervention_thresholds {
        let (train, hits) = intercept(&prep.train, &slam.train, tau);
        let (val, _) = intercept(&prep.val, &slam.val, tau);
        let (_, e) = concept_arm(prep, &train, &val, &slam.test, cfg, 0)?;
        rows.push(InterventionRow {
            tau,
            fraction_intercepted: hits as f64 / prep.train.len() as f64,
            metrics: e.metrics(),
        });
    }
    Ok(rows)
}

pub fn intervention_table(rows: &[InterventionRow]) -> Result<Table> {
    let mut t = Table::new(&["tau", "fraction_intercepted", "f1", "mae", "rmse"]);
    for r in rows {
        t.push(vec![r.tau.into(), r.fraction_intercepted.into(), r.metrics.f1.into(), r.metrics.mae.into(), r.metrics.rmse.into()])?;
    }
    Ok(t)
}

pub fn sweep_table(rows: &[ArmRow]) -> Result<Table> {
    arm_table("p", rows)
}

fn signal_rows(subjects: &[Subject]) -> Vec<Vec<f64>> {
    subjects.iter().map(|s| minute_features(&s.input)).collect()
}

fn clinical_rows(subjects: &[Subject]) -> Vec<Vec<f64>> {
    subjects.iter().map(|s| encode_clinical(&s.clinical)).collect()
}

fn concat_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| [x.as_slice(), y.as_slice()].concat()).collect()
}

fn minute_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("minute_{i}")).collect()
}

fn clinical_names() -> Vec<String> {
    CLINICAL_ENCODED_NAMES.iter().map(|s| s.to_string()).collect()
}

fn fit_predict(
    prep: &Prepared,
    rows: impl Fn(&[Subject]) -> Vec<Vec<f64>>,
    names: Vec<String>,
    cfg: &RegressorConfig,
) -> Result<Vec<f64>> {
    let val = rows(&prep.val);
    let y_val = targets(&prep.val);
    let m = train_regressor(&rows(&prep.train), &targets(&prep.train), Some((&val, &y_val)), names, cfg)?;
    m.predict_ahi(&rows(&prep.test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub rows: Vec<ArmRow>,
    pub signal_only: Vec<f64>,
    pub clinical_only: Vec<f64>,
    pub decision_level: Vec<f64>,
}

/// Concept pipeline versus feature-level concatenation and decision-level
/// averaging of single-modality regressors.
pub fn fusion_baselines(prep: &Prepared, slam: &SlamOutputs, cfg: &ExperimentConfig) -> Result<FusionReport> {
    let ids: Vec<String> = prep.test.iter().map(|s| s.id.clone()).collect();
    let y = targets(&prep.test);
    let score = |pred: Vec<f64>| -> Result<ArmMetrics> {
        Ok(evaluate_predictions(ids.clone(), y.clone(), pred, 0, cfg.seed)?.metrics())
    };
    let (_, kind) = concept_arm(prep, &slam.train, &slam.val, &slam.test, cfg, 0)?;
    let d = minute_features(&prep.train[0].input).len();
    let feature = fit_predict(
        prep,
        |s| concat_rows(&signal_rows(s), &clinical_rows(s)),
        [minute_names(d), clinical_names()].concat(),
        &cfg.regressor,
    )?;
    let signal_only = fit_predict(prep, signal_rows, minute_names(d), &cfg.regressor)?;
    let clinical_only = fit_predict(prep, clinical_rows, clinical_names(), &cfg.regressor)?;
    let decision_level: Vec<f64> = signal_only.iter().zip(&clinical_only).map(|(a, b)| (a + b) / 2.0).collect();
    let rows = vec![
        ArmRow { label: "kindsleep".into(), metrics: kind.metrics() },
        ArmRow { label: "feature_level".into(), metrics: score(feature)? },
        ArmRow { label: "decision_level".into(), metrics: score(decision_level.clone())? },
    ];
    Ok(FusionReport { rows, signal_only, clinical_only, decision_level })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Importance {
    pub feature: String,
    pub group: String,
    pub importance: f64,
}

/// Mean MAE increase when one feature column is permuted, sorted by
/// decreasing importance (ties keep feature order).
pub fn permutation_importance(
    model: &RegressorModel,
    rows: &[Vec<f64>],
    targets: &[f64],
    groups: &[String],
    repeats: usize,
    seed: u64,
) -> Result<Vec<Importance>> {
    let p = model.n_features();
    if groups.len() != p {
        return Err(invalid(format!("{} group labels for {p} features", groups.len())));
    }
    if rows.len() != targets.len() || rows.is_empty() {
        return Err(invalid("importance needs matching, non-empty rows and targets"));
    }
    let base = crate::eval::mae(targets, &model.predict_ahi(rows)?)?;
    let mut out = Vec::with_capacity(p);
    for j in 0..p {
        let mut rng = arm_rng(seed, 500 + j as u64);
        let mut total = 0.0;
        for _ in 0..repeats {
            let mut column: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            column.shuffle(&mut rng);
            let permuted: Vec<Vec<f64>> = rows
                .iter()
                .zip(&column)
                .map(|(r, v)| {
                    let mut r = r.clone();
                    r[j] = *v;
                    r
                })
                .collect();
            total += crate::eval::mae(targets, &model.predict_ahi(&permuted)?)? - base;
        }
        out.push(Importance {
            feature: model.feature_names[j].clone(),
            group: groups[j].clone(),
            importance: total / repeats as f64,
        });
    }
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance));
    Ok(out)
}

/// Group labels for the fused feature layout.
pub fn fused_groups() -> Vec<String> {
    (0..N_CONCEPTS)
        .map(|_| "concept".to_string())
        .chain(CLINICAL_ENCODED_NAMES.iter().map(|_| "clinical".to_string()))
        .collect()
}

/// Importance of the pipeline regressor on the test split.
pub fn pipeline_importance(
    prep: &Prepared,
    slam: &SlamOutputs,
    regressor: &RegressorModel,
    cfg: &ExperimentConfig,
) -> Result<Vec<Importance>> {
    permutation_importance(
        regressor,
        &fused_rows(&prep.test, &slam.test),
        &targets(&prep.test),
        &fused_groups(),
        cfg.importance_repeats,
        cfg.seed,
    )
}

pub fn importance_table(rows: &[Importance]) -> Result<Table> {
    let mut t = Table::new(&["rank", "feature", "group", "importance"]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![((i + 1) as f64).into(), r.feature.as_str().into(), r.group.as_str().into(), r.importance.into()])?;
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BmiClass {
    Normal,
    Overweight,
    Obese,
}

impl BmiClass {
    pub const ALL: [BmiClass; 3] = [BmiClass::Normal, BmiClass::Overweight, BmiClass::Obese];

    pub fn from_bmi(bmi: f64) -> Self {
        if bmi < 25.0 {
            BmiClass::Normal
        } else if bmi < 30.0 {
            BmiClass::Overweight
        } else {
            BmiClass::Obese
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BmiClass::Normal => "normal",
            BmiClass::Overweight => "overweight",
            BmiClass::Obese => "obese",
        }
    }
}

/// Per-class statistics; `None` fields mean fewer than two subjects.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BmiRow {
    pub class: BmiClass,
    pub n: usize,
    pub mean_ahi: Option<f64>,
    pub sd_ahi: Option<f64>,
    pub f1: Option<crate::eval::Interval>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BmiReport {
    pub rows: Vec<BmiRow>,
    pub pearson: Option<(f64, f64)>,
    pub spearman: Option<(f64, f64)>,
}

/// BMI classes with reference-AHI summaries and severity F1, plus BMI-AHI
/// correlations with permutation p-values.
pub fn bmi_stratified_report(
    bmi: &[f64],
    reference: &[f64],
    predicted: &[f64],
    bootstrap_n: usize,
    permutations: usize,
    seed: u64,
) -> Result<BmiReport> {
    if bmi.len() != reference.len() || bmi.len() != predicted.len() {
        return Err(invalid("bmi, reference and prediction lists differ in length"));
    }
    if bmi.iter().any(|b| !b.is_finite()) {
        return Err(invalid("bmi must be present and finite for every subject"));
    }
    let mut rows = Vec::new();
    for class in BmiClass::ALL {
        let idx: Vec<usize> = (0..bmi.len()).filter(|&i| BmiClass::from_bmi(bmi[i]) == class).collect();
        let n = idx.len();
        if n < 2 {
            rows.push(BmiRow { class, n, mean_ahi: None, sd_ahi: None, f1: None });
            continue;
        }
        let r: Vec<f64> = idx.iter().map(|&i| reference[i]).collect();
        let p: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
        let mean = r.iter().sum::<f64>() / n as f64;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let rep = classification_report(&severities(&r)?, &severities(&p)?, bootstrap_n, seed)?;
        rows.push(BmiRow { class, n, mean_ahi: Some(mean), sd_ahi: Some(sd), f1: Some(rep.f1) });
    }
    let corr = |stat: fn(&[f64], &[f64]) -> Result<f64>, arm: u64| -> Option<(f64, f64)> {
        let r = stat(bmi, reference).ok()?;
        let p = permutation_p_value(bmi, reference, stat, permutations, seed.wrapping_add(arm)).ok()?;
        Some((r, p))
    };
    Ok(BmiReport { rows, pearson: corr(pearson, 600), spearman: corr(spearman, 601) })
}

pub fn bmi_tables(r: &BmiReport) -> Result<(Table, Table)> {
    let opt = |v: Option<f64>| v.map(Cell::from).unwrap_or_else(|| "n/a".into());
    let mut classes = Table::new(&["bmi_class", "n", "mean_ahi", "sd_ahi", "f1", "f1_lower", "f1_upper"]);
    for row in &r.rows {
        classes.push(vec![
            row.class.name().into(),
            (row.n as f64).into(),
            opt(row.mean_ahi),
            opt(row.sd_ahi),
            opt(row.f1.map(|i| i.point)),
            opt(row.f1.map(|i| i.lower)),
            opt(row.f1.map(|i| i.upper)),
        ])?;
    }
    let mut corr = Table::new(&["statistic", "value", "p_value"]);
    for (name, v) in [("pearson", r.pearson), ("spearman", r.spearman)] {
        corr.push(vec![name.into(), opt(v.map(|x| x.0)), opt(v.map(|x| x.1))])?;
    }
    Ok((classes, corr))
}

/// BMI report over the pipeline's test predictions.
pub fn pipeline_bmi_report(prep: &Prepared, report: &PipelineReport, cfg: &ExperimentConfig) -> Result<BmiReport> {
    let bmi: Vec<f64> = prep.test.iter().map(|s| s.clinical.bmi).collect();
    bmi_stratified_report(&bmi, &report.test.reference, &report.test.predicted, cfg.bootstrap_n, cfg.bmi_permutations, cfg.seed)
}
