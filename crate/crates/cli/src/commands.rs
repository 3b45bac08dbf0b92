use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sleepcbm_core::concepts::compute_concepts;
use sleepcbm_core::experiments::{
    arm_table, bmi_tables, corruption_ablation, evaluate_predictions, fusion_baselines, importance_table,
    intervention_study, intervention_table, load_cohort, load_source, parse_predictions, pipeline_bmi_report,
    pipeline_importance, prediction_rows, prepare, proportion_sweep, run_pipeline, slam_outputs, split_cohort,
    sweep_table, train_slam_stage, write_cohort_eval, write_pipeline_report, CohortSource, ExperimentConfig, Prepared,
};
use sleepcbm_core::preprocess::{preprocess_pipeline, PreprocessConfig};
use sleepcbm_core::regressor::{fuse, fused_feature_names, train_regressor, RegressorModel};
use sleepcbm_core::signal::{
    load_study_bundle, read_table, save_table, Cell, SleepStudy, Table, CONCEPT_NAMES, N_CONCEPTS, SAMPLE_RATE_HZ,
};
use sleepcbm_core::slam::SlamModel;
use sleepcbm_core::synth::{generate_cohort, SynthConfig};
use sleepcbm_core::CoreError;
use thiserror::Error;

use crate::manifest::write_run_manifest;
use crate::{AblationKind, Cli, Command, SlamReuse, StudySource};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn is_validation(&self) -> bool {
        match self {
            CliError::Core(e) => e.is_validation(),
            CliError::Usage(_) | CliError::Json(_) => true,
            CliError::Io(_) => false,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_cohort(mut cfg: ExperimentConfig, cohort: &Option<PathBuf>) -> ExperimentConfig {
    if let Some(dir) = cohort {
        cfg.cohort = CohortSource::Path(dir.clone());
    }
    cfg
}

fn load_studies(src: &StudySource) -> CliResult<Vec<SleepStudy>> {
    match (&src.study, &src.cohort) {
        (Some(dir), _) => Ok(vec![load_study_bundle(dir)?]),
        (None, Some(dir)) => Ok(load_cohort(dir)?),
        (None, None) => Err(usage("give --study or --cohort")),
    }
}

fn concepts_table(ids: &[String], concepts: &[[f64; N_CONCEPTS]]) -> CliResult<Table> {
    let mut t = Table::new(&[&["id"][..], &CONCEPT_NAMES[..]].concat());
    for (id, c) in ids.iter().zip(concepts) {
        let mut row: Vec<Cell> = vec![id.as_str().into()];
        row.extend(c.iter().map(|&v| Cell::from(v)));
        t.push(row)?;
    }
    Ok(t)
}

fn read_concepts(path: &Path) -> CliResult<BTreeMap<String, [f64; N_CONCEPTS]>> {
    let t = read_table(path)?;
    let ids = t.texts("id")?;
    let columns: Vec<Vec<f64>> = CONCEPT_NAMES.iter().map(|n| t.numbers(n)).collect::<Result<_, _>>()?;
    Ok(ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, std::array::from_fn(|j| columns[j][i])))
        .collect())
}

fn history_table(model: &SlamModel) -> CliResult<Table> {
    let mut t = Table::new(&["epoch", "train_mae", "val_mae"]);
    for e in &model.history {
        t.push(vec![e.epoch.into(), e.train_mae.into(), e.val_mae.into()])?;
    }
    Ok(t)
}

fn save_json<T: serde::Serialize>(value: &T, path: &Path) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Trains a concept model (saved under `out/slam_model`) or loads the one
/// given for reuse.
fn slam_stage(prep: &Prepared, cfg: &ExperimentConfig, reuse: &SlamReuse, out: &Path) -> CliResult<SlamModel> {
    if let Some(dir) = &reuse.slam_model {
        let model = SlamModel::load(dir)?;
        if model.config.input_len != cfg.preprocess.target_len {
            return Err(usage(format!(
                "model input length {} differs from preprocess.target_len {}",
                model.config.input_len, cfg.preprocess.target_len
            )));
        }
        return Ok(model);
    }
    let model = train_slam_stage(prep, cfg, |e| {
        eprintln!("slam epoch {:>3}  train_mae {:.4}  val_mae {:.4}", e.epoch, e.train_mae, e.val_mae)
    })?;
    model.save(&out.join("slam_model"))?;
    save_table(&history_table(&model)?, &out.join("slam_history.csv"))?;
    Ok(model)
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let out = cli.out_dir.as_path();
    match &cli.command {
        Command::Synth { n_studies } => synth(cli, *n_studies, out),
        Command::Preprocess { source } => {
            let cfg = load_config(cli)?;
            for s in load_studies(source)? {
                let x = preprocess_pipeline(&s.signal, &cfg.preprocess)?;
                let mut t = Table::new(&["t_s", "value"]);
                for (i, v) in x.iter().enumerate() {
                    t.push(vec![(i as f64 / SAMPLE_RATE_HZ).into(), (*v).into()])?;
                }
                save_table(&t, &out.join("preprocessed").join(format!("{}.csv", s.id)))?;
            }
            write_run_manifest(out, "preprocess", cfg.seed, &cfg.preprocess)
        }
        Command::Oracle { source } => {
            let cfg = load_config(cli)?;
            let studies = load_studies(source)?;
            let concepts = studies
                .iter()
                .map(|s| Ok(compute_concepts(&s.events, &s.signal, s.total_sleep_time_h)?.to_array()))
                .collect::<CliResult<Vec<_>>>()?;
            let ids: Vec<String> = studies.iter().map(|s| s.id.clone()).collect();
            save_table(&concepts_table(&ids, &concepts)?, &out.join("concepts.csv"))?;
            write_run_manifest(out, "oracle", cfg.seed, &cfg)
        }
        Command::TrainSlam { cohort } => {
            let cfg = with_cohort(load_config(cli)?, cohort);
            let prep = prepare(&cfg)?;
            let mut model = slam_stage(&prep, &cfg, &SlamReuse { slam_model: None }, out)?;
            let s = slam_outputs(&mut model, &prep)?;
            let mut ids = Vec::new();
            let mut split = Table::new(&["id", "split"]);
            for (name, part) in [("train", &prep.train), ("val", &prep.val), ("test", &prep.test)] {
                for subject in part {
                    ids.push(subject.id.clone());
                    split.push(vec![subject.id.as_str().into(), name.into()])?;
                }
            }
            let concepts = [s.train, s.val, s.test].concat();
            save_table(&concepts_table(&ids, &concepts)?, &out.join("concepts.csv"))?;
            save_table(&split, &out.join("split.csv"))?;
            write_run_manifest(out, "train-slam", cfg.seed, &cfg)
        }
        Command::TrainReg { concepts, cohort } => train_reg(cli, concepts, cohort, out),
        Command::Predict { model, regressor, source } => predict(cli, model, regressor.as_deref(), source, out),
        Command::Evaluate { predictions } => {
            let cfg = load_config(cli)?;
            let (ids, reference, predicted) = parse_predictions(&read_table(predictions)?)?;
            let e = evaluate_predictions(ids, reference, predicted, cfg.bootstrap_n, cfg.seed)?;
            write_cohort_eval(&e, out)?;
            write_run_manifest(out, "evaluate", cfg.seed, &cfg)
        }
        Command::Run { slam } => {
            let cfg = load_config(cli)?;
            let prep = prepare(&cfg)?;
            let mut model = slam_stage(&prep, &cfg, slam, out)?;
            let outputs = slam_outputs(&mut model, &prep)?;
            let report = run_pipeline(&prep, &outputs, &cfg)?;
            write_pipeline_report(&report, out)?;
            save_json(&report.regressor, &out.join("regressor.json"))?;
            let imp = pipeline_importance(&prep, &outputs, &report.regressor, &cfg)?;
            save_table(&importance_table(&imp)?, &out.join("importance.csv"))?;
            let (classes, corr) = bmi_tables(&pipeline_bmi_report(&prep, &report, &cfg)?)?;
            save_table(&classes, &out.join("bmi_classes.csv"))?;
            save_table(&corr, &out.join("bmi_correlation.csv"))?;
            write_run_manifest(out, "run", cfg.seed, &cfg)
        }
        Command::Ablate { kind, slam } => ablate(cli, *kind, slam, out),
    }
}

fn synth(cli: &Cli, n_studies: Option<usize>, out: &Path) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(_) => match load_config(cli)?.cohort {
            CohortSource::Synth(s) => s,
            CohortSource::Path(_) => return Err(usage("the configured cohort is a directory, not a generator")),
        },
        None => SynthConfig::default(),
    };
    if let Some(n) = n_studies {
        cfg.n_studies = n;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    generate_cohort(&cfg, out)?;
    write_run_manifest(out, "synth", cfg.seed, &cfg)
}

/// Splits the cohort as the concept model did, fuses the listed concepts
/// with clinical records, and scores the test part.
fn train_reg(cli: &Cli, concepts: &Path, cohort: &Option<PathBuf>, out: &Path) -> CliResult<()> {
    let cfg = with_cohort(load_config(cli)?, cohort);
    let table = read_concepts(concepts)?;
    let studies = load_source(&cfg.cohort)?;
    let (train, val, test) = split_cohort(&studies, cfg.split, cfg.seed)?;
    let rows = |part: &[SleepStudy]| -> CliResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut x = Vec::with_capacity(part.len());
        for s in part {
            let c = table.get(&s.id).ok_or_else(|| usage(format!("concept file has no row for study '{}'", s.id)))?;
            x.push(fuse(c, &s.clinical));
        }
        Ok((x, part.iter().map(|s| s.reference_ahi).collect()))
    };
    let (xt, yt) = rows(&train)?;
    let (xv, yv) = rows(&val)?;
    let model = train_regressor(&xt, &yt, Some((&xv, &yv)), fused_feature_names(), &cfg.regressor)?;
    fs::create_dir_all(out)?;
    save_json(&model, &out.join("regressor.json"))?;
    let mut history = Table::new(&["epoch", "train_loss", "val_loss", "lr"]);
    for r in &model.history {
        history.push(vec![r.epoch.into(), r.train_loss.into(), r.val_loss.into(), r.lr.into()])?;
    }
    save_table(&history, &out.join("regressor_history.csv"))?;
    let (xs, ys) = rows(&test)?;
    let ids: Vec<String> = test.iter().map(|s| s.id.clone()).collect();
    save_table(&prediction_rows(&ids, &ys, &model.predict_ahi(&xs)?)?, &out.join("predictions.csv"))?;
    write_run_manifest(out, "train-reg", cfg.seed, &cfg)
}

fn predict(cli: &Cli, model_dir: &Path, regressor: Option<&Path>, source: &StudySource, out: &Path) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let mut model = SlamModel::load(model_dir)?;
    let pre = PreprocessConfig { target_len: model.config.input_len, ..cfg.preprocess.clone() };
    let studies = load_studies(source)?;
    let ids: Vec<String> = studies.iter().map(|s| s.id.clone()).collect();
    let inputs = studies.iter().map(|s| preprocess_pipeline(&s.signal, &pre)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let concepts = model.predict_batch(&refs)?;
    save_table(&concepts_table(&ids, &concepts)?, &out.join("concepts.csv"))?;
    // Saliency of an untrained model is allowed but flagged.
    save_json(&serde_json::json!({ "model_trained": model.trained }), &out.join("saliency_meta.json"))?;
    for (id, x) in ids.iter().zip(&inputs) {
        let mut t = Table::new(&["t_s", "saliency"]);
        for (i, v) in model.saliency(x)?.into_iter().enumerate() {
            t.push(vec![(i as f64 / SAMPLE_RATE_HZ).into(), v.into()])?;
        }
        let path = if source.study.is_some() {
            out.join("saliency.csv")
        } else {
            out.join("saliency").join(format!("{id}.csv"))
        };
        save_table(&t, &path)?;
    }
    if let Some(path) = regressor {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let reg: RegressorModel = serde_json::from_str(&text)?;
        let rows: Vec<Vec<f64>> = studies.iter().zip(&concepts).map(|(s, c)| fuse(c, &s.clinical)).collect();
        let reference: Vec<f64> = studies.iter().map(|s| s.reference_ahi).collect();
        save_table(&prediction_rows(&ids, &reference, &reg.predict_ahi(&rows)?)?, &out.join("predictions.csv"))?;
    }
    write_run_manifest(out, "predict", cfg.seed, &cfg)
}

fn ablate(cli: &Cli, kind: AblationKind, reuse: &SlamReuse, out: &Path) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let prep = prepare(&cfg)?;
    let mut model = slam_stage(&prep, &cfg, reuse, out)?;
    let slam = slam_outputs(&mut model, &prep)?;
    match kind {
        AblationKind::Corruption => {
            save_table(&arm_table("arm", &corruption_ablation(&prep, &slam, &cfg)?)?, &out.join("corruption.csv"))?
        }
        AblationKind::Sweep => save_table(&sweep_table(&proportion_sweep(&prep, &slam, &cfg)?)?, &out.join("sweep.csv"))?,
        AblationKind::Intervention => save_table(
            &intervention_table(&intervention_study(&prep, &slam, &cfg)?)?,
            &out.join("intervention.csv"),
        )?,
        AblationKind::Fusion => {
            let r = fusion_baselines(&prep, &slam, &cfg)?;
            save_table(&arm_table("method", &r.rows)?, &out.join("fusion.csv"))?;
            let mut parts = Table::new(&["id", "signal_only", "clinical_only", "decision_level"]);
            for (i, s) in prep.test.iter().enumerate() {
                parts.push(vec![
                    s.id.as_str().into(),
                    r.signal_only[i].into(),
                    r.clinical_only[i].into(),
                    r.decision_level[i].into(),
                ])?;
            }
            save_table(&parts, &out.join("fusion_components.csv"))?;
        }
        AblationKind::Importance => {
            let report = run_pipeline(&prep, &slam, &cfg)?;
            let imp = pipeline_importance(&prep, &slam, &report.regressor, &cfg)?;
            save_table(&importance_table(&imp)?, &out.join("importance.csv"))?;
        }
        AblationKind::Bmi => {
            let report = run_pipeline(&prep, &slam, &cfg)?;
            let (classes, corr) = bmi_tables(&pipeline_bmi_report(&prep, &report, &cfg)?)?;
            save_table(&classes, &out.join("bmi_classes.csv"))?;
            save_table(&corr, &out.join("bmi_correlation.csv"))?;
        }
    }
    write_run_manifest(out, &format!("ablate {}", kind.name()), cfg.seed, &cfg)
}
