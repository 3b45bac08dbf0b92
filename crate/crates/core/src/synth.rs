//! Synthetic sleep studies with known events.
//!
//! Each apnea or hypopnea imprints a dip on a flat baseline: a 10 s linear
//! descent to `desat_pct` below baseline, a plateau lasting the event's
//! `duration_s`, then exponential recovery (time constant 15 s, cut after
//! 60 s). Overlapping recoveries combine by taking the deepest dip.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::compute_concepts;
use crate::error::{config_err, CoreError, Result};
use crate::signal::{
    save_study_bundle, save_table, ClinicalFeatures, EventKind, Ethnicity, Gender, OximetrySignal, Race,
    RespiratoryEvent, SeverityClass, SleepStudy, Table,
};

pub const DESCENT_S: f64 = 10.0;
pub const RECOVERY_TAU_S: f64 = 15.0;
pub const RECOVERY_CUT_S: f64 = 60.0;
/// Minimum spacing between one event's plateau end and the next descent.
pub const MIN_GAP_S: usize = 10;
/// Events are placed after this lead-in so a detector baseline exists.
pub const LEAD_IN_S: usize = 120;
pub const TAIL_S: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_studies: usize,
    pub duration_s: usize,
    pub severity_mix: [f64; 4],
    /// Per-class range of the qualifying event rate (events per hour).
    pub event_rate_ranges: [[f64; 2]; 4],
    pub baseline_spo2_range: [f64; 2],
    pub noise_sd: f64,
    pub artifact_prob: f64,
    /// Severity-conditional BMI means when true, one shared mean otherwise.
    pub bmi_coupling: bool,
    pub age_range: [f64; 2],
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_studies: 100,
            duration_s: 25_200,
            severity_mix: [0.25; 4],
            event_rate_ranges: [[0.5, 4.5], [5.5, 14.5], [15.5, 29.5], [30.5, 40.0]],
            baseline_spo2_range: [93.0, 98.0],
            noise_sd: 0.3,
            artifact_prob: 0.2,
            bmi_coupling: true,
            age_range: [40.0, 85.0],
            id_prefix: "s".into(),
            seed: 42,
        }
    }
}

const BMI_MEANS: [f64; 4] = [25.0, 27.5, 29.0, 32.0];
const BMI_SD: f64 = 4.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.severity_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.severity_mix.iter().any(|&p| p < 0.0) {
            return Err(config_err(format!("severity_mix must be probabilities summing to 1, sum is {total}")));
        }
        let bounds = [(0.0, 5.0), (5.0, 15.0), (15.0, 30.0), (30.0, f64::INFINITY)];
        for (k, (r, (lo, hi))) in self.event_rate_ranges.iter().zip(bounds).enumerate() {
            let ok = r[0] >= lo && r[1] < hi && r[0] <= r[1];
            if !ok {
                return Err(config_err(format!(
                    "event_rate_ranges[{k}] = {r:?} is not inside [{lo}, {hi})"
                )));
            }
        }
        if self.duration_s < LEAD_IN_S + TAIL_S + 60 {
            return Err(config_err("duration_s is too short to hold any event"));
        }
        let [b0, b1] = self.baseline_spo2_range;
        if !(b0 <= b1 && b0 >= 60.0 && b1 <= 100.0) {
            return Err(config_err("baseline_spo2_range must lie in [60, 100]"));
        }
        if !(self.noise_sd >= 0.0) || !(0.0..=1.0).contains(&self.artifact_prob) {
            return Err(config_err("noise_sd must be >= 0 and artifact_prob in [0, 1]"));
        }
        if !(self.age_range[0] <= self.age_range[1]) {
            return Err(config_err("age_range is inverted"));
        }
        Ok(())
    }

    pub fn total_sleep_time_h(&self) -> f64 {
        self.duration_s as f64 / 3600.0
    }
}

/// Time span, in seconds, over which an event depresses the signal before
/// recovery: descent plus plateau.
pub fn imprint_span(e: &RespiratoryEvent) -> (f64, f64) {
    (e.start_s, e.start_s + DESCENT_S + e.duration_s)
}

/// Depth of an event's dip `t` seconds after its start.
pub fn dip_depth(e: &RespiratoryEvent, t: f64) -> f64 {
    let d = e.desat_pct;
    let plateau_end = DESCENT_S + e.duration_s;
    if t < 0.0 {
        0.0
    } else if t < DESCENT_S {
        d * t / DESCENT_S
    } else if t <= plateau_end {
        d
    } else if t <= plateau_end + RECOVERY_CUT_S {
        d * (-(t - plateau_end) / RECOVERY_TAU_S).exp()
    } else {
        0.0
    }
}

/// The noise-free signal implied by `events` on a flat baseline.
pub fn clean_signal(baseline: f64, events: &[RespiratoryEvent], duration_s: usize) -> Vec<f64> {
    let mut depth = vec![0.0f64; duration_s];
    for e in events.iter().filter(|e| e.kind.is_apnea() || e.kind == EventKind::Hypopnea) {
        let start = e.start_s.floor() as usize;
        let end = ((e.start_s + DESCENT_S + e.duration_s + RECOVERY_CUT_S).ceil() as usize).min(duration_s);
        for (t, slot) in depth.iter_mut().enumerate().take(end).skip(start) {
            *slot = slot.max(dip_depth(e, t as f64 - e.start_s));
        }
    }
    depth.iter().map(|d| baseline - d).collect()
}

/// A study together with generator-side ground truth.
#[derive(Clone, Debug)]
pub struct GeneratedStudy {
    pub study: SleepStudy,
    pub severity: SeverityClass,
    pub baseline: f64,
    pub clean: Vec<f64>,
}

fn study_rng(cfg: &SynthConfig, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    rng
}

fn pick_severity(rng: &mut impl Rng, mix: &[f64; 4]) -> SeverityClass {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return SeverityClass::ALL[k];
        }
    }
    // Rounding leaves u >= acc only at the top; take the last class with mass.
    let last = mix.iter().rposition(|&p| p > 0.0).unwrap_or(3);
    SeverityClass::ALL[last]
}

fn qualifying_event(rng: &mut impl Rng) -> RespiratoryEvent {
    let u: f64 = rng.random();
    let arousal = rng.random_bool(0.3);
    if u < 0.60 {
        let kind = if u < 0.45 { EventKind::ObstructiveApnea } else { EventKind::CentralApnea };
        RespiratoryEvent {
            kind,
            start_s: 0.0,
            duration_s: 0.0,
            flow_reduction_pct: 100.0,
            desat_pct: rng.random_range(2.5..12.0),
            arousal,
        }
    } else {
        RespiratoryEvent {
            kind: EventKind::Hypopnea,
            start_s: 0.0,
            duration_s: 0.0,
            flow_reduction_pct: rng.random_range(31.0..90.0),
            desat_pct: rng.random_range(4.0..9.0),
            arousal,
        }
    }
}

/// Hypopneas that do not count toward the primary index: either shallow
/// desaturation or too little flow reduction.
fn extra_event(rng: &mut impl Rng) -> RespiratoryEvent {
    let arousal = rng.random_bool(0.3);
    let (flow, desat) = if rng.random_bool(0.5) {
        (rng.random_range(31.0..90.0), rng.random_range(1.0..3.9))
    } else {
        (rng.random_range(10.0..30.0), rng.random_range(1.0..8.0))
    };
    RespiratoryEvent {
        kind: EventKind::Hypopnea,
        start_s: 0.0,
        duration_s: 0.0,
        flow_reduction_pct: flow,
        desat_pct: desat,
        arousal,
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn clinical(rng: &mut impl Rng, cfg: &SynthConfig, severity: SeverityClass) -> ClinicalFeatures {
    let normal = |rng: &mut ChaCha8Rng, m: f64, s: f64| Normal::new(m, s).expect("positive sd").sample(rng);
    let mut r = ChaCha8Rng::from_rng(rng);
    let bmi_mean = if cfg.bmi_coupling { BMI_MEANS[severity.index()] } else { 28.0 };
    let bmi = round2(normal(&mut r, bmi_mean, BMI_SD).clamp(16.0, 60.0));
    let gender = if r.random_bool(0.5) { Gender::Male } else { Gender::Female };
    let height_mean = if gender == Gender::Male { 176.0 } else { 162.0 };
    let height_cm = round2(normal(&mut r, height_mean, 7.0).clamp(140.0, 205.0));
    let weight_kg = round2(bmi * (height_cm / 100.0).powi(2));
    let age = round2(r.random_range(cfg.age_range[0]..=cfg.age_range[1]));
    let sbp = round2(normal(&mut r, 118.0 + 0.3 * (age - 40.0) + 0.5 * (bmi - 27.0), 14.0).clamp(85.0, 220.0));
    let dbp = round2(normal(&mut r, 74.0, 9.0).clamp(45.0, 130.0).min(sbp - 10.0));
    let hypertension = r.random_bool(if sbp >= 140.0 { 0.7 } else { 0.2 });
    let smoker = r.random_bool(0.15);
    let ethnicity = if r.random_bool(0.1) { Ethnicity::Hispanic } else { Ethnicity::NonHispanic };
    let u: f64 = r.random();
    let race = if u < 0.7 {
        Race::White
    } else if u < 0.9 {
        Race::Black
    } else {
        Race::Other
    };
    ClinicalFeatures { age, bmi, sbp, dbp, weight_kg, height_cm, smoker, hypertension, ethnicity, race, gender }
}

pub fn generate_study(cfg: &SynthConfig, index: usize) -> Result<GeneratedStudy> {
    cfg.validate()?;
    if index >= cfg.n_studies {
        return Err(config_err(format!("index {index} out of range for {} studies", cfg.n_studies)));
    }
    let mut rng = study_rng(cfg, index);
    let severity = pick_severity(&mut rng, &cfg.severity_mix);
    let tst = cfg.total_sleep_time_h();
    let [lo, hi] = cfg.event_rate_ranges[severity.index()];
    let (n_lo, n_hi) = ((lo * tst).ceil() as usize, (hi * tst).floor() as usize);
    if n_lo > n_hi {
        return Err(CoreError::Generation(format!(
            "no integer event count gives a rate in [{lo}, {hi}] over {tst} h"
        )));
    }
    let n_qual = rng.random_range(n_lo..=n_hi);
    let n_extra = (rng.random_range(0.15..0.35) * n_qual as f64).round() as usize;

    let mut events: Vec<RespiratoryEvent> = (0..n_qual).map(|_| qualifying_event(&mut rng)).collect();
    events.extend((0..n_extra).map(|_| extra_event(&mut rng)));
    events.shuffle(&mut rng);
    let durations: Vec<usize> = events.iter().map(|_| rng.random_range(10..=20)).collect();

    let footprint: usize = durations.iter().map(|d| DESCENT_S as usize + d + MIN_GAP_S).sum();
    let available = cfg.duration_s - LEAD_IN_S - TAIL_S;
    if footprint > available {
        return Err(CoreError::Generation(format!(
            "{} events need {footprint} s but only {available} s are available",
            events.len()
        )));
    }
    // Slack is shared out in jittered, roughly equal portions. Uniform
    // placement would cluster events and drag the trailing-median baseline
    // into the dips.
    let slack = (available - footprint) as f64;
    let weights: Vec<f64> = (0..=events.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let total_w: f64 = weights.iter().sum();
    let mut cursor = LEAD_IN_S;
    let mut acc = 0.0;
    for ((e, &d), w) in events.iter_mut().zip(&durations).zip(&weights) {
        acc += w;
        let off = (slack * acc / total_w).floor() as usize;
        e.start_s = (cursor + off) as f64;
        e.duration_s = d as f64;
        e.desat_pct = round2(e.desat_pct);
        e.flow_reduction_pct = round2(e.flow_reduction_pct);
        cursor += DESCENT_S as usize + d + MIN_GAP_S;
    }

    let baseline = round2(rng.random_range(cfg.baseline_spo2_range[0]..=cfg.baseline_spo2_range[1]));
    let clean = clean_signal(baseline, &events, cfg.duration_s);
    let noise = Normal::new(0.0, cfg.noise_sd.max(1e-300)).expect("finite sd");
    let mut values: Vec<f64> = clean
        .iter()
        .map(|&c| {
            let n = if cfg.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            round2((c + n).clamp(50.0, 100.0))
        })
        .collect();

    if rng.random_bool(cfg.artifact_prob) {
        let spans = rng.random_range(1..=3);
        for _ in 0..spans {
            let len = rng.random_range(30..=120);
            let start = rng.random_range(0..cfg.duration_s - len);
            values[start..start + len].fill(f64::NAN);
            events.push(RespiratoryEvent {
                kind: EventKind::Artifact,
                start_s: start as f64,
                duration_s: len as f64,
                flow_reduction_pct: 0.0,
                desat_pct: 0.0,
                arousal: false,
            });
        }
    }
    let signal = OximetrySignal::from_readings(&values);
    let clinical = clinical(&mut rng, cfg, severity);
    let concepts = compute_concepts(&events, &signal, tst)?;
    let study = SleepStudy {
        id: format!("{}{index:05}", cfg.id_prefix),
        signal,
        events,
        clinical,
        total_sleep_time_h: tst,
        reference_ahi: concepts.ahi_a0h4,
    };
    study.validate()?;
    Ok(GeneratedStudy { study, severity, baseline, clean })
}

/// All studies of a cohort, in index order.
pub fn generate_studies(cfg: &SynthConfig) -> Result<Vec<GeneratedStudy>> {
    (0..cfg.n_studies).map(|i| generate_study(cfg, i)).collect()
}

pub fn manifest_table(studies: &[GeneratedStudy]) -> Result<Table> {
    let mut t = Table::new(&["id", "severity", "reference_ahi", "bmi", "age"]);
    for g in studies {
        t.push(vec![
            g.study.id.clone().into(),
            g.severity.name().into(),
            g.study.reference_ahi.into(),
            g.study.clinical.bmi.into(),
            g.study.clinical.age.into(),
        ])?;
    }
    Ok(t)
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Writes one bundle directory per study plus `manifest.csv`.
pub fn generate_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<(Vec<GeneratedStudy>, Table)> {
    let studies = generate_studies(cfg)?;
    for g in &studies {
        save_study_bundle(&g.study, &out_dir.join(&g.study.id))?;
    }
    let manifest = manifest_table(&studies)?;
    save_table(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok((studies, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concepts::detect_desaturations;

    fn small(n: usize) -> SynthConfig {
        SynthConfig { n_studies: n, ..Default::default() }
    }

    #[test]
    fn normal_only_mix_stays_normal() {
        let cfg = SynthConfig { severity_mix: [1.0, 0.0, 0.0, 0.0], ..small(10) };
        for g in generate_studies(&cfg).unwrap() {
            assert!(g.study.reference_ahi < 5.0);
            assert_eq!(g.severity, SeverityClass::Normal);
        }
    }

    #[test]
    fn same_index_is_bit_identical() {
        let cfg = small(5);
        let a = generate_study(&cfg, 3).unwrap();
        let b = generate_study(&cfg, 3).unwrap();
        assert_eq!(a.study, b.study);
        assert_eq!(a.clean, b.clean);
        let c = generate_study(&SynthConfig { seed: 7, ..cfg }, 3).unwrap();
        assert_ne!(a.study.signal, c.study.signal);
    }

    #[test]
    fn severity_ranges_are_respected() {
        let cfg = small(40);
        for g in generate_studies(&cfg).unwrap() {
            assert_eq!(SeverityClass::from_ahi(g.study.reference_ahi).unwrap(), g.severity);
        }
    }

    #[test]
    fn events_do_not_overlap_and_fit() {
        let cfg = SynthConfig { severity_mix: [0.0, 0.0, 0.0, 1.0], ..small(5) };
        for g in generate_studies(&cfg).unwrap() {
            let mut spans: Vec<(f64, f64)> = g
                .study
                .events
                .iter()
                .filter(|e| e.kind != EventKind::Artifact)
                .map(imprint_span)
                .collect();
            spans.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in spans.windows(2) {
                assert!(w[0].1 + MIN_GAP_S as f64 <= w[1].0 + 1e-9);
            }
            assert!(spans.last().unwrap().1 <= (cfg.duration_s - TAIL_S) as f64);
            assert!(g.study.reference_ahi >= 30.0);
        }
    }

    #[test]
    fn infeasible_and_invalid_configs() {
        let cfg = SynthConfig {
            duration_s: 1800,
            event_rate_ranges: [[0.5, 4.5], [5.5, 14.5], [15.5, 29.5], [300.0, 400.0]],
            severity_mix: [0.0, 0.0, 0.0, 1.0],
            ..small(1)
        };
        assert!(matches!(generate_study(&cfg, 0), Err(CoreError::Generation(_))));
        let bad_mix = SynthConfig { severity_mix: [0.5, 0.5, 0.5, 0.0], ..small(1) };
        assert!(generate_study(&bad_mix, 0).is_err());
        let bad_range = SynthConfig { event_rate_ranges: [[0.5, 6.0], [5.5, 14.5], [15.5, 29.5], [30.5, 40.0]], ..small(1) };
        assert!(generate_study(&bad_range, 0).is_err());
        assert!(generate_study(&small(1), 1).is_err());
    }

    #[test]
    fn rate_arithmetic() {
        // 14 qualifying events over 7 h.
        let events: Vec<RespiratoryEvent> = (0..14)
            .map(|i| RespiratoryEvent {
                kind: EventKind::ObstructiveApnea,
                start_s: 200.0 + 60.0 * i as f64,
                duration_s: 15.0,
                flow_reduction_pct: 100.0,
                desat_pct: 5.0,
                arousal: false,
            })
            .collect();
        let sig = OximetrySignal::from_clean(clean_signal(96.0, &events, 25_200)).unwrap();
        assert_eq!(compute_concepts(&events, &sig, 7.0).unwrap().ahi_a0h4, 2.0);
    }

    #[test]
    fn dip_shape() {
        let e = RespiratoryEvent {
            kind: EventKind::Hypopnea,
            start_s: 100.0,
            duration_s: 20.0,
            flow_reduction_pct: 50.0,
            desat_pct: 6.0,
            arousal: false,
        };
        assert_eq!(dip_depth(&e, 5.0), 3.0);
        assert_eq!(dip_depth(&e, 25.0), 6.0);
        assert!((dip_depth(&e, 45.0) - 6.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(dip_depth(&e, 95.0), 0.0);
        let s = clean_signal(95.0, &[e], 300);
        assert_eq!(s[99], 95.0);
        assert_eq!(s[115], 89.0);
    }

    #[test]
    fn detector_recovers_imprinted_events() {
        let cfg = small(100);
        let (mut hit, mut total) = (0, 0);
        for g in generate_studies(&cfg).unwrap() {
            let sig = OximetrySignal::from_clean(g.clean.clone()).unwrap();
            let found = detect_desaturations(&sig, 3.0, 10.0).unwrap();
            for e in g.study.events.iter().filter(|e| e.kind != EventKind::Artifact && e.desat_pct >= 4.0) {
                let (a, b) = imprint_span(e);
                total += 1;
                if found.iter().any(|d| d.start_s < b && d.end_s() > a) {
                    hit += 1;
                }
            }
        }
        println!("recovered {hit}/{total}");
        assert!(hit as f64 >= 0.95 * total as f64, "{hit}/{total}");
    }

    #[test]
    fn cohort_writes_bundles_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_studies: 10, duration_s: 3600, ..Default::default() };
        let (studies, manifest) = generate_cohort(&cfg, dir.path()).unwrap();
        assert_eq!(studies.len(), 10);
        assert_eq!(manifest.rows.len(), 10);
        for g in &studies {
            let back = crate::signal::load_study_bundle(&dir.path().join(&g.study.id)).unwrap();
            assert_eq!(back, g.study);
        }
        let read = crate::signal::read_table(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read.columns, vec!["id", "severity", "reference_ahi", "bmi", "age"]);
    }
}
