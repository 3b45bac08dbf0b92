//! Domain types and study-bundle file formats.
//!
//! A study bundle is a directory:
//!
//! ```text
//! signal.csv     t_s,spo2            one row per second, empty cell = missing
//! events.json    [{kind, start_s, duration_s, flow_reduction_pct, desat_pct, arousal}]
//! clinical.json  {age, bmi, sbp, dbp, weight_kg, height_cm, smoker, hypertension, ethnicity, race, gender}
//! meta.json      {id, total_sleep_time_h, reference_ahi}
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, CoreError, Result};

pub const SAMPLE_RATE_HZ: f64 = 1.0;
/// Model input length in samples (seven hours at 1 Hz).
pub const TARGET_LEN: usize = 25_200;
/// Samples outside this range are flagged invalid on load.
pub const VALID_SPO2: (f64, f64) = (50.0, 100.0);

pub const SIGNAL_FILE: &str = "signal.csv";
pub const EVENTS_FILE: &str = "events.json";
pub const CLINICAL_FILE: &str = "clinical.json";
pub const META_FILE: &str = "meta.json";

/// 1 Hz SpO2 series with a validity mask. Invalid samples hold NaN.
#[derive(Clone, Debug)]
pub struct OximetrySignal {
    samples: Vec<f64>,
    valid: Vec<bool>,
}

impl OximetrySignal {
    pub fn new(samples: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if samples.len() != valid.len() {
            return Err(invalid(format!("{} samples but {} validity flags", samples.len(), valid.len())));
        }
        let samples = samples
            .into_iter()
            .zip(&valid)
            .map(|(v, &ok)| if ok { v } else { f64::NAN })
            .collect::<Vec<_>>();
        if samples.iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(invalid("a sample marked valid is not finite"));
        }
        Ok(OximetrySignal { samples, valid })
    }

    /// Applies the physiological range rule: values outside [50, 100] or
    /// non-finite are invalid.
    pub fn from_readings(values: &[f64]) -> Self {
        let valid: Vec<bool> = values.iter().map(|&v| is_physiological(v)).collect();
        let samples = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { f64::NAN }).collect();
        OximetrySignal { samples, valid }
    }

    /// All samples valid.
    pub fn from_clean(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / SAMPLE_RATE_HZ
    }
}

/// Equal when the masks agree and every valid sample is bit-identical.
impl PartialEq for OximetrySignal {
    fn eq(&self, other: &Self) -> bool {
        self.valid == other.valid
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .zip(&self.valid)
                .all(|((a, b), &ok)| !ok || a.to_bits() == b.to_bits())
    }
}

pub fn is_physiological(v: f64) -> bool {
    v.is_finite() && (VALID_SPO2.0..=VALID_SPO2.1).contains(&v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ObstructiveApnea,
    CentralApnea,
    Hypopnea,
    Desaturation,
    Artifact,
}

impl EventKind {
    pub fn is_apnea(self) -> bool {
        matches!(self, EventKind::ObstructiveApnea | EventKind::CentralApnea)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RespiratoryEvent {
    pub kind: EventKind,
    pub start_s: f64,
    pub duration_s: f64,
    pub flow_reduction_pct: f64,
    pub desat_pct: f64,
    pub arousal: bool,
}

impl RespiratoryEvent {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn validate(&self, recording_s: f64) -> Result<()> {
        let finite = [self.start_s, self.duration_s, self.flow_reduction_pct, self.desat_pct]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("event has non-finite fields"));
        }
        if self.start_s < 0.0 || self.duration_s <= 0.0 || self.end_s() > recording_s + 1e-9 {
            return Err(invalid(format!(
                "event [{}, {}) outside recording of {recording_s} s",
                self.start_s,
                self.end_s()
            )));
        }
        if !(0.0..=100.0).contains(&self.flow_reduction_pct) {
            return Err(invalid(format!("flow_reduction_pct {} outside [0, 100]", self.flow_reduction_pct)));
        }
        if self.desat_pct < 0.0 {
            return Err(invalid(format!("negative desat_pct {}", self.desat_pct)));
        }
        Ok(())
    }
}

/// The ten concept metrics in fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub ahi_a0h4: f64,
    pub ahi_a0h4a: f64,
    pub ahi_c0h3: f64,
    pub ahi_c0h4: f64,
    pub avgsat: f64,
    pub minsat: f64,
    pub rdi0p: f64,
    pub rdi2p: f64,
    pub rdi3p: f64,
    pub rdi4p: f64,
}

pub const N_CONCEPTS: usize = 10;

pub const CONCEPT_NAMES: [&str; N_CONCEPTS] = [
    "ahi_a0h4", "ahi_a0h4a", "ahi_c0h3", "ahi_c0h4", "avgsat", "minsat", "rdi0p", "rdi2p", "rdi3p", "rdi4p",
];

/// Indices of the per-hour rate fields.
pub const RATE_CONCEPTS: [usize; 8] = [0, 1, 2, 3, 6, 7, 8, 9];
/// Indices of the saturation fields.
pub const SATURATION_CONCEPTS: [usize; 2] = [4, 5];

impl ConceptVector {
    pub fn to_array(&self) -> [f64; N_CONCEPTS] {
        [
            self.ahi_a0h4,
            self.ahi_a0h4a,
            self.ahi_c0h3,
            self.ahi_c0h4,
            self.avgsat,
            self.minsat,
            self.rdi0p,
            self.rdi2p,
            self.rdi3p,
            self.rdi4p,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != N_CONCEPTS {
            return Err(invalid(format!("concept vector needs {N_CONCEPTS} values, got {}", v.len())));
        }
        Ok(ConceptVector {
            ahi_a0h4: v[0],
            ahi_a0h4a: v[1],
            ahi_c0h3: v[2],
            ahi_c0h4: v[3],
            avgsat: v[4],
            minsat: v[5],
            rdi0p: v[6],
            rdi2p: v[7],
            rdi3p: v[8],
            rdi4p: v[9],
        })
    }

    /// Rates non-negative, saturations in [0, 100], minsat <= avgsat and
    /// the rdi chain non-increasing.
    pub fn check_invariants(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite concept"));
        }
        if RATE_CONCEPTS.iter().any(|&i| a[i] < 0.0) {
            return Err(invalid("negative rate concept"));
        }
        if SATURATION_CONCEPTS.iter().any(|&i| !(0.0..=100.0).contains(&a[i])) {
            return Err(invalid("saturation outside [0, 100]"));
        }
        if self.minsat > self.avgsat {
            return Err(invalid("minsat exceeds avgsat"));
        }
        if !(self.rdi0p >= self.rdi2p && self.rdi2p >= self.rdi3p && self.rdi3p >= self.rdi4p) {
            return Err(invalid("rdi sequence is not non-increasing"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ethnicity {
    NonHispanic,
    Hispanic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Race {
    White,
    Black,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalFeatures {
    pub age: f64,
    pub bmi: f64,
    pub sbp: f64,
    pub dbp: f64,
    pub weight_kg: f64,
    pub height_cm: f64,
    pub smoker: bool,
    pub hypertension: bool,
    pub ethnicity: Ethnicity,
    pub race: Race,
    pub gender: Gender,
}

pub const CLINICAL_FIELDS: [&str; 11] = [
    "age",
    "bmi",
    "sbp",
    "dbp",
    "weight_kg",
    "height_cm",
    "smoker",
    "hypertension",
    "ethnicity",
    "race",
    "gender",
];

impl ClinicalFeatures {
    pub fn validate(&self) -> Result<()> {
        let nums = [self.age, self.bmi, self.sbp, self.dbp, self.weight_kg, self.height_cm];
        if nums.iter().any(|v| !v.is_finite()) {
            return Err(invalid("clinical numeric field is not finite"));
        }
        if self.bmi <= 0.0 {
            return Err(invalid("bmi must be positive"));
        }
        Ok(())
    }

    /// Parses a JSON object, listing every missing required field at once.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| invalid("clinical record must be a JSON object"))?;
        let missing: Vec<String> = CLINICAL_FIELDS
            .iter()
            .filter(|f| obj.get(**f).is_none_or(Value::is_null))
            .map(|f| f.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(CoreError::MissingFields(missing));
        }
        let c: ClinicalFeatures = serde_json::from_value(value.clone())?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityClass {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 4] =
        [SeverityClass::Normal, SeverityClass::Mild, SeverityClass::Moderate, SeverityClass::Severe];

    /// Normal < 5 <= Mild < 15 <= Moderate < 30 <= Severe.
    pub fn from_ahi(ahi: f64) -> Result<Self> {
        if ahi.is_nan() || ahi < 0.0 {
            return Err(invalid(format!("AHI must be non-negative, got {ahi}")));
        }
        Ok(if ahi < 5.0 {
            SeverityClass::Normal
        } else if ahi < 15.0 {
            SeverityClass::Mild
        } else if ahi < 30.0 {
            SeverityClass::Moderate
        } else {
            SeverityClass::Severe
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityClass::Normal => "normal",
            SeverityClass::Mild => "mild",
            SeverityClass::Moderate => "moderate",
            SeverityClass::Severe => "severe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SeverityClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid(format!("unknown severity '{s}'")))
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SleepStudy {
    pub id: String,
    pub signal: OximetrySignal,
    pub events: Vec<RespiratoryEvent>,
    pub clinical: ClinicalFeatures,
    pub total_sleep_time_h: f64,
    pub reference_ahi: f64,
}

impl SleepStudy {
    pub fn validate(&self) -> Result<()> {
        if self.signal.is_empty() {
            return Err(invalid(format!("study {}: empty signal", self.id)));
        }
        if !(self.total_sleep_time_h > 0.0) || self.total_sleep_time_h * 3600.0 > self.signal.duration_s() + 1e-9 {
            return Err(invalid(format!(
                "study {}: total sleep time {} h is not within the recording",
                self.id, self.total_sleep_time_h
            )));
        }
        if !(self.reference_ahi >= 0.0) {
            return Err(invalid(format!("study {}: reference AHI must be non-negative", self.id)));
        }
        for e in &self.events {
            e.validate(self.signal.duration_s())?;
        }
        self.clinical.validate()
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    id: String,
    total_sleep_time_h: f64,
    reference_ahi: f64,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CoreError::Load { path: path.to_path_buf(), source })
}

fn json_error(file: &str, e: serde_json::Error) -> CoreError {
    CoreError::Parse { file: file.into(), line: e.line(), field: String::new(), message: e.to_string() }
}

/// Reads `t_s,spo2`. Empty, non-numeric or out-of-range readings become
/// invalid samples; structural problems are parse errors.
pub fn read_signal_csv(path: &Path) -> Result<OximetrySignal> {
    let text = read_file(path)?;
    let file = SIGNAL_FILE;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| CoreError::Parse {
        file: file.into(),
        line: 1,
        field: "header".into(),
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["t_s", "spo2"] {
        return Err(CoreError::Parse {
            file: file.into(),
            line: 1,
            field: "header".into(),
            message: format!("expected 't_s,spo2', found '{}'", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CoreError::Parse {
            file: file.into(),
            line,
            field: "row".into(),
            message: e.to_string(),
        })?;
        let t: f64 = rec[0].trim().parse().map_err(|_| CoreError::Parse {
            file: file.into(),
            line,
            field: "t_s".into(),
            message: format!("'{}' is not a number", &rec[0]),
        })?;
        if t != i as f64 {
            return Err(CoreError::Parse {
                file: file.into(),
                line,
                field: "t_s".into(),
                message: format!("expected {i} at 1 Hz, found {t}"),
            });
        }
        values.push(rec[1].trim().parse::<f64>().unwrap_or(f64::NAN));
    }
    Ok(OximetrySignal::from_readings(&values))
}

pub fn write_signal_csv(signal: &OximetrySignal, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(signal.len() * 10 + 8);
    out.push_str("t_s,spo2\n");
    for (i, (&v, &ok)) in signal.samples().iter().zip(signal.validity()).enumerate() {
        out.push_str(&i.to_string());
        out.push(',');
        if ok {
            out.push_str(&format_number(v));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_study_bundle(dir: &Path) -> Result<SleepStudy> {
    let signal = read_signal_csv(&dir.join(SIGNAL_FILE))?;
    let events: Vec<RespiratoryEvent> =
        serde_json::from_str(&read_file(&dir.join(EVENTS_FILE))?).map_err(|e| json_error(EVENTS_FILE, e))?;
    let clinical_json: Value =
        serde_json::from_str(&read_file(&dir.join(CLINICAL_FILE))?).map_err(|e| json_error(CLINICAL_FILE, e))?;
    let clinical = ClinicalFeatures::from_json(&clinical_json)?;
    let meta: Meta = serde_json::from_str(&read_file(&dir.join(META_FILE))?).map_err(|e| json_error(META_FILE, e))?;
    let study = SleepStudy {
        id: meta.id,
        signal,
        events,
        clinical,
        total_sleep_time_h: meta.total_sleep_time_h,
        reference_ahi: meta.reference_ahi,
    };
    study.validate()?;
    Ok(study)
}

pub fn save_study_bundle(study: &SleepStudy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_signal_csv(&study.signal, &dir.join(SIGNAL_FILE))?;
    fs::write(dir.join(EVENTS_FILE), serde_json::to_string_pretty(&study.events)?)?;
    fs::write(dir.join(CLINICAL_FILE), serde_json::to_string_pretty(&study.clinical)?)?;
    let meta = Meta {
        id: study.id.clone(),
        total_sleep_time_h: study.total_sleep_time_h,
        reference_ahi: study.reference_ahi,
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Shortest representation that parses back to the same f64.
pub fn format_number(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) => f.write_str(&format_number(*v)),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

/// Rows sharing one header.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Table { columns: columns.iter().map(|c| c.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(invalid(format!("row has {} cells, header has {}", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Numeric column by name.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name).ok_or_else(|| invalid(format!("no column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| match &r[j] {
                Cell::Num(v) => Ok(*v),
                Cell::Text(s) => s.parse().map_err(|_| invalid(format!("'{s}' in column '{name}' is not numeric"))),
            })
            .collect()
    }

    pub fn texts(&self, name: &str) -> Result<Vec<String>> {
        let j = self.column_index(name).ok_or_else(|| invalid(format!("no column '{name}'")))?;
        Ok(self.rows.iter().map(|r| r[j].to_string()).collect())
    }
}

/// Writes a header row then one line per record.
pub fn save_table(table: &Table, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|c| c.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`save_table`]; cells that parse as numbers
/// become [`Cell::Num`].
pub fn read_table(path: &Path) -> Result<Table> {
    let text = read_file(path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut table = Table { columns, rows: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) => Cell::Num(v),
                Err(_) => Cell::Text(s.to_string()),
            })
            .collect();
        table.push(row)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn clinical() -> ClinicalFeatures {
        ClinicalFeatures {
            age: 61.0,
            bmi: 28.4,
            sbp: 131.0,
            dbp: 79.0,
            weight_kg: 84.0,
            height_cm: 172.0,
            smoker: false,
            hypertension: true,
            ethnicity: Ethnicity::NonHispanic,
            race: Race::Black,
            gender: Gender::Female,
        }
    }

    fn study(values: Vec<f64>) -> SleepStudy {
        let n = values.len() as f64;
        SleepStudy {
            id: "s0".into(),
            signal: OximetrySignal::from_readings(&values),
            events: vec![RespiratoryEvent {
                kind: EventKind::Hypopnea,
                start_s: 10.0,
                duration_s: 12.5,
                flow_reduction_pct: 40.0,
                desat_pct: 4.2,
                arousal: true,
            }],
            clinical: clinical(),
            total_sleep_time_h: n / 3600.0,
            reference_ahi: 0.0,
        }
    }

    #[test]
    fn clean_bundle_loads_all_valid() {
        let dir = tempfile::tempdir().unwrap();
        let s = study(vec![96.0; TARGET_LEN]);
        save_study_bundle(&s, dir.path()).unwrap();
        let back = load_study_bundle(dir.path()).unwrap();
        assert_eq!(back.signal.len(), TARGET_LEN);
        assert!(back.signal.all_valid());
        assert_eq!(back, s);
    }

    #[test]
    fn out_of_range_sample_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut csv_text = String::from("t_s,spo2\n");
        for i in 0..20 {
            let v = if i == 7 { "250" } else if i == 9 { "abc" } else if i == 11 { "" } else { "95.5" };
            csv_text.push_str(&format!("{i},{v}\n"));
        }
        let p = dir.path().join(SIGNAL_FILE);
        fs::write(&p, csv_text).unwrap();
        let sig = read_signal_csv(&p).unwrap();
        assert!(!sig.is_valid(7));
        assert!(!sig.is_valid(9));
        assert!(!sig.is_valid(11));
        assert_eq!(sig.valid_count(), 17);
    }

    #[test]
    fn bad_header_and_bad_time_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SIGNAL_FILE);
        fs::write(&p, "time,spo2\n0,95\n").unwrap();
        assert!(matches!(read_signal_csv(&p), Err(CoreError::Parse { line: 1, .. })));
        fs::write(&p, "t_s,spo2\n0,95\n2,95\n").unwrap();
        match read_signal_csv(&p) {
            Err(CoreError::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "t_s");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_bmi_is_rejected_by_name() {
        let mut v = serde_json::to_value(clinical()).unwrap();
        v.as_object_mut().unwrap().remove("bmi");
        match ClinicalFeatures::from_json(&v) {
            Err(CoreError::MissingFields(f)) => assert_eq!(f, vec!["bmi".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(CoreError::MissingFields(vec!["bmi".into()]).to_string().contains("bmi"));
    }

    #[test]
    fn unknown_enum_is_rejected() {
        let mut v = serde_json::to_value(clinical()).unwrap();
        v["race"] = Value::String("martian".into());
        assert!(ClinicalFeatures::from_json(&v).is_err());
    }

    #[test]
    fn missing_file_error_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_study_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains(SIGNAL_FILE), "{err}");
    }

    #[test]
    fn round_trip_with_invalid_samples() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals: Vec<f64> = (0..500).map(|i| 90.0 + (i % 7) as f64 * 1.13).collect();
        vals[3] = 30.0;
        vals[100] = f64::NAN;
        let s = study(vals);
        save_study_bundle(&s, dir.path()).unwrap();
        let a = load_study_bundle(dir.path()).unwrap();
        save_study_bundle(&a, dir.path()).unwrap();
        let b = load_study_bundle(dir.path()).unwrap();
        assert_eq!(a, s);
        assert_eq!(b, a);
    }

    #[test]
    fn table_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![1.0.into(), 2.0.into()]).unwrap();
        save_table(&t, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n1,2\n");

        save_table(&Table::new(&["a", "b"]), &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n");

        let mut t = Table::new(&["x"]);
        t.push(vec![0.1.into()]).unwrap();
        save_table(&t, &p).unwrap();
        assert_eq!(read_table(&p).unwrap().numbers("x").unwrap(), vec![0.1]);
        assert!(t.push(vec![]).is_err());
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.0, -0.0, 1.0, 0.1, 1.0 / 3.0, 1e-300, 1e300, -2.5e-7, 123456.789, 95.37] {
            let s = format_number(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn severity_boundaries() {
        use SeverityClass::*;
        assert_eq!(SeverityClass::from_ahi(4.999).unwrap(), Normal);
        assert_eq!(SeverityClass::from_ahi(5.0).unwrap(), Mild);
        assert_eq!(SeverityClass::from_ahi(15.0).unwrap(), Moderate);
        assert_eq!(SeverityClass::from_ahi(30.0).unwrap(), Severe);
        assert_eq!(SeverityClass::from_ahi(0.0).unwrap(), Normal);
        assert!(SeverityClass::from_ahi(-0.1).is_err());
    }
}
