//! Patient data model, JSONL cohort files and stratified splitting.
//!
//! A cohort file is UTF-8 JSONL. Line 1 is a header object
//! `{format_version, schema, provenance, seed}`; each following line is one
//! [`PatientRecord`]. Optional fields are omitted when absent.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Value stored in masked-off vitals entries.
pub const MASK_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub cardinality: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub numeric: Vec<String>,
    pub categorical: Vec<CategoricalFeature>,
    pub vital_channels: Vec<String>,
    pub image_dim: usize,
}

impl Schema {
    pub fn n_static(&self) -> usize {
        self.numeric.len() + self.categorical.len()
    }

    /// Names of all static features, numeric first.
    pub fn static_names(&self) -> Vec<String> {
        self.numeric
            .iter()
            .cloned()
            .chain(self.categorical.iter().map(|c| c.name.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticVector {
    pub numeric: Vec<f64>,
    pub categorical: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsSeries {
    /// `T x F` row-major by hour.
    #[serde(deserialize_with = "lenient_matrix")]
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    /// Hour of the first step relative to admission.
    pub t0: f64,
}

impl VitalsSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn hour(&self, step: usize) -> f64 {
        self.t0 + step as f64
    }

    /// Keep only steps whose hour is strictly below `cutoff`.
    pub fn truncate_before(&mut self, cutoff: f64) {
        let keep = (0..self.len()).take_while(|&t| self.hour(t) < cutoff).count();
        self.values.truncate(keep);
        self.mask.truncate(keep);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteDoc {
    pub tokens: Vec<String>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageFeatureVector(#[serde(deserialize_with = "lenient_vec")] pub Vec<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms, non_camel_case_types)]
pub enum AntibioticClass {
    VANC,
    PIP_TAZO,
    MEROPENEM,
    CEFEPIME,
}

impl AntibioticClass {
    pub const ALL: [AntibioticClass; 4] = [
        AntibioticClass::VANC,
        AntibioticClass::PIP_TAZO,
        AntibioticClass::MEROPENEM,
        AntibioticClass::CEFEPIME,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AntibioticClass::VANC => "VANC",
            AntibioticClass::PIP_TAZO => "PIP_TAZO",
            AntibioticClass::MEROPENEM => "MEROPENEM",
            AntibioticClass::CEFEPIME => "CEFEPIME",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sepsis_onset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mortality: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antibiotic_class: Option<AntibioticClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antibiotic_hour: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub static_vector: StaticVector,
    pub vitals_series: VitalsSeries,
    pub notes: Vec<NoteDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_feature_vector: Option<ImageFeatureVector>,
    pub labels: Labels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Mortality,
    Antibiotic,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Detection | Task::Mortality => 2,
            Task::Antibiotic => 4,
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            Task::Detection => vec!["Non-Sepsis", "Sepsis"],
            Task::Mortality => vec!["Survivor", "Mortality"],
            Task::Antibiotic => AntibioticClass::ALL.iter().map(|c| c.name()).collect(),
        }
    }

    /// Class id of `record` for this task, `None` when the label is absent.
    pub fn label(self, record: &PatientRecord) -> Option<usize> {
        match self {
            Task::Detection => Some(record.labels.sepsis_onset.is_some() as usize),
            Task::Mortality => record.labels.mortality.map(|m| m as usize),
            Task::Antibiotic => record.labels.antibiotic_class.map(AntibioticClass::index),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Mortality => "mortality",
            Task::Antibiotic => "antibiotic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(Task::Detection),
            "mortality" => Ok(Task::Mortality),
            "antibiotic" | "abx" => Ok(Task::Antibiotic),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: Schema,
    pub records: Vec<PatientRecord>,
    pub provenance: String,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    schema: Schema,
    provenance: String,
    seed: u64,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy of this cohort holding only the records at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    pub fn labels(&self, task: Task) -> Result<Vec<usize>> {
        self.records
            .iter()
            .map(|r| {
                task.label(r).ok_or_else(|| Error::Schema {
                    id: r.id.clone(),
                    message: format!("missing {} label", task.name()),
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            validate_record(&self.schema, r)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Schema {
                    id: r.id.clone(),
                    message: "duplicate id".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn validate_record(schema: &Schema, r: &PatientRecord) -> Result<()> {
    let fail = |message: String| Error::Schema {
        id: r.id.clone(),
        message,
    };
    let sv = &r.static_vector;
    if sv.numeric.len() != schema.numeric.len() {
        return Err(fail(format!(
            "expected {} numeric static features, got {}",
            schema.numeric.len(),
            sv.numeric.len()
        )));
    }
    for (v, name) in sv.numeric.iter().zip(&schema.numeric) {
        if !v.is_finite() {
            return Err(fail(format!("non-finite static feature '{name}'")));
        }
    }
    if sv.categorical.len() != schema.categorical.len() {
        return Err(fail(format!(
            "expected {} categorical static features, got {}",
            schema.categorical.len(),
            sv.categorical.len()
        )));
    }
    for (&code, feat) in sv.categorical.iter().zip(&schema.categorical) {
        if code >= feat.cardinality {
            return Err(fail(format!(
                "categorical '{}' code {code} outside cardinality {}",
                feat.name, feat.cardinality
            )));
        }
    }

    let vs = &r.vitals_series;
    if vs.values.is_empty() {
        return Err(fail("empty vitals series".into()));
    }
    if !vs.t0.is_finite() {
        return Err(fail("non-finite vitals t0".into()));
    }
    if vs.mask.len() != vs.values.len() {
        return Err(fail("vitals mask length differs from values".into()));
    }
    let channels = &schema.vital_channels;
    for (t, (row, mrow)) in vs.values.iter().zip(&vs.mask).enumerate() {
        if row.len() != channels.len() || mrow.len() != channels.len() {
            return Err(fail(format!("vitals step {t} has wrong channel count")));
        }
        for (c, (&v, &present)) in row.iter().zip(mrow).enumerate() {
            if present && !v.is_finite() {
                return Err(fail(format!(
                    "non-finite vital value in channel '{}' at step {t}",
                    channels[c]
                )));
            }
            if !present && v != MASK_SENTINEL {
                return Err(fail(format!(
                    "masked vital in channel '{}' at step {t} does not carry the sentinel",
                    channels[c]
                )));
            }
        }
    }

    for note in &r.notes {
        if !note.timestamp.is_finite() {
            return Err(fail("non-finite note timestamp".into()));
        }
    }
    if let Some(img) = &r.image_feature_vector {
        if img.0.len() != schema.image_dim {
            return Err(fail(format!(
                "image feature length {} differs from schema {}",
                img.0.len(),
                schema.image_dim
            )));
        }
        if img.0.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite image feature".into()));
        }
    }
    let l = &r.labels;
    if let Some(onset) = l.sepsis_onset {
        if !(onset.is_finite() && onset >= 0.0) {
            return Err(fail(format!("invalid sepsis onset {onset}")));
        }
    }
    if l.antibiotic_class.is_some() != l.antibiotic_hour.is_some() {
        return Err(fail(
            "antibiotic hour must be present iff antibiotic class is".into(),
        ));
    }
    if let Some(h) = l.antibiotic_hour {
        if !h.is_finite() {
            return Err(fail("non-finite antibiotic hour".into()));
        }
    }
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    cohort.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        schema: cohort.schema.clone(),
        provenance: cohort.provenance.clone(),
        seed: cohort.seed,
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for r in &cohort.records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or(Error::Malformed {
            line: 1,
            message: "missing header".into(),
        })?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Malformed {
            line: 1,
            message: format!("unsupported format_version {}", header.format_version),
        });
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            line: i + 2,
            message: e.to_string(),
        })?;
        records.push(rec);
    }
    let cohort = Cohort {
        schema: header.schema,
        records,
        provenance: header.provenance,
        seed: header.seed,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Assign each item to one of `fractions.len()` parts so that every class is
/// split proportionally (largest-remainder rounding, so each per-class count
/// is within one record of exact proportionality).
pub fn stratified_assignment(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<usize>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::InvalidParam("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut assignment = vec![0usize; labels.len()];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let mut rng = rng::stream(seed, rng::streams::SPLIT ^ (class as u64 + 1));
        rng::shuffle(&mut rng, &mut members);
        let counts = largest_remainder(members.len(), fractions);
        let mut start = 0;
        for (part, &c) in counts.iter().enumerate() {
            for &i in &members[start..start + c] {
                assignment[i] = part;
            }
            start += c;
        }
    }
    Ok(assignment)
}

fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &part in order.iter().take(n.saturating_sub(assigned)) {
        counts[part] += 1;
    }
    counts
}

/// Stratified train/validation/test split. Records keep their original order
/// within each part.
pub fn split_cohort(
    cohort: &Cohort,
    fractions: (f64, f64, f64),
    stratify_on: Task,
    seed: u64,
) -> Result<(Cohort, Cohort, Cohort)> {
    let labels = cohort.labels(stratify_on)?;
    let fr = [fractions.0, fractions.1, fractions.2];
    let assignment = stratified_assignment(&labels, &fr, seed)?;
    let part = |p: usize| {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| assignment[i] == p).collect();
        cohort.subset(&idx)
    };
    Ok((part(0), part(1), part(2)))
}

fn parse_lenient(v: Lenient) -> f64 {
    match v {
        Lenient::Num(x) => x,
        Lenient::Null(()) => f64::NAN,
        Lenient::Text(s) => match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => f64::INFINITY,
            "-inf" | "-infinity" => f64::NEG_INFINITY,
            _ => f64::NAN,
        },
    }
}

/// Numbers as written by other tools may use `null` or `"NaN"` for
/// non-finite values; these are accepted here and rejected by validation with
/// a precise location instead of a bare parse error.
#[derive(Deserialize)]
#[serde(untagged)]
enum Lenient {
    Num(f64),
    Null(()),
    Text(String),
}

fn lenient_matrix<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
    let raw: Vec<Vec<Lenient>> = Vec::deserialize(d)?;
    Ok(raw
        .into_iter()
        .map(|row| row.into_iter().map(parse_lenient).collect())
        .collect())
}

fn lenient_vec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw: Vec<Lenient> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(parse_lenient).collect())
}
