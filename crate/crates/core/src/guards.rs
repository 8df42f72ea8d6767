//! Leakage guards: temporal firewall, lexical drug masking and the
//! pre-onset observation window.

use std::collections::BTreeSet;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, NoteDoc, PatientRecord, Task};
use crate::error::{Error, Result};
use crate::rng;
use crate::synth::vocab;

pub const MASK_TOKEN: &str = vocab::MASK_TOKEN;
pub const DEFAULT_BUFFER_HOURS: f64 = 4.0;

/// A set of lowercase terms matched against whole, case-folded tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub name: String,
    terms: BTreeSet<String>,
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(name: &str, terms: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for t in terms {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParam(format!(
                    "lexicon {name}: term '{t}' must be a single non-empty token"
                )));
            }
            if t.to_lowercase() != t {
                return Err(Error::InvalidParam(format!("lexicon {name}: term '{t}' is not lowercase")));
            }
            if !set.insert(t.to_string()) {
                return Err(Error::InvalidParam(format!("lexicon {name}: duplicate term '{t}'")));
            }
        }
        Ok(Lexicon {
            name: name.to_string(),
            terms: set,
        })
    }

    pub fn empty(name: &str) -> Self {
        Lexicon {
            name: name.to_string(),
            terms: BTreeSet::new(),
        }
    }

    /// Parse a lexicon file: one term per line, `#` starts a comment.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let terms = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        Self::new(name, terms)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&name, &text).map_err(|e| e.context(format!("lexicon {}", path.display())))
    }

    /// Drug names the generator can emit.
    pub fn default_drugs() -> Self {
        Self::new("drug", vocab::drug_lexicon_terms()).expect("built-in lexicon is valid")
    }

    /// Organism names the generator can emit.
    pub fn default_pathogens() -> Self {
        Self::new("pathogen", vocab::pathogen_lexicon_terms()).expect("built-in lexicon is valid")
    }

    pub fn contains(&self, token: &str) -> bool {
        self.terms.contains(&token.to_lowercase())
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// A drug lexicon and a pathogen lexicon checked for overlap once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    drug: Lexicon,
    pathogen: Lexicon,
}

impl Lexicons {
    pub fn new(drug: Lexicon, pathogen: Lexicon) -> Result<Self> {
        if let Some(t) = drug.terms.intersection(&pathogen.terms).next() {
            return Err(Error::InvalidParam(format!(
                "ambiguous lexicon: '{t}' is in both {} and {}",
                drug.name, pathogen.name
            )));
        }
        Ok(Lexicons { drug, pathogen })
    }

    pub fn drug(&self) -> &Lexicon {
        &self.drug
    }

    pub fn pathogen(&self) -> &Lexicon {
        &self.pathogen
    }
}

impl Default for Lexicons {
    fn default() -> Self {
        Lexicons::new(Lexicon::default_drugs(), Lexicon::default_pathogens())
            .expect("built-in lexicons are disjoint")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardAudit {
    pub notes_purged: usize,
    pub tokens_masked: usize,
    pub records_touched: usize,
}

impl Add for GuardAudit {
    type Output = GuardAudit;
    fn add(self, o: GuardAudit) -> GuardAudit {
        GuardAudit {
            notes_purged: self.notes_purged + o.notes_purged,
            tokens_masked: self.tokens_masked + o.tokens_masked,
            records_touched: self.records_touched + o.records_touched,
        }
    }
}

impl AddAssign for GuardAudit {
    fn add_assign(&mut self, o: GuardAudit) {
        *self = *self + o;
    }
}

/// Drop every note timestamped at or after `cutoff_hour`.
pub fn apply_temporal_firewall(record: &PatientRecord, cutoff_hour: f64) -> (PatientRecord, GuardAudit) {
    let mut out = record.clone();
    out.notes.retain(|n| n.timestamp < cutoff_hour);
    let purged = record.notes.len() - out.notes.len();
    let audit = GuardAudit {
        notes_purged: purged,
        tokens_masked: 0,
        records_touched: (purged > 0) as usize,
    };
    (out, audit)
}

/// Replace drug-lexicon tokens with [`MASK_TOKEN`]. Pathogen terms cannot be
/// drug terms (checked by [`Lexicons::new`]) so they always survive.
pub fn apply_lexical_mask(doc: &NoteDoc, lexicons: &Lexicons) -> (NoteDoc, GuardAudit) {
    let mut masked = 0;
    let tokens = doc
        .tokens
        .iter()
        .map(|t| {
            if lexicons.drug.contains(t) {
                masked += 1;
                MASK_TOKEN.to_string()
            } else {
                t.clone()
            }
        })
        .collect();
    let audit = GuardAudit {
        notes_purged: 0,
        tokens_masked: masked,
        records_touched: (masked > 0) as usize,
    };
    (
        NoteDoc {
            tokens,
            timestamp: doc.timestamp,
        },
        audit,
    )
}

/// How control records get their observation cutoff.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowPolicy {
    /// Onset hours of the cohort's cases; each control draws one of these by
    /// hashing its id with `seed`.
    pub reference_onsets: Vec<f64>,
    pub seed: u64,
}

impl WindowPolicy {
    pub fn from_cohort(cohort: &Cohort, seed: u64) -> Self {
        let mut reference_onsets: Vec<f64> = cohort
            .records
            .iter()
            .filter_map(|r| r.labels.sepsis_onset)
            .collect();
        reference_onsets.sort_by(f64::total_cmp);
        WindowPolicy {
            reference_onsets,
            seed,
        }
    }

    /// Reference onset used for a control, or `None` when there are no cases.
    pub fn reference_for(&self, id: &str) -> Option<f64> {
        if self.reference_onsets.is_empty() {
            return None;
        }
        let h = rng::mix64(rng::fnv1a(id.as_bytes()) ^ rng::derive_seed(self.seed, rng::streams::WINDOW));
        Some(self.reference_onsets[(h % self.reference_onsets.len() as u64) as usize])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Windowed {
    Kept(PatientRecord),
    /// Truncation would leave no vitals.
    Excluded,
}

impl Windowed {
    pub fn kept(self) -> Option<PatientRecord> {
        match self {
            Windowed::Kept(r) => Some(r),
            Windowed::Excluded => None,
        }
    }
}

/// Observation cutoff for `record` under `task`. `None` means no truncation.
pub fn window_cutoff(
    record: &PatientRecord,
    buffer_hours: f64,
    task: Task,
    policy: &WindowPolicy,
) -> Result<Option<f64>> {
    match task {
        Task::Detection | Task::Mortality => Ok(record
            .labels
            .sepsis_onset
            .or_else(|| policy.reference_for(&record.id))
            .map(|onset| onset - buffer_hours)),
        Task::Antibiotic => match (record.labels.antibiotic_class, record.labels.antibiotic_hour) {
            (_, Some(h)) => Ok(Some(h)),
            (Some(_), None) => Err(Error::Schema {
                id: record.id.clone(),
                message: "antibiotic class present without administration hour".into(),
            }),
            (None, None) => Ok(None),
        },
    }
}

/// Truncate vitals and notes to times strictly before the task cutoff.
pub fn enforce_observation_window(
    record: &PatientRecord,
    buffer_hours: f64,
    task: Task,
    policy: &WindowPolicy,
) -> Result<Windowed> {
    if !(buffer_hours >= 0.0 && buffer_hours.is_finite()) {
        return Err(Error::InvalidParam(format!("buffer_hours must be >= 0, got {buffer_hours}")));
    }
    let Some(cutoff) = window_cutoff(record, buffer_hours, task, policy)? else {
        return Ok(Windowed::Kept(record.clone()));
    };
    let mut out = record.clone();
    out.vitals_series.truncate_before(cutoff);
    if out.vitals_series.is_empty() {
        return Ok(Windowed::Excluded);
    }
    out.notes.retain(|n| n.timestamp < cutoff);
    Ok(Windowed::Kept(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub buffer_hours: f64,
    pub lexicons: Lexicons,
    /// Seed for control reference times.
    pub seed: u64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        GuardConfig {
            buffer_hours: DEFAULT_BUFFER_HOURS,
            lexicons: Lexicons::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuardedCohort {
    pub cohort: Cohort,
    pub audit: GuardAudit,
    pub excluded: Vec<String>,
}

/// Full guard pipeline for one record: firewall at the task cutoff, window,
/// then masking.
pub fn guard_record(
    record: &PatientRecord,
    task: Task,
    config: &GuardConfig,
    policy: &WindowPolicy,
) -> Result<(Option<PatientRecord>, GuardAudit)> {
    let mut audit = GuardAudit::default();
    let cutoff = window_cutoff(record, config.buffer_hours, task, policy)?;
    let fenced = match cutoff {
        Some(c) => {
            let (r, a) = apply_temporal_firewall(record, c);
            audit += a;
            r
        }
        None => record.clone(),
    };
    let Some(mut kept) = enforce_observation_window(&fenced, config.buffer_hours, task, policy)?.kept()
    else {
        return Ok((None, audit));
    };
    let mut masked_any = false;
    for note in &mut kept.notes {
        let (doc, a) = apply_lexical_mask(note, &config.lexicons);
        masked_any |= a.tokens_masked > 0;
        audit.tokens_masked += a.tokens_masked;
        *note = doc;
    }
    audit.records_touched = (audit.notes_purged > 0 || masked_any) as usize;
    Ok((Some(kept), audit))
}

/// Guard every record of `cohort` for `task`; excluded records are dropped
/// and listed by id.
pub fn guard_cohort(cohort: &Cohort, task: Task, config: &GuardConfig) -> Result<GuardedCohort> {
    let policy = WindowPolicy::from_cohort(cohort, config.seed);
    let results: Vec<_> = cohort
        .records
        .par_iter()
        .map(|r| guard_record(r, task, config, &policy))
        .collect::<Result<_>>()?;
    let mut audit = GuardAudit::default();
    let mut records = Vec::with_capacity(results.len());
    let mut excluded = Vec::new();
    for ((kept, a), original) in results.into_iter().zip(&cohort.records) {
        audit += a;
        match kept {
            Some(r) => records.push(r),
            None => excluded.push(original.id.clone()),
        }
    }
    Ok(GuardedCohort {
        cohort: Cohort {
            schema: cohort.schema.clone(),
            records,
            provenance: cohort.provenance.clone(),
            seed: cohort.seed,
        },
        audit,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Labels, StaticVector, VitalsSeries};

    fn note(t: f64, toks: &[&str]) -> NoteDoc {
        NoteDoc {
            tokens: toks.iter().map(|s| s.to_string()).collect(),
            timestamp: t,
        }
    }

    fn record(onset: Option<f64>, hours: usize, notes: Vec<NoteDoc>) -> PatientRecord {
        PatientRecord {
            id: "r1".into(),
            static_vector: StaticVector {
                numeric: vec![1.0],
                categorical: vec![0],
            },
            vitals_series: VitalsSeries {
                values: vec![vec![1.0]; hours],
                mask: vec![vec![true]; hours],
                t0: 0.0,
            },
            notes,
            image_feature_vector: None,
            labels: Labels {
                sepsis_onset: onset,
                ..Labels::default()
            },
        }
    }

    fn max_time(r: &PatientRecord) -> f64 {
        let v = r.vitals_series.hour(r.vitals_series.len() - 1);
        r.notes.iter().map(|n| n.timestamp).fold(v, f64::max)
    }

    #[test]
    fn firewall_without_notes() {
        let r = record(None, 3, vec![]);
        let (out, a) = apply_temporal_firewall(&r, 5.0);
        assert_eq!(out, r);
        assert_eq!(a.notes_purged, 0);
    }

    #[test]
    fn firewall_keeps_earlier_notes() {
        let r = record(None, 3, vec![note(1.0, &["a"]), note(2.5, &["b"])]);
        let (out, a) = apply_temporal_firewall(&r, 3.0);
        assert_eq!(out, r);
        assert_eq!(a.notes_purged, 0);
    }

    #[test]
    fn firewall_purges_boundary() {
        let r = record(None, 3, vec![note(1.0, &["a"]), note(3.0, &["b"])]);
        let (out, a) = apply_temporal_firewall(&r, 3.0);
        assert_eq!(out.notes.len(), 1);
        assert_eq!(a.notes_purged, 1);
        assert_eq!(a.records_touched, 1);
    }

    #[test]
    fn mask_replaces_drugs_only() {
        let lex = Lexicons::default();
        let (out, a) = apply_lexical_mask(&note(0.0, &["vancomycin", "for", "mrsa"]), &lex);
        assert_eq!(out.tokens, vec!["<DRUG>", "for", "mrsa"]);
        assert_eq!(a.tokens_masked, 1);
        let (out, _) = apply_lexical_mask(&note(0.0, &["Vancomycin"]), &lex);
        assert_eq!(out.tokens, vec!["<DRUG>"]);
    }

    #[test]
    fn empty_drug_lexicon_is_identity() {
        let lex = Lexicons::new(Lexicon::empty("drug"), Lexicon::default_pathogens()).unwrap();
        let doc = note(0.0, &["vancomycin", "for", "mrsa"]);
        let (out, a) = apply_lexical_mask(&doc, &lex);
        assert_eq!(out, doc);
        assert_eq!(a.tokens_masked, 0);
    }

    #[test]
    fn overlapping_lexicons_rejected() {
        let drug = Lexicon::new("drug", ["vancomycin", "mrsa"]).unwrap();
        let err = Lexicons::new(drug, Lexicon::default_pathogens()).unwrap_err();
        assert!(err.to_string().contains("mrsa"));
    }

    #[test]
    fn lexicon_validation() {
        assert!(Lexicon::new("d", ["Vanc"]).is_err());
        assert!(Lexicon::new("d", ["vanc", "vanc"]).is_err());
        assert!(Lexicon::new("d", [""]).is_err());
        let l = Lexicon::parse("d", "# header\nvanc  # short form\n\nzosyn\n").unwrap();
        assert_eq!(l.terms().collect::<Vec<_>>(), vec!["vanc", "zosyn"]);
    }

    #[test]
    fn shipped_lexicon_files_match_vocabulary() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
        assert_eq!(Lexicon::from_file(&dir.join("drug_lexicon.txt")).unwrap().terms, Lexicon::default_drugs().terms);
        assert_eq!(
            Lexicon::from_file(&dir.join("pathogen_lexicon.txt")).unwrap().terms,
            Lexicon::default_pathogens().terms
        );
    }

    #[test]
    fn window_boundaries() {
        let policy = WindowPolicy::default();
        let r = record(Some(24.0), 24, vec![note(23.5, &["a"])]);
        let out = enforce_observation_window(&r, 0.0, Task::Detection, &policy).unwrap().kept().unwrap();
        assert_eq!(out, r);

        let out = enforce_observation_window(&r, 4.0, Task::Detection, &policy).unwrap().kept().unwrap();
        assert_eq!(out.vitals_series.len(), 20);
        assert!(out.notes.is_empty());
        assert!(max_time(&out) < 20.0);

        let early = record(Some(2.0), 24, vec![]);
        assert_eq!(
            enforce_observation_window(&early, 4.0, Task::Detection, &policy).unwrap(),
            Windowed::Excluded
        );
        assert!(enforce_observation_window(&r, -1.0, Task::Detection, &policy).is_err());
    }

    #[test]
    fn controls_draw_reference_from_cases() {
        let policy = WindowPolicy {
            reference_onsets: vec![12.0, 15.0, 18.0],
            seed: 9,
        };
        let r = record(None, 24, vec![]);
        let cut = window_cutoff(&r, 4.0, Task::Detection, &policy).unwrap().unwrap();
        assert!([8.0, 11.0, 14.0].contains(&cut));
        assert_eq!(cut, window_cutoff(&r, 4.0, Task::Detection, &policy).unwrap().unwrap());
    }

    #[test]
    fn antibiotic_needs_hour() {
        let mut r = record(None, 24, vec![]);
        r.labels.antibiotic_class = Some(crate::cohort::AntibioticClass::VANC);
        assert!(window_cutoff(&r, 4.0, Task::Antibiotic, &WindowPolicy::default()).is_err());
        r.labels.antibiotic_hour = Some(5.5);
        assert_eq!(window_cutoff(&r, 4.0, Task::Antibiotic, &WindowPolicy::default()).unwrap(), Some(5.5));
    }

    #[test]
    fn guards_are_idempotent() {
        let lex = Lexicons::default();
        let doc = note(0.0, &["zosyn", "klebsiella", "ZOSYN"]);
        let once = apply_lexical_mask(&doc, &lex).0;
        assert_eq!(apply_lexical_mask(&once, &lex).0, once);

        let r = record(Some(16.0), 24, vec![note(1.0, &["vanc"]), note(13.0, &["x"])]);
        let policy = WindowPolicy::default();
        let w1 = enforce_observation_window(&r, 4.0, Task::Detection, &policy).unwrap().kept().unwrap();
        let w2 = enforce_observation_window(&w1, 4.0, Task::Detection, &policy).unwrap().kept().unwrap();
        assert_eq!(w1, w2);
        let f1 = apply_temporal_firewall(&r, 5.0).0;
        assert_eq!(apply_temporal_firewall(&f1, 5.0).0, f1);

        let cfg = GuardConfig::default();
        let (g1, _) = guard_record(&r, Task::Detection, &cfg, &policy).unwrap();
        let g1 = g1.unwrap();
        let (g2, a2) = guard_record(&g1, Task::Detection, &cfg, &policy).unwrap();
        assert_eq!(g2.unwrap(), g1);
        assert_eq!(a2, GuardAudit::default());
    }
}
