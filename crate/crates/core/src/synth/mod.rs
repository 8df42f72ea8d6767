//! Synthetic multimodal cohorts drawn from a latent-variable process.
//!
//! Each admission has a latent severity `z ~ N(0, 1)`, a pathogen category
//! `p` and a radiology finding `r ~ P(r | p)`. Observations are conditionally
//! independent given `(z, p, r)`:
//!
//! * static numerics: `loading_j * z + noise`, admission unit `~ P(u | p)`;
//! * vitals: `dir_c * z * (level + trend * (hour + 1) / T) + shift[p][c] + noise`;
//! * note tokens: i.i.d. draws from pathogen, finding, severity and
//!   background groups, the severity rate rising with `z`;
//! * image: `a * (rho * proto_r + (1 - rho) * proto_p) + sigma * sqrt(1 - rho) * noise`.
//!
//! Labels: sepsis `= 1{a z + kappa z s_p + beta s_p + eps > theta}`,
//! mortality `~ Bernoulli(logistic(a_m z + b_m))`, antibiotic class by
//! imitation of the pathogen-appropriate agent with deviation rate
//! `eps_im`. `theta` and `b_m` are solved so the marginal prevalences hit the
//! configured targets.

pub mod oracle;
pub mod vocab;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    AntibioticClass, CategoricalFeature, Cohort, ImageFeatureVector, Labels, NoteDoc,
    PatientRecord, Schema, StaticVector, VitalsSeries, MASK_SENTINEL,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use oracle::{oracle_posterior, Oracle};

pub const N_PATHOGENS: usize = 4;
pub const N_FINDINGS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSpec {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub loadings: Vec<f64>,
    pub noise: f64,
    /// `P(unit | pathogen)`, one row per pathogen.
    pub unit_given_pathogen: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsSpec {
    pub baseline: Vec<f64>,
    pub scales: Vec<f64>,
    pub direction: Vec<f64>,
    pub level_loading: f64,
    pub trend_loading: f64,
    /// Standardized level shift per pathogen and channel.
    pub pathogen_shift: Vec<Vec<f64>>,
    pub noise: f64,
    pub missing_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSpec {
    /// Additional notes beyond the admission note ~ Binomial(extra_max, extra_p).
    pub extra_max: u32,
    pub extra_p: f64,
    pub tokens_min: u32,
    pub tokens_max: u32,
    pub pathogen_rate: f64,
    /// `P(token group q | pathogen p)` for pathogen tokens.
    pub pathogen_confusion: Vec<Vec<f64>>,
    pub finding_rate: f64,
    /// `P(token group r' | finding r)` for radiology tokens.
    pub finding_confusion: Vec<Vec<f64>>,
    pub severity_rate_max: f64,
    pub severity_loading: f64,
    pub severity_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub loading: f64,
    pub noise: f64,
    pub presence_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSpec {
    pub severity_weight: f64,
    /// Cross-modal interaction strength kappa.
    pub interaction: f64,
    /// Note-signal score `s_p` for each pathogen.
    pub note_signal: Vec<f64>,
    pub note_signal_weight: f64,
    /// Label noise scale; 0 makes the rule deterministic in `(z, p)`.
    pub noise: f64,
    pub prevalence: f64,
    pub onset_min: f64,
    pub onset_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalitySpec {
    pub loading: f64,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntibioticSpec {
    pub imitation_noise: f64,
    pub deviation_prior: Vec<f64>,
    pub admin_min: f64,
    pub admin_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminantSpec {
    /// Per-note probability of a drug name being mentioned in the text.
    pub drug_token_rate: f64,
    /// Per-record probability of a note written after the event.
    pub post_event_note_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub name: String,
    pub n_static: usize,
    pub n_vital_channels: usize,
    pub series_length: usize,
    pub image_dim: usize,
    pub pathogen_prior: Vec<f64>,
    pub finding_given_pathogen: Vec<Vec<f64>>,
    pub statics: StaticSpec,
    pub vitals: VitalsSpec,
    pub notes: NoteSpec,
    pub image: ImageSpec,
    /// Note-image redundancy rho in [0, 1].
    pub redundancy: f64,
    pub detection: DetectionSpec,
    pub mortality: MortalitySpec,
    pub antibiotic: AntibioticSpec,
    pub contaminants: ContaminantSpec,
}

/// Latent draw for one admission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latents {
    pub severity: f64,
    pub pathogen: usize,
    pub finding: usize,
}

/// Pathogen-appropriate agent the imitation policy prescribes.
pub fn intended_class(pathogen: usize) -> AntibioticClass {
    match pathogen {
        0 => AntibioticClass::VANC,
        1 => AntibioticClass::PIP_TAZO,
        2 => AntibioticClass::MEROPENEM,
        _ => AntibioticClass::CEFEPIME,
    }
}

fn confusion(n: usize, diag: f64) -> Vec<Vec<f64>> {
    let off = (1.0 - diag) / (n as f64 - 1.0);
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { diag } else { off }).collect())
        .collect()
}

impl GenSpec {
    pub fn detection_default() -> Self {
        GenSpec {
            name: "detection_default".into(),
            n_static: 3,
            n_vital_channels: 5,
            series_length: 24,
            image_dim: 16,
            pathogen_prior: vec![0.30, 0.28, 0.07, 0.35],
            finding_given_pathogen: vec![
                vec![0.30, 0.40, 0.20, 0.10],
                vec![0.20, 0.50, 0.15, 0.15],
                vec![0.15, 0.45, 0.25, 0.15],
                vec![0.60, 0.10, 0.10, 0.20],
            ],
            statics: StaticSpec {
                means: vec![65.0, 6.0, 3.0],
                scales: vec![15.0, 3.0, 2.0],
                loadings: vec![0.2, 0.7, 0.4],
                noise: 0.8,
                unit_given_pathogen: vec![
                    vec![0.30, 0.20, 0.20, 0.30],
                    vec![0.25, 0.40, 0.15, 0.20],
                    vec![0.50, 0.20, 0.10, 0.20],
                    vec![0.20, 0.20, 0.40, 0.20],
                ],
            },
            vitals: VitalsSpec {
                baseline: vec![85.0, 78.0, 37.0, 18.0, 1.5],
                scales: vec![12.0, 10.0, 0.6, 4.0, 0.8],
                direction: vec![1.0, -1.0, 0.6, 1.0, 1.0],
                level_loading: 0.25,
                trend_loading: 0.8,
                pathogen_shift: vec![
                    vec![0.0, 0.0, 0.3, 0.0, 0.0],
                    vec![0.2, -0.1, 0.6, 0.1, 0.1],
                    vec![0.1, -0.2, 0.4, 0.1, 0.3],
                    vec![0.0, 0.0, -0.3, 0.0, -0.1],
                ],
                noise: 1.0,
                missing_rate: vec![0.05, 0.05, 0.2, 0.1, 0.7],
            },
            notes: NoteSpec {
                extra_max: 6,
                extra_p: 0.5,
                tokens_min: 8,
                tokens_max: 20,
                pathogen_rate: 0.10,
                pathogen_confusion: confusion(4, 0.6),
                finding_rate: 0.08,
                finding_confusion: confusion(4, 0.8),
                severity_rate_max: 0.25,
                severity_loading: 1.0,
                severity_offset: -1.0,
            },
            image: ImageSpec {
                loading: 3.0,
                noise: 1.0,
                presence_rate: 0.9,
            },
            redundancy: 0.9,
            detection: DetectionSpec {
                severity_weight: 1.0,
                interaction: 0.8,
                note_signal: vec![1.0, 1.0, 1.0, -1.0],
                note_signal_weight: 0.5,
                noise: 0.5,
                prevalence: 0.332,
                onset_min: 10.0,
                onset_max: 23.0,
            },
            mortality: MortalitySpec {
                loading: 1.2,
                prevalence: 0.204,
            },
            antibiotic: AntibioticSpec {
                imitation_noise: 0.15,
                deviation_prior: vec![0.35, 0.30, 0.05, 0.30],
                admin_min: 3.0,
                admin_max: 10.0,
            },
            contaminants: ContaminantSpec {
                drug_token_rate: 0.3,
                post_event_note_rate: 0.5,
            },
        }
    }

    pub fn mortality_default() -> Self {
        GenSpec {
            name: "mortality_default".into(),
            ..Self::detection_default()
        }
    }

    /// Radiology findings are well covered by the notes here, so at high
    /// redundancy the image repeats what the Reader already sees.
    pub fn abx_default() -> Self {
        let base = Self::detection_default();
        GenSpec {
            name: "abx_default".into(),
            notes: NoteSpec {
                finding_rate: 0.15,
                finding_confusion: confusion(4, 0.9),
                ..base.notes.clone()
            },
            image: ImageSpec {
                loading: 1.5,
                ..base.image.clone()
            },
            ..base
        }
    }

    /// Built-in preset by name (`detection_default`, `mortality_default`,
    /// `abx_default`).
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name.trim_end_matches(".json") {
            "detection_default" | "detection" => DETECTION_PRESET,
            "mortality_default" | "mortality" => MORTALITY_PRESET,
            "abx_default" | "abx" | "antibiotic" => ABX_PRESET,
            _ => return None,
        };
        Some(serde_json::from_str(text).expect("shipped preset parses"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: GenSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            numeric: (0..self.n_static)
                .map(|j| {
                    vocab::NUMERIC_STATIC_NAMES
                        .get(j)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("static_{j}"))
                })
                .collect(),
            categorical: vec![CategoricalFeature {
                name: "admission_unit".into(),
                cardinality: self.statics.unit_given_pathogen[0].len() as u32,
            }],
            vital_channels: (0..self.n_vital_channels)
                .map(|c| {
                    vocab::VITAL_NAMES
                        .get(c)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("vital_{c}"))
                })
                .collect(),
            image_dim: self.image_dim,
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let simplex = |name: &str, v: &[f64], len: usize| -> Result<()> {
            if v.len() != len {
                return bad(format!("{name} must have length {len}"));
            }
            if v.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return bad(format!("{name} has negative or non-finite entries"));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return bad(format!("{name} sums to {s}, not 1"));
            }
            Ok(())
        };
        let positive = |name: &str, x: f64| -> Result<()> {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                bad(format!("{name} must be > 0, got {x}"))
            }
        };
        let prevalence = |name: &str, x: f64| -> Result<()> {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                bad(format!("{name} prevalence must lie in (0, 1), got {x}"))
            }
        };
        let rate = |name: &str, x: f64| -> Result<()> {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                bad(format!("{name} must lie in [0, 1], got {x}"))
            }
        };

        if self.n_static == 0 || self.n_vital_channels == 0 || self.series_length == 0 {
            return bad("n_static, n_vital_channels and series_length must be >= 1".into());
        }
        if self.image_dim < N_FINDINGS + N_PATHOGENS + 1 {
            return bad(format!(
                "image_dim must be at least {} for orthogonal prototypes",
                N_FINDINGS + N_PATHOGENS + 1
            ));
        }
        simplex("pathogen_prior", &self.pathogen_prior, N_PATHOGENS)?;
        if self.finding_given_pathogen.len() != N_PATHOGENS {
            return bad("finding_given_pathogen needs one row per pathogen".into());
        }
        for row in &self.finding_given_pathogen {
            simplex("finding_given_pathogen row", row, N_FINDINGS)?;
        }

        let s = &self.statics;
        for (name, v) in [("means", &s.means), ("scales", &s.scales), ("loadings", &s.loadings)] {
            if v.len() != self.n_static {
                return bad(format!("statics.{name} must have length n_static"));
            }
        }
        for &x in &s.scales {
            positive("statics.scales", x)?;
        }
        positive("statics.noise", s.noise)?;
        if s.unit_given_pathogen.len() != N_PATHOGENS {
            return bad("statics.unit_given_pathogen needs one row per pathogen".into());
        }
        let n_units = s.unit_given_pathogen[0].len();
        if n_units == 0 {
            return bad("admission unit cardinality must be >= 1".into());
        }
        for row in &s.unit_given_pathogen {
            simplex("statics.unit_given_pathogen row", row, n_units)?;
        }

        let v = &self.vitals;
        let f = self.n_vital_channels;
        for (name, len) in [
            ("baseline", v.baseline.len()),
            ("scales", v.scales.len()),
            ("direction", v.direction.len()),
            ("missing_rate", v.missing_rate.len()),
        ] {
            if len != f {
                return bad(format!("vitals.{name} must have length n_vital_channels"));
            }
        }
        for &x in &v.scales {
            positive("vitals.scales", x)?;
        }
        positive("vitals.noise", v.noise)?;
        for &m in &v.missing_rate {
            if !(0.0..1.0).contains(&m) {
                return bad("vitals.missing_rate must lie in [0, 1)".into());
            }
        }
        if v.pathogen_shift.len() != N_PATHOGENS || v.pathogen_shift.iter().any(|r| r.len() != f) {
            return bad("vitals.pathogen_shift must be pathogens x channels".into());
        }

        let n = &self.notes;
        rate("notes.extra_p", n.extra_p)?;
        if n.tokens_min > n.tokens_max {
            return bad("notes.tokens_min exceeds tokens_max".into());
        }
        rate("notes.pathogen_rate", n.pathogen_rate)?;
        rate("notes.finding_rate", n.finding_rate)?;
        rate("notes.severity_rate_max", n.severity_rate_max)?;
        if n.pathogen_rate + n.finding_rate + n.severity_rate_max > 1.0 {
            return bad("note group rates must leave mass for background tokens".into());
        }
        if n.pathogen_confusion.len() != N_PATHOGENS {
            return bad("notes.pathogen_confusion must be 4 x 4".into());
        }
        for row in &n.pathogen_confusion {
            simplex("notes.pathogen_confusion row", row, N_PATHOGENS)?;
        }
        if n.finding_confusion.len() != N_FINDINGS {
            return bad("notes.finding_confusion must be 4 x 4".into());
        }
        for row in &n.finding_confusion {
            simplex("notes.finding_confusion row", row, N_FINDINGS)?;
        }

        positive("image.noise", self.image.noise)?;
        rate("image.presence_rate", self.image.presence_rate)?;
        if !self.image.loading.is_finite() {
            return bad("image.loading must be finite".into());
        }
        rate("redundancy", self.redundancy)?;

        let d = &self.detection;
        if d.note_signal.len() != N_PATHOGENS {
            return bad("detection.note_signal needs one entry per pathogen".into());
        }
        if !(d.noise >= 0.0 && d.noise.is_finite()) {
            return bad("detection.noise must be >= 0".into());
        }
        prevalence("detection", d.prevalence)?;
        if !(d.onset_min >= 0.0 && d.onset_min < d.onset_max) {
            return bad("detection onset range must satisfy 0 <= min < max".into());
        }
        prevalence("mortality", self.mortality.prevalence)?;
        let a = &self.antibiotic;
        rate("antibiotic.imitation_noise", a.imitation_noise)?;
        simplex("antibiotic.deviation_prior", &a.deviation_prior, 4)?;
        if !(a.admin_min >= 0.0 && a.admin_min < a.admin_max) {
            return bad("antibiotic admin range must satisfy 0 <= min < max".into());
        }
        rate("contaminants.drug_token_rate", self.contaminants.drug_token_rate)?;
        rate(
            "contaminants.post_event_note_rate",
            self.contaminants.post_event_note_rate,
        )?;
        Ok(())
    }

    /// Unit-norm prototype for basis index `k`: an orthonormal DCT-II row.
    pub fn prototype(&self, k: usize) -> Vec<f64> {
        let d = self.image_dim as f64;
        (0..self.image_dim)
            .map(|j| {
                let norm = if k == 0 { (1.0 / d).sqrt() } else { (2.0 / d).sqrt() };
                norm * (std::f64::consts::PI * (j as f64 + 0.5) * k as f64 / d).cos()
            })
            .collect()
    }

    pub fn finding_prototype(&self, finding: usize) -> Vec<f64> {
        self.prototype(1 + finding)
    }

    pub fn pathogen_prototype(&self, pathogen: usize) -> Vec<f64> {
        self.prototype(1 + N_FINDINGS + pathogen)
    }

    /// Mean image for `(finding, pathogen)` and the per-entry noise scale.
    pub fn image_mean(&self, finding: usize, pathogen: usize) -> (Vec<f64>, f64) {
        let rho = self.redundancy;
        let a = self.image.loading;
        let pf = self.finding_prototype(finding);
        let pp = self.pathogen_prototype(pathogen);
        let mean = pf
            .iter()
            .zip(&pp)
            .map(|(f, p)| a * (rho * f + (1.0 - rho) * p))
            .collect();
        (mean, self.image.noise * (1.0 - rho).sqrt())
    }

    /// Severity-token rate as a function of `z`.
    pub fn severity_rate(&self, z: f64) -> f64 {
        let n = &self.notes;
        n.severity_rate_max * logistic(n.severity_loading * z + n.severity_offset)
    }

    /// Coefficient of `z` in channel `c`'s standardized value at `hour`.
    pub fn vitals_z_coefficient(&self, channel: usize, hour: f64) -> f64 {
        let v = &self.vitals;
        v.direction[channel]
            * (v.level_loading + v.trend_loading * (hour + 1.0) / self.series_length as f64)
    }

    /// Linear index of the detection rule before thresholding.
    pub fn detection_index(&self, z: f64, pathogen: usize) -> f64 {
        let d = &self.detection;
        let s = d.note_signal[pathogen];
        d.severity_weight * z + d.interaction * z * s + d.note_signal_weight * s
    }
}

pub const DETECTION_PRESET: &str = include_str!("../../presets/detection_default.json");
pub const MORTALITY_PRESET: &str = include_str!("../../presets/mortality_default.json");
pub const ABX_PRESET: &str = include_str!("../../presets/abx_default.json");

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn record_id(index: usize) -> String {
    format!("p{index:06}")
}

/// Draw `n` records i.i.d. from `spec`. Record `i` uses its own stream keyed
/// by `(seed, i)`, so the cohort is independent of generation order.
pub fn generate_cohort(spec: &GenSpec, n: usize, seed: u64) -> Result<Cohort> {
    let oracle = Oracle::new(spec)?;
    let base = rng::derive_seed(seed, rng::streams::RECORD);
    use rayon::prelude::*;
    let records = (0..n)
        .into_par_iter()
        .map(|i| generate_record(spec, &oracle, base, i).0)
        .collect();
    Ok(Cohort {
        schema: spec.schema(),
        records,
        provenance: format!("genspec:{}:sha256={}", spec.name, spec.hash()),
        seed,
    })
}

/// Record `index` of the cohort `generate_cohort(spec, _, seed)` together
/// with its latent draw.
pub fn generate_with_latents(
    spec: &GenSpec,
    seed: u64,
    index: usize,
) -> Result<(PatientRecord, Latents)> {
    let oracle = Oracle::new(spec)?;
    let base = rng::derive_seed(seed, rng::streams::RECORD);
    Ok(generate_record(spec, &oracle, base, index))
}

fn generate_record(
    spec: &GenSpec,
    oracle: &Oracle,
    base_seed: u64,
    index: usize,
) -> (PatientRecord, Latents) {
    let mut rng = rng::stream(base_seed, index as u64);
    let rng = &mut rng;

    let z = normal(rng);
    let p = categorical(rng, &spec.pathogen_prior);
    let r = categorical(rng, &spec.finding_given_pathogen[p]);

    // Labels.
    let det = &spec.detection;
    let eps = normal(rng);
    let septic = spec.detection_index(z, p) + det.noise * eps > oracle.detection_threshold();
    let onset = uniform(rng, det.onset_min, det.onset_max);
    let mortality = rng.random::<f64>() < logistic(spec.mortality.loading * z + oracle.mortality_offset());
    let abx = &spec.antibiotic;
    let class = if rng.random::<f64>() < abx.imitation_noise {
        AntibioticClass::from_index(categorical(rng, &abx.deviation_prior)).expect("4 classes")
    } else {
        intended_class(p)
    };
    let admin_hour = uniform(rng, abx.admin_min, abx.admin_max);

    // Static.
    let st = &spec.statics;
    let numeric = (0..spec.n_static)
        .map(|j| st.means[j] + st.scales[j] * (st.loadings[j] * z + st.noise * normal(rng)))
        .collect();
    let unit = categorical(rng, &st.unit_given_pathogen[p]) as u32;

    // Vitals on an hourly grid starting at admission.
    let vs = &spec.vitals;
    let mut values = Vec::with_capacity(spec.series_length);
    let mut mask = Vec::with_capacity(spec.series_length);
    for t in 0..spec.series_length {
        let hour = t as f64;
        let mut row = Vec::with_capacity(spec.n_vital_channels);
        let mut mrow = Vec::with_capacity(spec.n_vital_channels);
        for c in 0..spec.n_vital_channels {
            let y = spec.vitals_z_coefficient(c, hour) * z
                + vs.pathogen_shift[p][c]
                + vs.noise * normal(rng);
            let present = rng.random::<f64>() >= vs.missing_rate[c];
            row.push(if present {
                vs.baseline[c] + vs.scales[c] * y
            } else {
                MASK_SENTINEL
            });
            mrow.push(present);
        }
        values.push(row);
        mask.push(mrow);
    }

    // Notes.
    let ns = &spec.notes;
    let horizon = spec.series_length as f64;
    let drug_names = vocab::DRUG_TOKENS[class.index()];
    let extra = (0..ns.extra_max).filter(|_| rng.random::<f64>() < ns.extra_p).count();
    let mut notes = Vec::with_capacity(extra + 3);
    for k in 0..=extra {
        let timestamp = if k == 0 {
            uniform(rng, 0.0, 1.0)
        } else {
            uniform(rng, 0.0, horizon)
        };
        let len = rng.random_range(ns.tokens_min..=ns.tokens_max);
        let sev = spec.severity_rate(z);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| {
                let u: f64 = rng.random();
                let word = if u < ns.pathogen_rate {
                    let q = categorical(rng, &ns.pathogen_confusion[p]);
                    vocab::PATHOGEN_TOKENS[q][rng.random_range(0..4)]
                } else if u < ns.pathogen_rate + ns.finding_rate {
                    let q = categorical(rng, &ns.finding_confusion[r]);
                    vocab::FINDING_TOKENS[q][rng.random_range(0..3)]
                } else if u < ns.pathogen_rate + ns.finding_rate + sev {
                    vocab::SEVERITY_TOKENS[rng.random_range(0..vocab::SEVERITY_TOKENS.len())]
                } else {
                    vocab::BACKGROUND_TOKENS[rng.random_range(0..vocab::BACKGROUND_TOKENS.len())]
                };
                word.to_string()
            })
            .collect();
        if rng.random::<f64>() < spec.contaminants.drug_token_rate {
            let name = drug_names[rng.random_range(0..drug_names.len())];
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, name.to_string());
        }
        notes.push(NoteDoc { tokens, timestamp });
    }
    if rng.random::<f64>() < spec.contaminants.post_event_note_rate {
        let name = drug_names[rng.random_range(0..drug_names.len())];
        notes.push(NoteDoc {
            tokens: vec![
                vocab::NEUTRAL_CONTAMINANT_TOKENS[0].to_string(),
                vocab::NEUTRAL_CONTAMINANT_TOKENS[1].to_string(),
                name.to_string(),
                vocab::NEUTRAL_CONTAMINANT_TOKENS[2].to_string(),
            ],
            timestamp: admin_hour + uniform(rng, 0.0, 2.0),
        });
    }
    if septic && rng.random::<f64>() < spec.contaminants.post_event_note_rate {
        notes.push(NoteDoc {
            tokens: vocab::ONSET_LEAK_TOKENS.iter().map(|s| s.to_string()).collect(),
            timestamp: onset + uniform(rng, 0.0, 2.0),
        });
    }

    // Image.
    let image_present = rng.random::<f64>() < spec.image.presence_rate;
    let image = image_present.then(|| {
        let (mean, sd) = spec.image_mean(r, p);
        ImageFeatureVector(mean.iter().map(|m| m + sd * normal(rng)).collect())
    });

    let record = PatientRecord {
        id: record_id(index),
        static_vector: StaticVector {
            numeric,
            categorical: vec![unit],
        },
        vitals_series: VitalsSeries {
            values,
            mask,
            t0: 0.0,
        },
        notes,
        image_feature_vector: image,
        labels: Labels {
            sepsis_onset: septic.then_some(onset),
            mortality: Some(mortality),
            antibiotic_class: Some(class),
            antibiotic_hour: Some(admin_hour),
        },
    };
    (
        record,
        Latents {
            severity: z,
            pathogen: p,
            finding: r,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Task;

    #[test]
    fn shipped_presets_match_constructors() {
        assert_eq!(GenSpec::preset("detection_default").unwrap(), GenSpec::detection_default());
        assert_eq!(GenSpec::preset("mortality_default").unwrap(), GenSpec::mortality_default());
        assert_eq!(GenSpec::preset("abx_default").unwrap(), GenSpec::abx_default());
    }

    #[test]
    #[ignore = "regenerates the preset files"]
    fn write_presets() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/presets");
        for spec in [
            GenSpec::detection_default(),
            GenSpec::mortality_default(),
            GenSpec::abx_default(),
        ] {
            let text = serde_json::to_string_pretty(&spec).unwrap() + "\n";
            std::fs::write(format!("{dir}/{}.json", spec.name), text).unwrap();
        }
    }

    #[test]
    fn empty_cohort() {
        let c = generate_cohort(&GenSpec::detection_default(), 0, 1).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = GenSpec::abx_default();
        let a = generate_cohort(&spec, 200, 7).unwrap();
        let b = generate_cohort(&spec, 200, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&spec, 200, 8).unwrap();
        assert_ne!(a, c);
        a.validate().unwrap();
        assert!(a.provenance.contains(&spec.hash()));
    }

    #[test]
    fn invalid_spec_reports_field() {
        let mut spec = GenSpec::detection_default();
        spec.redundancy = 1.5;
        let err = generate_cohort(&spec, 1, 0).unwrap_err().to_string();
        assert!(err.contains("redundancy"), "{err}");
        let mut spec = GenSpec::detection_default();
        spec.pathogen_prior[0] += 0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn detection_prevalence_within_three_sd() {
        let spec = GenSpec::detection_default();
        let n = 10_000;
        let c = generate_cohort(&spec, n, 3).unwrap();
        let cases: usize = c.labels(Task::Detection).unwrap().iter().sum();
        let p = 0.332;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        let rate = cases as f64 / n as f64;
        assert!((rate - p).abs() < 3.0 * sd, "rate {rate}");
    }

    #[test]
    fn meropenem_is_rare() {
        let spec = GenSpec::abx_default();
        let c = generate_cohort(&spec, 4000, 5).unwrap();
        let mero = c
            .labels(Task::Antibiotic)
            .unwrap()
            .iter()
            .filter(|&&k| k == AntibioticClass::MEROPENEM.index())
            .count();
        assert!((mero as f64 / 4000.0) < 0.10);
    }

    #[test]
    fn contaminants_present_at_declared_rates() {
        let spec = GenSpec::detection_default();
        let c = generate_cohort(&spec, 2000, 2).unwrap();
        let post_admin = c
            .records
            .iter()
            .filter(|r| r.notes.iter().any(|n| n.tokens.iter().any(|t| t == "started")))
            .count() as f64
            / 2000.0;
        assert!((post_admin - 0.5).abs() < 0.05, "{post_admin}");
        let notes: Vec<_> = c.records.iter().flat_map(|r| &r.notes).collect();
        let drug_terms = vocab::drug_lexicon_terms();
        let with_drug = notes
            .iter()
            .filter(|n| !n.tokens.iter().any(|t| t == "started"))
            .filter(|n| n.tokens.iter().any(|t| drug_terms.contains(&t.as_str())))
            .count();
        let plain = notes.iter().filter(|n| !n.tokens.iter().any(|t| t == "started")).count();
        let rate = with_drug as f64 / plain as f64;
        assert!((rate - 0.3).abs() < 0.03, "{rate}");
    }

    #[test]
    fn full_redundancy_makes_image_a_function_of_finding() {
        let mut spec = GenSpec::abx_default();
        spec.redundancy = 1.0;
        spec.image.presence_rate = 1.0;
        let mut by_finding: Vec<Vec<Vec<f64>>> = vec![Vec::new(); N_FINDINGS];
        for i in 0..400 {
            let (rec, lat) = generate_with_latents(&spec, 4, i).unwrap();
            by_finding[lat.finding].push(rec.image_feature_vector.unwrap().0);
        }
        let mut max_residual: f64 = 0.0;
        for group in by_finding.iter().filter(|g| !g.is_empty()) {
            let d = group[0].len();
            let mean: Vec<f64> = (0..d)
                .map(|j| group.iter().map(|x| x[j]).sum::<f64>() / group.len() as f64)
                .collect();
            for x in group {
                for j in 0..d {
                    max_residual = max_residual.max((x[j] - mean[j]).abs());
                }
            }
        }
        assert!(max_residual < 1e-9, "{max_residual}");
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let spec = GenSpec::detection_default();
        for a in 0..9 {
            for b in 0..9 {
                let dot: f64 = spec
                    .prototype(a)
                    .iter()
                    .zip(spec.prototype(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
