//! Token vocabulary used by the generator. Groups are disjoint so the note
//! likelihood factorizes by group counts.

/// Pathogen categories, in generator order.
pub const PATHOGENS: [&str; 4] = ["GRAM_POS", "GRAM_NEG", "RESISTANT", "NONE"];
pub const NONE_PATHOGEN: usize = 3;

/// Tokens emitted for each pathogen category (the last row carries no
/// organism names, only culture-negative language).
pub const PATHOGEN_TOKENS: [[&str; 4]; 4] = [
    ["mrsa", "staphylococcus", "streptococcus", "enterococcus"],
    ["ecoli", "klebsiella", "pseudomonas", "proteus"],
    ["esbl", "cre", "vre", "acinetobacter"],
    ["no_growth", "culture_negative", "viral_panel", "afebrile"],
];

/// Radiology finding categories and the report tokens that express them.
pub const FINDINGS: [&str; 4] = ["clear", "consolidation", "effusion", "edema"];
pub const FINDING_TOKENS: [[&str; 3]; 4] = [
    ["lungs_clear", "no_acute_process", "normal_silhouette"],
    ["consolidation", "infiltrate", "airspace_opacity"],
    ["effusion", "blunting", "pleural_fluid"],
    ["edema", "vascular_congestion", "interstitial"],
];

pub const SEVERITY_TOKENS: [&str; 6] = [
    "hypotensive",
    "lethargic",
    "confused",
    "mottled",
    "tachypneic",
    "oliguric",
];

pub const BACKGROUND_TOKENS: [&str; 40] = [
    "patient", "admitted", "with", "history", "of", "presents", "the", "and", "noted", "overnight",
    "vitals", "reviewed", "plan", "continue", "monitor", "labs", "pending", "family", "at",
    "bedside", "pain", "controlled", "nursing", "note", "assessment", "denies", "chest", "cough",
    "fever", "reports", "resting", "comfortably", "alert", "oriented", "will", "follow", "up",
    "cultures", "sent", "today",
];

/// Drug names per antibiotic class, in `AntibioticClass` order.
pub const DRUG_TOKENS: [&[&str]; 4] = [
    &["vancomycin", "vanc"],
    &["piperacillin", "tazobactam", "zosyn"],
    &["meropenem", "merrem"],
    &["cefepime", "maxipime"],
];

/// Treatment-adjacent tokens that appear only in post-administration notes.
/// They carry no latent signal, so the posterior ignores them.
pub const NEUTRAL_CONTAMINANT_TOKENS: [&str; 3] = ["started", "empiric", "coverage"];

/// Tokens of post-onset notes written for sepsis cases; they must never
/// survive the observation window.
pub const ONSET_LEAK_TOKENS: [&str; 4] = ["septic", "shock", "pressors", "sepsis"];

/// Replacement for masked drug names.
pub const MASK_TOKEN: &str = "<DRUG>";

pub const UNITS: [&str; 4] = ["MICU", "SICU", "CCU", "TSICU"];

pub const NUMERIC_STATIC_NAMES: [&str; 3] = ["age", "severity_score", "comorbidity_index"];
pub const VITAL_NAMES: [&str; 5] = [
    "heart_rate",
    "mean_arterial_pressure",
    "temperature",
    "respiratory_rate",
    "lactate",
];

pub fn drug_lexicon_terms() -> Vec<&'static str> {
    DRUG_TOKENS.iter().flat_map(|d| d.iter().copied()).collect()
}

pub fn pathogen_lexicon_terms() -> Vec<&'static str> {
    PATHOGEN_TOKENS[..NONE_PATHOGEN]
        .iter()
        .flat_map(|row| row.iter().copied())
        .collect()
}
