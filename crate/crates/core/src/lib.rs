//! Multimodal sepsis decision-support models on synthetic ICU cohorts.
//!
//! Two fusion paradigms are implemented side by side so they can be compared
//! on identical, leakage-guarded data:
//!
//! * [`fusion`]: an end-to-end network whose pooled vitals state queries the
//!   note embeddings through gated additive attention.
//! * [`moe`]: unimodal experts stacked out-of-fold and combined by a
//!   gradient-boosted gate conditioned on static context.
//!
//! Cohorts come from [`synth`], whose latent-variable process admits an exact
//! Bayes posterior used as an evaluation ceiling.

pub mod cohort;
pub mod error;
pub mod fusion;
pub mod gbdt;
pub mod guards;
pub mod harness;
pub mod metrics;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod synth;

pub use cohort::{Cohort, PatientRecord, Task};
pub use error::{Error, Result};

/// A probability vector over task classes.
pub type ProbVector = Vec<f64>;
