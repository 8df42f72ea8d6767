//! Unimodal experts: Historian (boosted trees on static features), Monitor
//! (vitals), Reader (notes) and Visionary (image features).
//!
//! Networks keep their weights in one flat `Vec<f64>`; gradients are derived
//! by hand and checked against central finite differences in the tests.

pub mod attention;
pub mod ops;
pub mod recurrent;
pub mod temporal;
pub mod text;
pub mod vision;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{PatientRecord, Schema};
use crate::error::{Error, Result};
use crate::gbdt::{fit_gbdt, FeatureKind, FeatureSchema, GBDTModel, GBDTParams};
use crate::rng;
use crate::ProbVector;

pub use temporal::{fit_temporal, TemporalExpertParams, TemporalModel};
pub use text::{fit_text, TextExpertParams, TextModel};
pub use vision::{fit_vision, VisionExpertParams, VisionModel};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExpertKind {
    Historian,
    Monitor,
    Reader,
    Visionary,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 4] = [
        ExpertKind::Historian,
        ExpertKind::Monitor,
        ExpertKind::Reader,
        ExpertKind::Visionary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Historian => "historian",
            ExpertKind::Monitor => "monitor",
            ExpertKind::Reader => "reader",
            ExpertKind::Visionary => "visionary",
        }
    }

    /// Whether `record` carries the modality this expert reads.
    pub fn available(self, record: &PatientRecord) -> bool {
        match self {
            ExpertKind::Historian | ExpertKind::Reader => true,
            ExpertKind::Monitor => !record.vitals_series.is_empty(),
            ExpertKind::Visionary => record.image_feature_vector.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub l2: f64,
    /// Global gradient-norm clip applied to every step.
    pub clip_norm: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            step_size: 0.05,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            l2: 1e-4,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidParam("step_size must be > 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParam("batch_size and epochs must be >= 1".into()));
        }
        if !(self.l2 >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidParam("l2 must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Mean minibatch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Validation score per epoch (higher is better).
    pub val_score: Vec<f64>,
}

/// A per-sample differentiable loss over a flat parameter vector.
pub trait Objective: Sync {
    /// Loss of sample `i`; when `grad` is given, adds the sample gradient.
    fn sample_loss(&self, w: &[f64], i: usize, grad: Option<&mut [f64]>) -> f64;
}

const CHUNK: usize = 16;

/// Mean loss over `idx` plus `l2/2 ||w||^2`, and its gradient. Chunks are
/// reduced in index order so the result does not depend on thread count.
pub fn batch_loss_grad<O: Objective>(obj: &O, w: &[f64], idx: &[usize], l2: f64) -> (f64, Vec<f64>) {
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; w.len()];
            let mut loss = 0.0;
            for &i in chunk {
                loss += obj.sample_loss(w, i, Some(&mut g));
            }
            (loss, g)
        })
        .collect();
    let n = idx.len().max(1) as f64;
    let mut grad = vec![0.0; w.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        ops::add_acc(&mut grad, &g);
    }
    for (gi, wi) in grad.iter_mut().zip(w) {
        *gi = *gi / n + l2 * wi;
    }
    loss = loss / n + 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    (loss, grad)
}

pub fn mean_loss<O: Objective>(obj: &O, w: &[f64], idx: &[usize]) -> f64 {
    let parts: Vec<f64> = idx
        .par_chunks(CHUNK)
        .map(|c| c.iter().map(|&i| obj.sample_loss(w, i, None)).sum::<f64>())
        .collect();
    parts.iter().sum::<f64>() / idx.len().max(1) as f64
}

pub struct TrainOutcome {
    pub weights: Vec<f64>,
    pub log: TrainingLog,
}

/// Minibatch gradient descent with a fixed step, global-norm clipping and
/// early stopping on `validate` (higher is better). `on_epoch` sees the
/// weights after each epoch.
pub fn train_minibatch<O: Objective>(
    obj: &O,
    init: Vec<f64>,
    train_idx: &[usize],
    settings: &OptimizerSettings,
    seed: u64,
    mut validate: impl FnMut(&[f64]) -> f64,
) -> TrainOutcome {
    let mut w = init;
    let mut best_w = w.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut log = TrainingLog::default();
    let mut since_best = 0;
    let mut order = train_idx.to_vec();
    for epoch in 0..settings.epochs {
        let mut r = rng::stream(seed, rng::streams::SHUFFLE ^ ((epoch as u64) << 16));
        rng::shuffle(&mut r, &mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let (loss, mut g) = batch_loss_grad(obj, &w, batch, settings.l2);
            epoch_loss += loss * batch.len() as f64;
            let norm = ops::l2_norm(&g);
            if norm > settings.clip_norm {
                let s = settings.clip_norm / norm;
                g.iter_mut().for_each(|x| *x *= s);
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= settings.step_size * gi;
            }
        }
        log.train_loss.push(epoch_loss / order.len().max(1) as f64);
        let score = validate(&w);
        log.val_score.push(score);
        log.epochs_run = epoch + 1;
        if score > best_score {
            best_score = score;
            best_w.clone_from(&w);
            log.best_epoch = epoch + 1;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > settings.patience {
                break;
            }
        }
    }
    TrainOutcome { weights: best_w, log }
}

/// Seeded split of `0..n` into a training part and a validation slice of
/// `fraction` (empty when `n < 10`).
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, rng::streams::SPLIT);
    rng::shuffle(&mut r, &mut idx);
    if n < 10 || fraction <= 0.0 {
        return (idx, Vec::new());
    }
    let n_val = ((n as f64 * fraction).round() as usize).max(1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Maximum of `|a - n| / max(|a|, |n|, 1e-6)` between `analytic` and
/// central differences of `f` at `w` with step `eps`.
pub fn max_relative_error(f: impl Fn(&[f64]) -> f64, w: &[f64], analytic: &[f64], eps: f64) -> f64 {
    max_relative_error_at(f, w, analytic, eps, 0..w.len())
}

/// As [`max_relative_error`] but only over the given coordinates.
pub fn max_relative_error_at(
    f: impl Fn(&[f64]) -> f64,
    w: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: impl IntoIterator<Item = usize>,
) -> f64 {
    let mut probe = w.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        let num = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Class frequencies of `y`.
pub fn class_prior(y: &[usize], n_classes: usize) -> ProbVector {
    let mut p = vec![0.0; n_classes];
    for &c in y {
        p[c] += 1.0;
    }
    let n = y.len().max(1) as f64;
    p.iter_mut().for_each(|x| *x /= n);
    p
}

pub(crate) fn is_degenerate(y: &[usize]) -> bool {
    y.windows(2).all(|w| w[0] == w[1])
}

pub(crate) fn check_labels(y: &[usize], n_classes: usize, n: usize) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidInput("expert: empty training data".into()));
    }
    if y.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: y.len(),
        });
    }
    if let Some(&c) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!("label {c} outside {n_classes} classes")));
    }
    Ok(())
}

/// Static features as a GBDT row: numeric values then categorical codes.
pub fn static_features(record: &PatientRecord) -> Vec<f64> {
    let s = &record.static_vector;
    s.numeric
        .iter()
        .copied()
        .chain(s.categorical.iter().map(|&c| c as f64))
        .collect()
}

pub fn static_feature_schema(schema: &Schema) -> FeatureSchema {
    FeatureSchema {
        names: schema.static_names(),
        kinds: std::iter::repeat_n(FeatureKind::Numeric, schema.numeric.len())
            .chain(schema.categorical.iter().map(|c| FeatureKind::Categorical {
                cardinality: c.cardinality,
            }))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "body", rename_all = "snake_case")]
pub enum ExpertBody {
    /// Constant prediction used when training labels have a single class.
    Prior { probs: ProbVector },
    Gbdt(GBDTModel),
    Temporal(TemporalModel),
    Text(TextModel),
    Vision(VisionModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    pub format_version: u32,
    pub kind: ExpertKind,
    pub n_classes: usize,
    pub model: ExpertBody,
    pub log: TrainingLog,
}

impl ExpertModel {
    pub(crate) fn prior(kind: ExpertKind, y: &[usize], n_classes: usize) -> Self {
        ExpertModel {
            format_version: FORMAT_VERSION,
            kind,
            n_classes,
            model: ExpertBody::Prior {
                probs: class_prior(y, n_classes),
            },
            log: TrainingLog::default(),
        }
    }

    pub fn is_prior_only(&self) -> bool {
        matches!(self.model, ExpertBody::Prior { .. })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ExpertModel = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported expert format_version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Historian: boosted trees on the static vector.
pub fn fit_historian(
    records: &[&PatientRecord],
    y: &[usize],
    n_classes: usize,
    schema: &Schema,
    params: &GBDTParams,
) -> Result<ExpertModel> {
    check_labels(y, n_classes, records.len())?;
    if is_degenerate(y) {
        return Ok(ExpertModel::prior(ExpertKind::Historian, y, n_classes));
    }
    let x: Vec<Vec<f64>> = records.iter().map(|r| static_features(r)).collect();
    let model = fit_gbdt(&x, y, n_classes, &static_feature_schema(schema), params)?;
    let log = TrainingLog {
        epochs_run: model.train_loss.len(),
        best_epoch: model.train_loss.len(),
        train_loss: model.train_loss.clone(),
        val_score: Vec::new(),
    };
    Ok(ExpertModel {
        format_version: FORMAT_VERSION,
        kind: ExpertKind::Historian,
        n_classes,
        model: ExpertBody::Gbdt(model),
        log,
    })
}

/// Class probabilities from one expert.
pub fn expert_predict(model: &ExpertModel, record: &PatientRecord) -> Result<ProbVector> {
    if !model.kind.available(record) {
        return Err(Error::ModalityAbsent(match model.kind {
            ExpertKind::Monitor => "vitals",
            ExpertKind::Visionary => "image",
            _ => "static",
        }));
    }
    match &model.model {
        ExpertBody::Prior { probs } => Ok(probs.clone()),
        ExpertBody::Gbdt(m) => m.predict(&static_features(record)),
        ExpertBody::Temporal(m) => Ok(m.predict(&record.vitals_series)),
        ExpertBody::Text(m) => Ok(m.predict(&record.notes)),
        ExpertBody::Vision(m) => {
            let img = record.image_feature_vector.as_ref().expect("checked above");
            m.predict(&img.0)
        }
    }
}

/// Hyperparameters for every expert kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfigs {
    pub historian: GBDTParams,
    pub monitor: TemporalExpertParams,
    pub reader: TextExpertParams,
    pub visionary: VisionExpertParams,
}

impl Default for ExpertConfigs {
    fn default() -> Self {
        ExpertConfigs {
            historian: GBDTParams {
                rounds: 150,
                learning_rate: 0.05,
                max_depth: 3,
                min_samples_leaf: 10,
                lambda: 1.0,
                subsample: 1.0,
                seed: 0,
            },
            monitor: TemporalExpertParams::desk(),
            reader: TextExpertParams::default(),
            visionary: VisionExpertParams::default(),
        }
    }
}

impl ExpertConfigs {
    /// Copy with every expert seed replaced by one derived from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.historian.seed = rng::derive_seed(seed, 1);
        c.monitor.seed = rng::derive_seed(seed, 2);
        c.reader.seed = rng::derive_seed(seed, 3);
        c.visionary.seed = rng::derive_seed(seed, 4);
        c
    }
}

/// Train one expert of `kind` on the records that carry its modality.
pub fn fit_expert(
    kind: ExpertKind,
    records: &[&PatientRecord],
    y: &[usize],
    n_classes: usize,
    schema: &Schema,
    configs: &ExpertConfigs,
) -> Result<ExpertModel> {
    let (rs, ys): (Vec<&PatientRecord>, Vec<usize>) = records
        .iter()
        .zip(y)
        .filter(|(r, _)| kind.available(r))
        .map(|(r, &c)| (*r, c))
        .unzip();
    if rs.is_empty() {
        return Err(Error::InvalidInput(format!("no training records carry the {} modality", kind.name())));
    }
    match kind {
        ExpertKind::Historian => fit_historian(&rs, &ys, n_classes, schema, &configs.historian),
        ExpertKind::Monitor => {
            let series: Vec<_> = rs.iter().map(|r| r.vitals_series.clone()).collect();
            fit_temporal(&series, &ys, n_classes, &configs.monitor)
        }
        ExpertKind::Reader => {
            let docs: Vec<_> = rs.iter().map(|r| r.notes.clone()).collect();
            fit_text(&docs, &ys, n_classes, &configs.reader)
        }
        ExpertKind::Visionary => {
            let feats: Vec<_> = rs
                .iter()
                .map(|r| r.image_feature_vector.clone().expect("filtered on availability"))
                .collect();
            fit_vision(&feats, &ys, n_classes, &configs.visionary)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn sample_loss(&self, w: &[f64], i: usize, grad: Option<&mut [f64]>) -> f64 {
            let t = i as f64;
            if let Some(g) = grad {
                g[0] += w[0] - t;
            }
            0.5 * (w[0] - t) * (w[0] - t)
        }
    }

    #[test]
    fn batch_gradient_is_thread_independent() {
        let idx: Vec<usize> = (0..100).collect();
        let (l, g) = batch_loss_grad(&Quadratic, &[3.0], &idx, 0.1);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (l2, g2) = pool.install(|| batch_loss_grad(&Quadratic, &[3.0], &idx, 0.1));
        assert_eq!((l, g), (l2, g2));
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let idx: Vec<usize> = (0..10).collect();
        let settings = OptimizerSettings {
            epochs: 20,
            patience: 0,
            ..OptimizerSettings::default()
        };
        let scores = [0.5, 0.6, 0.6, 0.9];
        let mut k = 0;
        let out = train_minibatch(&Quadratic, vec![0.0], &idx, &settings, 1, |_| {
            k += 1;
            scores[k - 1]
        });
        assert_eq!(out.log.epochs_run, 3);
        assert_eq!(out.log.best_epoch, 2);
    }

    #[test]
    fn validation_slice_is_ten_percent() {
        let (t, v) = validation_split(100, 0.1, 4);
        assert_eq!((t.len(), v.len()), (90, 10));
        let (t, v) = validation_split(5, 0.1, 4);
        assert_eq!((t.len(), v.len()), (5, 0));
    }

    #[test]
    fn expert_predict_is_pure_and_on_simplex() {
        use crate::synth::{generate_cohort, GenSpec};
        use crate::cohort::Task;
        let cohort = generate_cohort(&GenSpec::detection_default(), 120, 3).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = cohort.labels(Task::Detection).unwrap();
        let configs = ExpertConfigs::default();
        let dir = tempfile::tempdir().unwrap();
        for kind in ExpertKind::ALL {
            let m = fit_expert(kind, &refs, &y, 2, &cohort.schema, &configs).unwrap();
            let path = dir.path().join(format!("{}.json", kind.name()));
            m.save(&path).unwrap();
            assert_eq!(ExpertModel::load(&path).unwrap(), m);
            for r in cohort.records.iter().filter(|r| kind.available(r)).take(20) {
                let p = expert_predict(&m, r).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert_eq!(p, expert_predict(&m, r).unwrap());
            }
        }
        let prior = ExpertModel::prior(ExpertKind::Reader, &[0, 1, 1, 1], 2);
        assert_eq!(expert_predict(&prior, &cohort.records[0]).unwrap(), vec![0.25, 0.75]);
        let mut no_image = cohort.records[0].clone();
        no_image.image_feature_vector = None;
        let vis = ExpertModel::prior(ExpertKind::Visionary, &[0, 1], 2);
        assert!(matches!(expert_predict(&vis, &no_image), Err(Error::ModalityAbsent("image"))));
    }
}
