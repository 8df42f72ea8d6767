//! Late-fusion stacking: out-of-fold expert probabilities plus missingness
//! flags and a static context vector feed a boosted-tree gate.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{stratified_assignment, PatientRecord, Schema};
use crate::error::{Error, Result};
use crate::gbdt::{fit_gbdt, gbdt_gain_importance, FeatureKind, FeatureSchema, GBDTModel, GBDTParams};
use crate::nn::ops::{softmax, softmax_xent};
use crate::nn::{class_prior, expert_predict, fit_expert, static_feature_schema, static_features, ExpertConfigs, ExpertKind, ExpertModel};
use crate::rng;
use crate::ProbVector;

pub const FORMAT_VERSION: u32 = 1;
const SIMPLEX_TOL: f64 = 1e-6;

/// Column layout of the gate input: expert probability blocks, one missing
/// flag per expert, then the context features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLayout {
    pub experts: Vec<ExpertKind>,
    pub n_classes: usize,
    /// Indices into the static feature row used as context.
    pub context: Vec<usize>,
    pub context_names: Vec<String>,
    pub context_kinds: Vec<FeatureKind>,
}

impl MetaLayout {
    /// `context = None` selects every static feature.
    pub fn new(experts: &[ExpertKind], n_classes: usize, schema: &Schema, context: Option<&[String]>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::Config("ensemble needs at least one expert".into()));
        }
        let mut sorted = experts.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != experts.len() {
            return Err(Error::Config("duplicate expert in ensemble".into()));
        }
        let statics = static_feature_schema(schema);
        let context: Vec<usize> = match context {
            None => (0..statics.width()).collect(),
            Some(names) => names
                .iter()
                .map(|n| {
                    statics
                        .names
                        .iter()
                        .position(|s| s == n)
                        .ok_or_else(|| Error::Config(format!("unknown context feature '{n}'")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(MetaLayout {
            experts: experts.to_vec(),
            n_classes,
            context_names: context.iter().map(|&i| statics.names[i].clone()).collect(),
            context_kinds: context.iter().map(|&i| statics.kinds[i].clone()).collect(),
            context,
        })
    }

    pub fn width(&self) -> usize {
        let e = self.experts.len();
        e * self.n_classes + e + self.context.len()
    }

    pub fn feature_schema(&self) -> FeatureSchema {
        let mut names = Vec::with_capacity(self.width());
        for e in &self.experts {
            names.extend((0..self.n_classes).map(|k| format!("{}_p{k}", e.name())));
        }
        names.extend(self.experts.iter().map(|e| format!("{}_missing", e.name())));
        names.extend(self.context_names.iter().cloned());
        let mut kinds = vec![FeatureKind::Numeric; self.experts.len() * (self.n_classes + 1)];
        kinds.extend(self.context_kinds.iter().cloned());
        FeatureSchema { names, kinds }
    }

    pub fn context_of(&self, record: &PatientRecord) -> Vec<f64> {
        let row = static_features(record);
        self.context.iter().map(|&i| row[i]).collect()
    }
}

/// Assemble one gate input row. Missing experts contribute a uniform block
/// and flag 1.
pub fn build_meta_features(expert_probs: &[Option<ProbVector>], context: &[f64], layout: &MetaLayout) -> Result<Vec<f64>> {
    let k = layout.n_classes;
    if expert_probs.len() != layout.experts.len() {
        return Err(Error::Dimension {
            expected: layout.experts.len(),
            actual: expert_probs.len(),
        });
    }
    if context.len() != layout.context.len() {
        return Err(Error::Dimension {
            expected: layout.context.len(),
            actual: context.len(),
        });
    }
    let mut row = Vec::with_capacity(layout.width());
    for (kind, p) in layout.experts.iter().zip(expert_probs) {
        match p {
            Some(p) => {
                if p.len() != k {
                    return Err(Error::Dimension { expected: k, actual: p.len() });
                }
                let sum: f64 = p.iter().sum();
                if (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|&x| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&x)) {
                    return Err(Error::InvalidInput(format!("{} probabilities off the simplex (sum {sum})", kind.name())));
                }
                row.extend_from_slice(p);
            }
            None => row.extend(std::iter::repeat_n(1.0 / k as f64, k)),
        }
    }
    row.extend(expert_probs.iter().map(|p| if p.is_some() { 0.0 } else { 1.0 }));
    row.extend_from_slice(context);
    Ok(row)
}

/// Stacked training data for the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaDataset {
    pub layout: MetaLayout,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Per record and expert, the stacked probability (None when the record
    /// lacks that modality).
    pub expert_probs: Vec<Vec<Option<ProbVector>>>,
    /// Fold that produced each row; experts for that row never saw the fold.
    pub fold_of: Vec<usize>,
    pub folds: usize,
}

/// Experts retrained on all training records, together with the stacked
/// dataset built from out-of-fold (or, for the leak comparator, in-fold)
/// predictions.
#[derive(Debug, Clone)]
pub struct Stacked {
    pub meta: MetaDataset,
    pub experts: Vec<ExpertModel>,
}

fn fit_experts(
    kinds: &[ExpertKind],
    records: &[&PatientRecord],
    y: &[usize],
    n_classes: usize,
    schema: &Schema,
    configs: &ExpertConfigs,
) -> Result<Vec<ExpertModel>> {
    kinds
        .iter()
        .map(|&kind| fit_expert(kind, records, y, n_classes, schema, configs))
        .collect()
}

fn predict_all(experts: &[ExpertModel], record: &PatientRecord) -> Result<Vec<Option<ProbVector>>> {
    experts
        .iter()
        .map(|m| {
            if m.kind.available(record) {
                expert_predict(m, record).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

fn assemble(
    layout: MetaLayout,
    records: &[&PatientRecord],
    y: &[usize],
    expert_probs: Vec<Vec<Option<ProbVector>>>,
    fold_of: Vec<usize>,
    folds: usize,
) -> Result<MetaDataset> {
    let rows = records
        .iter()
        .zip(&expert_probs)
        .map(|(r, p)| build_meta_features(p, &layout.context_of(r), &layout))
        .collect::<Result<_>>()?;
    Ok(MetaDataset {
        layout,
        rows,
        labels: y.to_vec(),
        expert_probs,
        fold_of,
        folds,
    })
}

/// k-fold stratified out-of-fold stacking. Fold models train concurrently
/// with seeds derived from `(seed, fold)`; the result does not depend on
/// scheduling.
#[allow(clippy::too_many_arguments)]
pub fn oof_stack(
    records: &[&PatientRecord],
    y: &[usize],
    layout: &MetaLayout,
    schema: &Schema,
    configs: &ExpertConfigs,
    folds: usize,
    seed: u64,
) -> Result<Stacked> {
    if folds < 2 {
        return Err(Error::Config("oof_stack needs at least 2 folds".into()));
    }
    if folds > records.len() {
        return Err(Error::Config(format!("{folds} folds for {} records", records.len())));
    }
    if y.len() != records.len() {
        return Err(Error::Dimension { expected: records.len(), actual: y.len() });
    }
    let fold_of = if folds == records.len() {
        (0..records.len()).collect()
    } else {
        stratified_assignment(y, &vec![1.0 / folds as f64; folds], rng::derive_seed(seed, rng::streams::FOLDS))?
    };
    let present: Vec<usize> = (0..layout.n_classes).filter(|c| y.contains(c)).collect();
    for f in 0..folds {
        for &c in &present {
            if !(0..y.len()).any(|i| fold_of[i] != f && y[i] == c) {
                return Err(Error::InvalidInput(format!(
                    "class {c} absent from the training part of fold {f}; use fewer folds"
                )));
            }
        }
    }
    // Job `folds` is the deployment fit on all records.
    let jobs: Vec<Result<Vec<ExpertModel>>> = (0..=folds)
        .into_par_iter()
        .map(|f| {
            let idx: Vec<usize> = (0..records.len()).filter(|&i| fold_of[i] != f).collect();
            let rs: Vec<&PatientRecord> = idx.iter().map(|&i| records[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let cfg = configs.reseeded(rng::derive_seed(seed, f as u64 + 1));
            fit_experts(&layout.experts, &rs, &ys, layout.n_classes, schema, &cfg)
        })
        .collect();
    let mut fitted = jobs.into_iter().collect::<Result<Vec<_>>>()?;
    let experts = fitted.pop().expect("deployment job");
    let expert_probs = records
        .par_iter()
        .zip(&fold_of)
        .map(|(r, &f)| predict_all(&fitted[f], r))
        .collect::<Result<Vec<_>>>()?;
    let meta = assemble(layout.clone(), records, y, expert_probs, fold_of, folds)?;
    Ok(Stacked { meta, experts })
}

/// Deliberately leaky stacking: experts predict on their own training
/// records. Exists only as a comparator showing why folds are needed.
pub fn in_fold_stack(
    records: &[&PatientRecord],
    y: &[usize],
    layout: &MetaLayout,
    schema: &Schema,
    configs: &ExpertConfigs,
    seed: u64,
) -> Result<Stacked> {
    let cfg = configs.reseeded(rng::derive_seed(seed, 1));
    let experts = fit_experts(&layout.experts, records, y, layout.n_classes, schema, &cfg)?;
    let expert_probs = records
        .par_iter()
        .map(|r| predict_all(&experts, r))
        .collect::<Result<Vec<_>>>()?;
    let meta = assemble(layout.clone(), records, y, expert_probs, vec![0; records.len()], 1)?;
    Ok(Stacked { meta, experts })
}

pub fn fit_gate(meta: &MetaDataset, params: &GBDTParams) -> Result<GBDTModel> {
    fit_gbdt(&meta.rows, &meta.labels, meta.layout.n_classes, &meta.layout.feature_schema(), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoeParams {
    pub folds: usize,
    pub gate: GBDTParams,
    /// Static feature names used as context; all when unset.
    pub context: Option<Vec<String>>,
}

impl Default for MoeParams {
    fn default() -> Self {
        MoeParams {
            folds: 5,
            gate: GBDTParams {
                rounds: 100,
                learning_rate: 0.05,
                max_depth: 3,
                min_samples_leaf: 20,
                lambda: 1.0,
                subsample: 1.0,
                seed: 0,
            },
            context: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub format_version: u32,
    pub experts: Vec<ExpertModel>,
    pub gate: GBDTModel,
    pub layout: MetaLayout,
    pub folds: usize,
    pub class_prior: ProbVector,
}

/// Fit the gate on a stacked dataset.
pub fn ensemble_from_stack(stacked: Stacked, params: &MoeParams, seed: u64) -> Result<(EnsembleModel, MetaDataset)> {
    let gate_params = GBDTParams {
        seed: rng::derive_seed(seed, 0x6a7e),
        ..params.gate.clone()
    };
    let gate = fit_gate(&stacked.meta, &gate_params)?;
    let n_classes = stacked.meta.layout.n_classes;
    let model = EnsembleModel {
        format_version: FORMAT_VERSION,
        experts: stacked.experts,
        gate,
        layout: stacked.meta.layout.clone(),
        folds: stacked.meta.folds,
        class_prior: class_prior(&stacked.meta.labels, n_classes),
    };
    Ok((model, stacked.meta))
}

/// Stack, fit the gate and keep the deployment experts.
#[allow(clippy::too_many_arguments)]
pub fn fit_ensemble(
    records: &[&PatientRecord],
    y: &[usize],
    n_classes: usize,
    schema: &Schema,
    experts: &[ExpertKind],
    configs: &ExpertConfigs,
    params: &MoeParams,
    seed: u64,
) -> Result<(EnsembleModel, MetaDataset)> {
    let layout = MetaLayout::new(experts, n_classes, schema, params.context.as_deref())?;
    let stacked = oof_stack(records, y, &layout, schema, configs, params.folds, seed)?;
    ensemble_from_stack(stacked, params, seed)
}

/// Re-express a stack over a subset of its experts (and possibly another
/// context), reusing the already computed expert outputs.
pub fn restrict_stack(stacked: &Stacked, records: &[&PatientRecord], layout: &MetaLayout) -> Result<Stacked> {
    let from = &stacked.meta.layout.experts;
    let pick: Vec<usize> = layout
        .experts
        .iter()
        .map(|k| {
            from.iter()
                .position(|f| f == k)
                .ok_or_else(|| Error::InvalidInput(format!("{} is not part of the stack", k.name())))
        })
        .collect::<Result<_>>()?;
    let expert_probs = stacked
        .meta
        .expert_probs
        .iter()
        .map(|row| pick.iter().map(|&j| row[j].clone()).collect())
        .collect();
    let meta = assemble(
        layout.clone(),
        records,
        &stacked.meta.labels,
        expert_probs,
        stacked.meta.fold_of.clone(),
        stacked.meta.folds,
    )?;
    Ok(Stacked {
        meta,
        experts: pick.iter().map(|&j| stacked.experts[j].clone()).collect(),
    })
}

/// Ensemble prediction with the experts in `masked` treated as absent.
pub fn ensemble_predict_masked(model: &EnsembleModel, record: &PatientRecord, masked: &[ExpertKind]) -> Result<ProbVector> {
    let probs: Vec<Option<ProbVector>> = model
        .experts
        .iter()
        .map(|m| {
            if masked.contains(&m.kind) || !m.kind.available(record) {
                Ok(None)
            } else {
                expert_predict(m, record).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    if probs.iter().all(Option::is_none) {
        return Ok(model.class_prior.clone());
    }
    let row = build_meta_features(&probs, &model.layout.context_of(record), &model.layout)?;
    model.gate.predict(&row)
}

pub fn ensemble_predict(model: &EnsembleModel, record: &PatientRecord) -> Result<ProbVector> {
    ensemble_predict_masked(model, record, &[])
}

/// Gain importance of the gate summed per expert (probability block plus
/// flag) and per context feature.
pub fn gate_importance(model: &EnsembleModel) -> Vec<(String, f64)> {
    let imp = gbdt_gain_importance(&model.gate);
    let layout = &model.layout;
    let k = layout.n_classes;
    let e = layout.experts.len();
    let mut out: Vec<(String, f64)> = layout
        .experts
        .iter()
        .enumerate()
        .map(|(j, kind)| {
            let block: f64 = (j * k..(j + 1) * k).filter_map(|f| imp.get(&f)).sum();
            let flag = imp.get(&(e * k + j)).copied().unwrap_or(0.0);
            (kind.name().to_string(), block + flag)
        })
        .collect();
    for (c, name) in layout.context_names.iter().enumerate() {
        out.push((format!("context:{name}"), imp.get(&(e * (k + 1) + c)).copied().unwrap_or(0.0)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LateConcatParams {
    pub l2: f64,
    pub step_size: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for LateConcatParams {
    fn default() -> Self {
        LateConcatParams {
            l2: 1e-4,
            step_size: 0.5,
            max_epochs: 3000,
            tolerance: 1e-6,
        }
    }
}

/// Multinomial logistic fusion of concatenated expert blocks, without
/// context or missing flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateConcatModel {
    pub experts: Vec<ExpertModel>,
    pub n_classes: usize,
    /// `n_classes x (experts * n_classes)`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn concat_row(probs: &[Option<ProbVector>], k: usize) -> Vec<f64> {
    probs
        .iter()
        .flat_map(|p| p.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]))
        .collect()
}

fn linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(c, bc)| bc + x.iter().enumerate().map(|(j, v)| w[c * x.len() + j] * v).sum::<f64>())
        .collect()
}

/// Fit the fusion layer on a stacked dataset (full-batch gradient descent
/// on mean cross-entropy plus `l2/2 ||W||^2`).
pub fn fit_late_concat(stacked: Stacked, params: &LateConcatParams) -> LateConcatModel {
    let k = stacked.meta.layout.n_classes;
    let xs: Vec<Vec<f64>> = stacked.meta.expert_probs.iter().map(|p| concat_row(p, k)).collect();
    let y = &stacked.meta.labels;
    let d = xs.first().map_or(0, Vec::len);
    let n = xs.len() as f64;
    let mut w = vec![0.0; k * d];
    let mut b: Vec<f64> = class_prior(y, k).iter().map(|p| p.max(1e-6).ln()).collect();
    for _ in 0..params.max_epochs {
        let mut gw: Vec<f64> = w.iter().map(|x| params.l2 * x).collect();
        let mut gb = vec![0.0; k];
        for (x, &c) in xs.iter().zip(y) {
            let (_, p) = softmax_xent(&linear(&w, &b, x), c);
            for cls in 0..k {
                let r = (p[cls] - f64::from(u8::from(cls == c))) / n;
                gb[cls] += r;
                for (j, v) in x.iter().enumerate() {
                    gw[cls * d + j] += r * v;
                }
            }
        }
        let norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        if norm < params.tolerance {
            break;
        }
        w.iter_mut().zip(&gw).for_each(|(a, g)| *a -= params.step_size * g);
        b.iter_mut().zip(&gb).for_each(|(a, g)| *a -= params.step_size * g);
    }
    LateConcatModel {
        experts: stacked.experts,
        n_classes: k,
        weights: w,
        bias: b,
    }
}

/// Same out-of-fold expert probabilities as the ensemble, fused linearly.
#[allow(clippy::too_many_arguments)]
pub fn late_concat_baseline(
    records: &[&PatientRecord],
    y: &[usize],
    n_classes: usize,
    schema: &Schema,
    experts: &[ExpertKind],
    configs: &ExpertConfigs,
    folds: usize,
    params: &LateConcatParams,
    seed: u64,
) -> Result<LateConcatModel> {
    let layout = MetaLayout::new(experts, n_classes, schema, Some(&[]))?;
    let stacked = oof_stack(records, y, &layout, schema, configs, folds, seed)?;
    Ok(fit_late_concat(stacked, params))
}

pub fn late_concat_predict(model: &LateConcatModel, record: &PatientRecord) -> Result<ProbVector> {
    let probs = predict_all(&model.experts, record)?;
    Ok(late_concat_fuse(model, &probs))
}

/// Fusion layer alone, applied to already computed expert outputs.
pub fn late_concat_fuse(model: &LateConcatModel, probs: &[Option<ProbVector>]) -> ProbVector {
    softmax(&linear(&model.weights, &model.bias, &concat_row(probs, model.n_classes)))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    layout: MetaLayout,
    folds: usize,
    class_prior: ProbVector,
    experts: Vec<String>,
    gate: String,
    provenance: String,
}

/// Write the ensemble as a directory of JSON files.
pub fn save_bundle(model: &EnsembleModel, dir: &Path, provenance: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for m in &model.experts {
        let name = format!("expert_{}.json", m.kind.name());
        m.save(&dir.join(&name))?;
        files.push(name);
    }
    model.gate.save(&dir.join("gate.json"))?;
    let manifest = Manifest {
        format_version: model.format_version,
        layout: model.layout.clone(),
        folds: model.folds,
        class_prior: model.class_prior.clone(),
        experts: files,
        gate: "gate.json".into(),
        provenance: provenance.into(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_bundle(dir: &Path) -> Result<EnsembleModel> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported bundle format_version {}", manifest.format_version)));
    }
    let experts = manifest
        .experts
        .iter()
        .map(|f| ExpertModel::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let gate = GBDTModel::load(&dir.join(&manifest.gate))?;
    if gate.schema != manifest.layout.feature_schema() {
        return Err(Error::InvalidInput("gate schema does not match the bundle layout".into()));
    }
    Ok(EnsembleModel {
        format_version: manifest.format_version,
        experts,
        gate,
        layout: manifest.layout,
        folds: manifest.folds,
        class_prior: manifest.class_prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CategoricalFeature, Task};
    use crate::gbdt::{Node, SplitRule, Tree};
    use crate::synth::{generate_cohort, GenSpec};

    fn schema(n_numeric: usize) -> Schema {
        Schema {
            numeric: (0..n_numeric).map(|i| format!("x{i}")).collect(),
            categorical: vec![CategoricalFeature { name: "unit".into(), cardinality: 3 }],
            vital_channels: vec!["hr".into()],
            image_dim: 2,
        }
    }

    #[test]
    fn width_law() {
        let l = MetaLayout::new(&[ExpertKind::Historian, ExpertKind::Monitor, ExpertKind::Reader], 2, &schema(3), None).unwrap();
        assert_eq!(l.width(), 13);
        assert_eq!(l.feature_schema().width(), 13);
    }

    #[test]
    fn missing_block_is_uniform_with_flag() {
        let l = MetaLayout::new(&[ExpertKind::Historian, ExpertKind::Reader], 4, &schema(1), None).unwrap();
        let row = build_meta_features(&[Some(vec![0.1, 0.2, 0.3, 0.4]), None], &[7.0, 2.0], &l).unwrap();
        assert_eq!(row, vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.0, 1.0, 7.0, 2.0]);
        assert!(build_meta_features(&[Some(vec![0.5, 0.2, 0.3, 0.4]), None], &[7.0, 2.0], &l).is_err());
        assert!(build_meta_features(&[None], &[7.0, 2.0], &l).is_err());
    }

    #[test]
    fn planted_expert_dominates_the_gate() {
        let l = MetaLayout::new(&[ExpertKind::Historian, ExpertKind::Monitor], 2, &schema(1), Some(&[])).unwrap();
        let mut r = rng::stream(3, 0);
        use rand::Rng as _;
        let mut meta = MetaDataset {
            layout: l.clone(),
            rows: vec![],
            labels: vec![],
            expert_probs: vec![],
            fold_of: vec![],
            folds: 5,
        };
        for i in 0..400 {
            let c = usize::from(r.random::<f64>() < 0.4);
            let noise: f64 = r.random();
            let probs = vec![Some(vec![1.0 - noise, noise]), Some(if c == 1 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })];
            meta.rows.push(build_meta_features(&probs, &[], &l).unwrap());
            meta.labels.push(c);
            meta.expert_probs.push(probs);
            meta.fold_of.push(i % 5);
        }
        let gate = fit_gate(&meta, &MoeParams::default().gate).unwrap();
        let correct = meta
            .rows
            .iter()
            .zip(&meta.labels)
            .filter(|(row, &c)| usize::from(gate.predict(row).unwrap()[1] > 0.5) == c)
            .count();
        assert!(correct as f64 / 400.0 >= 0.99);
        let imp = gbdt_gain_importance(&gate);
        let monitor: f64 = [2, 3, 5].iter().filter_map(|f| imp.get(f)).sum();
        assert!(monitor > 0.5, "{imp:?}");
    }

    fn hand_set_model(schema: &Schema) -> EnsembleModel {
        let layout = MetaLayout::new(&[ExpertKind::Historian, ExpertKind::Visionary], 2, schema, None).unwrap();
        let stump = Tree {
            nodes: vec![
                // Visionary missing flag.
                Node::Split {
                    feature: 5,
                    rule: SplitRule::Threshold(0.5),
                    default_left: true,
                    gain: 1.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: 1.5 },
                Node::Leaf { value: -0.5 },
            ],
        };
        let gate = GBDTModel {
            format_version: crate::gbdt::FORMAT_VERSION,
            params: GBDTParams::default(),
            schema: layout.feature_schema(),
            n_classes: 2,
            base_scores: vec![0.25],
            shrinkage: 0.5,
            trees: vec![vec![stump]],
            train_loss: vec![],
        };
        EnsembleModel {
            format_version: FORMAT_VERSION,
            experts: vec![
                ExpertModel::prior(ExpertKind::Historian, &[0, 1, 1, 1], 2),
                ExpertModel::prior(ExpertKind::Visionary, &[0, 1], 2),
            ],
            gate,
            layout,
            folds: 5,
            class_prior: vec![0.7, 0.3],
        }
    }

    #[test]
    fn hand_set_stump_gate_matches_scripted_oracle() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 20, 1).unwrap();
        let model = hand_set_model(&cohort.schema);
        let with = cohort.records.iter().find(|r| r.image_feature_vector.is_some()).unwrap();
        let mut without = with.clone();
        without.image_feature_vector = None;
        let sig = |m: f64| 1.0 / (1.0 + (-m).exp());
        let p = ensemble_predict(&model, with).unwrap();
        assert!((p[1] - sig(0.25 + 0.5 * 1.5)).abs() < 1e-12);
        let p = ensemble_predict(&model, &without).unwrap();
        assert!((p[1] - sig(0.25 - 0.5 * 0.5)).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let all = ensemble_predict_masked(&model, with, &[ExpertKind::Historian, ExpertKind::Visionary]).unwrap();
        assert_eq!(all, vec![0.7, 0.3]);
    }

    #[test]
    fn leave_one_out_rows_come_from_models_that_never_saw_them() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 6, 4).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = vec![0, 1, 0, 1, 0, 1];
        let l = MetaLayout::new(&[ExpertKind::Historian, ExpertKind::Reader], 2, &cohort.schema, None).unwrap();
        let s = oof_stack(&refs, &y, &l, &cohort.schema, &ExpertConfigs::default(), 6, 1).unwrap();
        let mut folds = s.meta.fold_of.clone();
        folds.sort();
        assert_eq!(folds, (0..6).collect::<Vec<_>>());
        assert_eq!(s.meta.rows.len(), 6);
        // Each held-out record is absent from its fold's training set, so a
        // Reader fitted without it predicts from other records only.
        let again = oof_stack(&refs, &y, &l, &cohort.schema, &ExpertConfigs::default(), 6, 1).unwrap();
        assert_eq!(s.meta, again.meta);
    }

    #[test]
    fn class_missing_from_fold_training_part_is_reported() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 6, 4).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = vec![0, 0, 0, 0, 0, 1];
        let l = MetaLayout::new(&[ExpertKind::Historian], 2, &cohort.schema, None).unwrap();
        assert!(matches!(
            oof_stack(&refs, &y, &l, &cohort.schema, &ExpertConfigs::default(), 6, 1),
            Err(Error::InvalidInput(_))
        ));
        assert!(oof_stack(&refs, &y, &l, &cohort.schema, &ExpertConfigs::default(), 1, 1).is_err());
    }

    #[test]
    fn ensemble_and_bundle_roundtrip() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 150, 8).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = cohort.labels(Task::Detection).unwrap();
        let (model, meta) = fit_ensemble(
            &refs,
            &y,
            2,
            &cohort.schema,
            &ExpertKind::ALL,
            &ExpertConfigs::default(),
            &MoeParams { folds: 3, ..MoeParams::default() },
            5,
        )
        .unwrap();
        assert_eq!(meta.rows[0].len(), meta.layout.width());
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&model, dir.path(), "test").unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded, model);
        for r in &cohort.records[..20] {
            for masked in ExpertKind::ALL {
                let p = ensemble_predict_masked(&model, r, &[masked]).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(gate_importance(&model).len(), 4 + meta.layout.context.len());
    }

    #[test]
    fn single_expert_late_concat_is_a_monotone_recalibration() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 200, 6).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = cohort.labels(Task::Detection).unwrap();
        let m = late_concat_baseline(
            &refs[..150],
            &y[..150],
            2,
            &cohort.schema,
            &[ExpertKind::Reader],
            &ExpertConfigs::default(),
            3,
            &LateConcatParams::default(),
            2,
        )
        .unwrap();
        let test = &refs[150..];
        let labels: Vec<bool> = y[150..].iter().map(|&c| c == 1).collect();
        let fused: Vec<f64> = test.iter().map(|r| late_concat_predict(&m, r).unwrap()[1]).collect();
        let expert: Vec<f64> = test.iter().map(|r| expert_predict(&m.experts[0], r).unwrap()[1]).collect();
        let a = crate::metrics::roc_auc(&fused, &labels).unwrap();
        let b = crate::metrics::roc_auc(&expert, &labels).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}
