//! Gradient-boosted decision trees with Newton leaves.
//!
//! Binary tasks boost one logistic sequence for class 1. With `K > 2`
//! classes each class gets its own one-vs-rest logistic sequence and the
//! per-class probabilities are normalized to sum to one.
//!
//! Feature rows are dense `f64` slices; NaN marks a missing value.

pub mod split;
pub mod tree;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::logistic;
use crate::ProbVector;

pub use split::{exact_best_categorical_split, exact_best_split, GradStats, Split, SplitRule};
pub use tree::{Node, Tree};

pub const FORMAT_VERSION: u32 = 1;
pub const BASE_SCORE_CLIP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBDTParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// L2 leaf regularization.
    pub lambda: f64,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GBDTParams {
    fn default() -> Self {
        GBDTParams {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_leaf: 5,
            lambda: 1.0,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GBDTParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("gbdt: {m}")));
        if self.rounds == 0 {
            return bad("rounds must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must lie in (0, 1]");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1");
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { cardinality: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
    pub kinds: Vec<FeatureKind>,
}

impl FeatureSchema {
    pub fn numeric(n: usize) -> Self {
        FeatureSchema {
            names: (0..n).map(|j| format!("f{j}")).collect(),
            kinds: vec![FeatureKind::Numeric; n],
        }
    }

    pub fn width(&self) -> usize {
        self.kinds.len()
    }

    pub fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::Dimension {
                expected: self.width(),
                actual: row.len(),
            });
        }
        for (j, (&x, kind)) in row.iter().zip(&self.kinds).enumerate() {
            if x.is_nan() {
                continue;
            }
            match kind {
                FeatureKind::Numeric if !x.is_finite() => {
                    return Err(Error::InvalidInput(format!("feature {} is not finite", self.names[j])));
                }
                FeatureKind::Categorical { cardinality }
                    if !(x >= 0.0 && x.fract() == 0.0 && x < *cardinality as f64) =>
                {
                    return Err(Error::InvalidInput(format!(
                        "feature {} value {x} is not a category code below {cardinality}",
                        self.names[j]
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBDTModel {
    pub format_version: u32,
    pub params: GBDTParams,
    pub schema: FeatureSchema,
    pub n_classes: usize,
    /// One entry per boosted sequence.
    pub base_scores: Vec<f64>,
    /// Per-tree weight alpha.
    pub shrinkage: f64,
    /// `trees[s][t]` is tree `t` of sequence `s`.
    pub trees: Vec<Vec<Tree>>,
    /// Mean log-loss after each round, summed over sequences.
    pub train_loss: Vec<f64>,
}

fn n_sequences(n_classes: usize) -> usize {
    if n_classes == 2 {
        1
    } else {
        n_classes
    }
}

fn positive_class(n_classes: usize, seq: usize) -> usize {
    if n_classes == 2 {
        1
    } else {
        seq
    }
}

fn log_loss(score: f64, y: f64) -> f64 {
    // log(1 + exp(-m)) with m the signed margin, computed stably.
    let m = if y > 0.5 { score } else { -score };
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn clipped_log_odds(p: f64) -> f64 {
    let lo = (p / (1.0 - p)).ln();
    lo.clamp(-BASE_SCORE_CLIP, BASE_SCORE_CLIP)
}

/// Fit a boosted ensemble. Rows with NaN entries are routed by learned
/// default branches.
pub fn fit_gbdt(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    schema: &FeatureSchema,
    params: &GBDTParams,
) -> Result<GBDTModel> {
    params.validate()?;
    if x.is_empty() {
        return Err(Error::InvalidInput("gbdt: empty training data".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if n_classes < 2 {
        return Err(Error::InvalidParam("gbdt: need at least 2 classes".into()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!("gbdt: label {bad} outside {n_classes} classes")));
    }
    for row in x {
        schema.check_row(row)?;
    }
    let n = x.len();
    let n_seq = n_sequences(n_classes);
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        counts[c] += 1;
    }
    let base_scores: Vec<f64> = (0..n_seq)
        .map(|s| clipped_log_odds(counts[positive_class(n_classes, s)] as f64 / n as f64))
        .collect();
    let mut model = GBDTModel {
        format_version: FORMAT_VERSION,
        params: params.clone(),
        schema: schema.clone(),
        n_classes,
        base_scores: base_scores.clone(),
        shrinkage: params.learning_rate,
        trees: vec![Vec::new(); n_seq],
        train_loss: Vec::new(),
    };
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Ok(model);
    }

    let targets: Vec<Vec<f64>> = (0..n_seq)
        .map(|s| {
            let pos = positive_class(n_classes, s);
            y.iter().map(|&c| (c == pos) as u8 as f64).collect()
        })
        .collect();
    let columns = tree::Columns::new(x, &schema.kinds);
    let mut scores: Vec<Vec<f64>> = base_scores.iter().map(|&b| vec![b; n]).collect();
    let all_rows: Vec<usize> = (0..n).collect();
    let alpha = params.learning_rate;

    for round in 0..params.rounds {
        let rows = if params.subsample < 1.0 {
            let mut r = rng::stream(params.seed, rng::streams::SUBSAMPLE ^ (round as u64) << 8);
            let picked: Vec<usize> = (0..n).filter(|_| r.random::<f64>() < params.subsample).collect();
            if picked.is_empty() {
                all_rows.clone()
            } else {
                picked
            }
        } else {
            all_rows.clone()
        };
        let new_trees: Vec<Tree> = (0..n_seq)
            .into_par_iter()
            .map(|s| {
                let (g, h): (Vec<f64>, Vec<f64>) = scores[s]
                    .iter()
                    .zip(&targets[s])
                    .map(|(&f, &t)| {
                        let p = logistic(f);
                        (p - t, p * (1.0 - p))
                    })
                    .unzip();
                tree::grow_tree(&columns, &g, &h, &rows, params)
            })
            .collect();
        for (s, t) in new_trees.into_iter().enumerate() {
            for (i, row) in x.iter().enumerate() {
                scores[s][i] += alpha * t.predict(row);
            }
            model.trees[s].push(t);
        }
        let loss: f64 = (0..n_seq)
            .map(|s| {
                scores[s]
                    .iter()
                    .zip(&targets[s])
                    .map(|(&f, &t)| log_loss(f, t))
                    .sum::<f64>()
                    / n as f64
            })
            .sum();
        model.train_loss.push(loss);
    }
    Ok(model)
}

impl GBDTModel {
    pub fn is_prior_only(&self) -> bool {
        self.trees.iter().all(Vec::is_empty)
    }

    /// Raw margin of each sequence: `base + alpha * sum_t h_t(x)`.
    pub fn margins(&self, row: &[f64]) -> Vec<f64> {
        self.trees
            .iter()
            .zip(&self.base_scores)
            .map(|(seq, &base)| {
                let sum: f64 = seq.iter().map(|t| t.predict(row)).sum();
                base + self.shrinkage * sum
            })
            .collect()
    }

    pub fn predict(&self, row: &[f64]) -> Result<ProbVector> {
        self.schema.check_row(row)?;
        Ok(self.predict_unchecked(row))
    }

    pub(crate) fn predict_unchecked(&self, row: &[f64]) -> ProbVector {
        let m = self.margins(row);
        if self.n_classes == 2 {
            let p = logistic(m[0]);
            return vec![1.0 - p, p];
        }
        let raw: Vec<f64> = m.iter().map(|&s| logistic(s)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|p| p / total).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: GBDTModel = serde_json::from_str(&text)?;
        if model.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported gbdt format_version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

pub fn gbdt_predict(model: &GBDTModel, x: &[f64]) -> Result<ProbVector> {
    model.predict(x)
}

/// Total split gain per feature, normalized to sum to one. Features never
/// split on are absent (importance 0).
pub fn gbdt_gain_importance(model: &GBDTModel) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for node in model.trees.iter().flatten().flat_map(|t| &t.nodes) {
        if let Node::Split { feature, gain, .. } = node {
            *acc.entry(*feature).or_default() += gain;
        }
    }
    let total: f64 = acc.values().sum();
    if total > 0.0 {
        for v in acc.values_mut() {
            *v /= total;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn params(rounds: usize, depth: usize, lr: f64) -> GBDTParams {
        GBDTParams {
            rounds,
            learning_rate: lr,
            max_depth: depth,
            min_samples_leaf: 1,
            lambda: 1.0,
            subsample: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn constant_labels_give_prior() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let m = fit_gbdt(&x, &[1; 20], 2, &FeatureSchema::numeric(1), &params(10, 2, 0.3)).unwrap();
        assert!(m.is_prior_only());
        let p = m.predict(&[3.0]).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-3);
        let m = fit_gbdt(&x, &[2; 20], 3, &FeatureSchema::numeric(1), &params(10, 2, 0.3)).unwrap();
        assert!((m.predict(&[100.0]).unwrap()[2] - 1.0).abs() < 1e-3);
        assert!(gbdt_gain_importance(&m).is_empty());
    }

    #[test]
    fn prior_only_binary() {
        let m = GBDTModel {
            format_version: FORMAT_VERSION,
            params: GBDTParams::default(),
            schema: FeatureSchema::numeric(1),
            n_classes: 2,
            base_scores: vec![clipped_log_odds(0.3)],
            shrinkage: 0.1,
            trees: vec![vec![]],
            train_loss: vec![],
        };
        let p = m.predict(&[0.0]).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-9 && (p[1] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn xor_is_learned() {
        let mut r = stream(1, 0);
        let x: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![r.random::<f64>() * 2.0 - 1.0, r.random::<f64>() * 2.0 - 1.0])
            .collect();
        let y: Vec<usize> = x.iter().map(|v| ((v[0] > 0.0) ^ (v[1] > 0.0)) as usize).collect();
        let m = fit_gbdt(&x, &y, 2, &FeatureSchema::numeric(2), &params(50, 2, 0.3)).unwrap();
        let acc = x
            .iter()
            .zip(&y)
            .filter(|(v, &c)| (m.predict(v).unwrap()[1] > 0.5) as usize == c)
            .count() as f64
            / 400.0;
        assert!(acc >= 0.95, "{acc}");
        assert!(m.train_loss.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.trees[0].iter().all(|t| t.depth() <= 2));
    }

    #[test]
    fn hand_set_model_matches_script() {
        let t1 = Tree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    rule: SplitRule::Threshold(0.5),
                    default_left: true,
                    gain: 2.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: -0.4 },
                Node::Leaf { value: 0.6 },
            ],
        };
        let t2 = Tree {
            nodes: vec![
                Node::Split {
                    feature: 1,
                    rule: SplitRule::Categories(vec![1]),
                    default_left: false,
                    gain: 1.0,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: 0.3 },
                Node::Leaf { value: -0.1 },
            ],
        };
        let m = GBDTModel {
            format_version: FORMAT_VERSION,
            params: GBDTParams::default(),
            schema: FeatureSchema {
                names: vec!["a".into(), "b".into()],
                kinds: vec![FeatureKind::Numeric, FeatureKind::Categorical { cardinality: 3 }],
            },
            n_classes: 2,
            base_scores: vec![-0.2],
            shrinkage: 0.5,
            trees: vec![vec![t1, t2]],
            train_loss: vec![],
        };
        let script = |s: f64| 1.0 / (1.0 + (-s).exp());
        let p = m.predict(&[0.9, 1.0]).unwrap();
        assert!((p[1] - script(-0.2 + 0.5 * (0.6 + 0.3))).abs() < 1e-15);
        let p = m.predict(&[f64::NAN, f64::NAN]).unwrap();
        assert!((p[1] - script(-0.2 + 0.5 * (-0.4 - 0.1))).abs() < 1e-15);
        let imp = gbdt_gain_importance(&m);
        assert!((imp[&0] - 2.0 / 3.0).abs() < 1e-15 && (imp[&1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(m.predict(&[0.0, 3.0]).is_err());
        assert!(m.predict(&[0.0]).is_err());
    }

    #[test]
    fn single_stump_importance() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![0.0, 1.0, 2.0, i as f64]).collect();
        let y: Vec<usize> = (0..10).map(|i| (i >= 5) as usize).collect();
        let m = fit_gbdt(&x, &y, 2, &FeatureSchema::numeric(4), &params(1, 1, 1.0)).unwrap();
        let imp = gbdt_gain_importance(&m);
        assert_eq!(imp.len(), 1);
        assert_eq!(imp[&3], 1.0);
    }

    #[test]
    fn multiclass_sums_to_one_and_roundtrips() {
        let mut r = stream(2, 0);
        let x: Vec<Vec<f64>> = (0..90).map(|_| vec![r.random::<f64>(), r.random_range(0..3) as f64]).collect();
        let y: Vec<usize> = x.iter().map(|v| v[1] as usize).collect();
        let schema = FeatureSchema {
            names: vec!["a".into(), "u".into()],
            kinds: vec![FeatureKind::Numeric, FeatureKind::Categorical { cardinality: 3 }],
        };
        let m = fit_gbdt(&x, &y, 3, &schema, &params(5, 2, 0.5)).unwrap();
        for row in &x {
            let p = m.predict(row).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(GBDTModel::load(&path).unwrap(), m);
    }

    #[test]
    fn subsample_is_deterministic() {
        let mut r = stream(5, 0);
        let x: Vec<Vec<f64>> = (0..200).map(|_| vec![r.random::<f64>()]).collect();
        let y: Vec<usize> = x.iter().map(|v| (v[0] > 0.4) as usize).collect();
        let p = GBDTParams {
            subsample: 0.5,
            ..params(10, 2, 0.3)
        };
        let a = fit_gbdt(&x, &y, 2, &FeatureSchema::numeric(1), &p).unwrap();
        let b = fit_gbdt(&x, &y, 2, &FeatureSchema::numeric(1), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_params() {
        let x = vec![vec![0.0], vec![1.0]];
        for p in [
            GBDTParams { rounds: 0, ..GBDTParams::default() },
            GBDTParams { learning_rate: 1.5, ..GBDTParams::default() },
            GBDTParams { subsample: 0.0, ..GBDTParams::default() },
        ] {
            assert!(fit_gbdt(&x, &[0, 1], 2, &FeatureSchema::numeric(1), &p).is_err());
        }
        assert!(fit_gbdt(&[], &[], 2, &FeatureSchema::numeric(1), &GBDTParams::default()).is_err());
    }
}
