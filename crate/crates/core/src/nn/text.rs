//! Reader: hashed unigram and bigram counts fed to multinomial logistic
//! regression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ops::{l2_norm, softmax, softmax_xent};
use super::{check_labels, class_prior, is_degenerate, ExpertBody, ExpertKind, ExpertModel, TrainingLog, FORMAT_VERSION};
use crate::cohort::NoteDoc;
use crate::error::{Error, Result};
use crate::rng::fnv1a;
use crate::ProbVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextExpertParams {
    /// Feature space has `2^hash_bits` buckets.
    pub hash_bits: u32,
    pub bigrams: bool,
    pub l2: f64,
    pub step_size: f64,
    pub max_epochs: usize,
    /// Stop once the full gradient norm drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for TextExpertParams {
    fn default() -> Self {
        TextExpertParams {
            hash_bits: 15,
            bigrams: true,
            l2: 1e-3,
            step_size: 2.0,
            max_epochs: 400,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl TextExpertParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=24).contains(&self.hash_bits) {
            return Err(Error::InvalidParam("reader: hash_bits must be in 1..=24".into()));
        }
        if !(self.l2 >= 0.0) || !(self.step_size > 0.0) || self.max_epochs == 0 {
            return Err(Error::InvalidParam("reader: need l2 >= 0, step_size > 0, max_epochs >= 1".into()));
        }
        Ok(())
    }
}

/// Sparse feature vector sorted by bucket.
pub type SparseVec = Vec<(u32, f64)>;

/// `log1p` of hashed term counts over all notes, L2-normalized. Bigrams are
/// taken within a note only, so the note order does not matter.
pub fn featurize(notes: &[NoteDoc], hash_bits: u32, bigrams: bool) -> SparseVec {
    let mask = (1u64 << hash_bits) - 1;
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    let mut bump = |key: &str| *counts.entry((fnv1a(key.as_bytes()) & mask) as u32).or_default() += 1.0;
    for note in notes {
        for tok in &note.tokens {
            bump(&format!("u:{tok}"));
        }
        if bigrams {
            for pair in note.tokens.windows(2) {
                bump(&format!("b:{} {}", pair[0], pair[1]));
            }
        }
    }
    let mut v: SparseVec = counts.into_iter().map(|(k, c)| (k, c.ln_1p())).collect();
    let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|(_, x)| *x /= norm);
    }
    v
}

/// Linear softmax model; the bias is fixed to the log class prior so an
/// empty document predicts the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextModel {
    pub params: TextExpertParams,
    pub n_classes: usize,
    pub bias: Vec<f64>,
    /// `n_classes x 2^hash_bits`.
    pub weights: Vec<f64>,
}

fn logits(w: &[f64], bias: &[f64], dim: usize, x: &SparseVec) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(k, b)| b + x.iter().map(|&(j, v)| w[k * dim + j as usize] * v).sum::<f64>())
        .collect()
}

/// Mean cross-entropy plus `l2/2 ||W||^2`, and its gradient.
pub fn text_loss_grad(
    w: &[f64],
    bias: &[f64],
    dim: usize,
    xs: &[SparseVec],
    y: &[usize],
    l2: f64,
) -> (f64, Vec<f64>) {
    let n = xs.len() as f64;
    let mut grad: Vec<f64> = w.iter().map(|x| l2 * x).collect();
    let mut loss = 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    for (x, &c) in xs.iter().zip(y) {
        let (l, p) = softmax_xent(&logits(w, bias, dim, x), c);
        loss += l / n;
        for (k, pk) in p.iter().enumerate() {
            let d = (pk - f64::from(u8::from(k == c))) / n;
            for &(j, v) in x {
                grad[k * dim + j as usize] += d * v;
            }
        }
    }
    (loss, grad)
}

impl TextModel {
    fn dim(&self) -> usize {
        1 << self.params.hash_bits
    }

    pub fn predict(&self, notes: &[NoteDoc]) -> ProbVector {
        let x = featurize(notes, self.params.hash_bits, self.params.bigrams);
        softmax(&logits(&self.weights, &self.bias, self.dim(), &x))
    }
}

pub fn fit_text(docs: &[Vec<NoteDoc>], y: &[usize], n_classes: usize, params: &TextExpertParams) -> Result<ExpertModel> {
    params.validate()?;
    check_labels(y, n_classes, docs.len())?;
    if is_degenerate(y) {
        return Ok(ExpertModel::prior(ExpertKind::Reader, y, n_classes));
    }
    let dim = 1usize << params.hash_bits;
    let xs: Vec<SparseVec> = docs.iter().map(|d| featurize(d, params.hash_bits, params.bigrams)).collect();
    // Classes absent from y get a small floor.
    let bias: Vec<f64> = class_prior(y, n_classes).iter().map(|p| p.max(1e-6).ln()).collect();
    let mut w = vec![0.0; n_classes * dim];
    let mut log = TrainingLog::default();
    for epoch in 0..params.max_epochs {
        let (loss, g) = text_loss_grad(&w, &bias, dim, &xs, y, params.l2);
        log.train_loss.push(loss);
        log.epochs_run = epoch + 1;
        if l2_norm(&g) < params.tolerance {
            break;
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= params.step_size * gi;
        }
    }
    log.best_epoch = log.epochs_run;
    Ok(ExpertModel {
        format_version: FORMAT_VERSION,
        kind: ExpertKind::Reader,
        n_classes,
        model: ExpertBody::Text(TextModel {
            params: params.clone(),
            n_classes,
            bias,
            weights: w,
        }),
        log,
    })
}
