//! Visionary: a one-hidden-layer network over precomputed image features.

use serde::{Deserialize, Serialize};

use super::ops::{self, add_acc, gemv_acc, gemv_t_acc, outer_acc, softmax, Block, LayoutBuilder};
use super::{
    check_labels, is_degenerate, mean_loss, train_minibatch, validation_split, ExpertBody, ExpertKind, ExpertModel,
    Objective, OptimizerSettings, FORMAT_VERSION,
};
use crate::cohort::ImageFeatureVector;
use crate::error::{Error, Result};
use crate::rng;
use crate::ProbVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionExpertParams {
    pub width: usize,
    pub optimizer: OptimizerSettings,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for VisionExpertParams {
    fn default() -> Self {
        VisionExpertParams {
            width: 32,
            optimizer: OptimizerSettings {
                step_size: 0.1,
                epochs: 40,
                patience: 5,
                ..OptimizerSettings::default()
            },
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl VisionExpertParams {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidParam("visionary: width must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidParam("visionary: validation_fraction must be in [0, 0.5)".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionNet {
    pub input: usize,
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
}

impl VisionNet {
    pub fn new(input: usize, width: usize, n_classes: usize) -> (Self, LayoutBuilder) {
        let mut l = LayoutBuilder::new();
        let net = VisionNet {
            input,
            w1: l.matrix(width, input),
            b1: l.vector(width),
            w2: l.matrix(n_classes, width),
            b2: l.vector(n_classes),
        };
        (net, l)
    }

    fn hidden(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = self.b1.of(w).to_vec();
        gemv_acc(self.w1.of(w), x, &mut a);
        a.iter().map(|v| v.tanh()).collect()
    }

    pub fn logits(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let h = self.hidden(w, x);
        let mut o = self.b2.of(w).to_vec();
        gemv_acc(self.w2.of(w), &h, &mut o);
        o
    }

    pub fn loss_grad(&self, w: &[f64], x: &[f64], label: usize, grad: Option<&mut [f64]>) -> f64 {
        let h = self.hidden(w, x);
        let mut o = self.b2.of(w).to_vec();
        gemv_acc(self.w2.of(w), &h, &mut o);
        let (loss, p) = ops::softmax_xent(&o, label);
        let Some(grad) = grad else { return loss };
        let d = ops::xent_grad(&p, label);
        add_acc(self.b2.of_mut(grad), &d);
        outer_acc(self.w2.of_mut(grad), &d, &h);
        let mut dh = vec![0.0; h.len()];
        gemv_t_acc(self.w2.of(w), &d, &mut dh);
        let dpre: Vec<f64> = dh.iter().zip(&h).map(|(g, a)| g * (1.0 - a * a)).collect();
        add_acc(self.b1.of_mut(grad), &dpre);
        outer_acc(self.w1.of_mut(grad), &dpre, x);
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionModel {
    pub params: VisionExpertParams,
    pub net: VisionNet,
    pub weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn standardizer(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| {
            let v = xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

impl VisionModel {
    pub fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        if x.len() != self.net.input {
            return Err(Error::Dimension {
                expected: self.net.input,
                actual: x.len(),
            });
        }
        let z = standardize(x, &self.mean, &self.std);
        Ok(softmax(&self.net.logits(&self.weights, &z)))
    }
}

struct DenseObjective<'a> {
    net: &'a VisionNet,
    xs: &'a [Vec<f64>],
    y: &'a [usize],
}

impl Objective for DenseObjective<'_> {
    fn sample_loss(&self, w: &[f64], i: usize, grad: Option<&mut [f64]>) -> f64 {
        self.net.loss_grad(w, &self.xs[i], self.y[i], grad)
    }
}

pub fn fit_vision(
    feats: &[ImageFeatureVector],
    y: &[usize],
    n_classes: usize,
    params: &VisionExpertParams,
) -> Result<ExpertModel> {
    params.validate()?;
    check_labels(y, n_classes, feats.len())?;
    let dim = feats[0].0.len();
    if let Some(bad) = feats.iter().find(|f| f.0.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            actual: bad.0.len(),
        });
    }
    if is_degenerate(y) {
        return Ok(ExpertModel::prior(ExpertKind::Visionary, y, n_classes));
    }
    let raw: Vec<Vec<f64>> = feats.iter().map(|f| f.0.clone()).collect();
    let (mean, std) = standardizer(&raw);
    let xs: Vec<Vec<f64>> = raw.iter().map(|x| standardize(x, &mean, &std)).collect();
    let (net, layout) = VisionNet::new(dim, params.width, n_classes);
    let init = layout.init(&mut rng::stream(params.seed, rng::streams::INIT));
    let obj = DenseObjective { net: &net, xs: &xs, y };
    let (train, val) = validation_split(xs.len(), params.validation_fraction, params.seed);
    let score_on = if val.is_empty() { train.clone() } else { val };
    let out = train_minibatch(&obj, init, &train, &params.optimizer, params.seed, |w| {
        -mean_loss(&obj, w, &score_on)
    });
    Ok(ExpertModel {
        format_version: FORMAT_VERSION,
        kind: ExpertKind::Visionary,
        n_classes,
        model: ExpertBody::Vision(VisionModel {
            params: params.clone(),
            net,
            weights: out.weights,
            mean,
            std,
        }),
        log: out.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_relative_error;
    use rand::Rng as _;

    #[test]
    fn gradient_matches_finite_differences() {
        let (net, layout) = VisionNet::new(5, 4, 3);
        let mut r = rng::stream(3, 0);
        let w = layout.init(&mut r);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
        let mut g = vec![0.0; w.len()];
        net.loss_grad(&w, &x, 2, Some(&mut g));
        let err = max_relative_error(|p| net.loss_grad(p, &x, 2, None), &w, &g, 1e-5);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_width_is_rejected() {
        let params = VisionExpertParams { width: 0, ..VisionExpertParams::default() };
        let feats = vec![ImageFeatureVector(vec![0.0]); 4];
        assert!(matches!(fit_vision(&feats, &[0, 1, 0, 1], 2, &params), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn separable_2d_features_reach_full_accuracy() {
        let mut r = rng::stream(6, 0);
        let mut feats = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let shift = if c == 1 { 1.0 } else { -1.0 };
            feats.push(ImageFeatureVector(vec![shift + r.random_range(-0.5..0.5), r.random_range(-1.0..1.0)]));
            y.push(c);
        }
        let params = VisionExpertParams {
            optimizer: OptimizerSettings { epochs: 100, patience: 100, ..VisionExpertParams::default().optimizer },
            ..VisionExpertParams::default()
        };
        let m = fit_vision(&feats, &y, 2, &params).unwrap();
        let ExpertBody::Vision(v) = &m.model else { panic!() };
        for (f, &c) in feats.iter().zip(&y) {
            let p = v.predict(&f.0).unwrap();
            assert_eq!(usize::from(p[1] > p[0]), c);
        }
    }

    #[test]
    fn learns_a_linear_boundary() {
        let mut r = rng::stream(8, 0);
        let feats: Vec<ImageFeatureVector> =
            (0..200).map(|_| ImageFeatureVector((0..4).map(|_| r.random_range(-1.0..1.0)).collect())).collect();
        let y: Vec<usize> = feats.iter().map(|f| usize::from(f.0[0] + f.0[1] > 0.0)).collect();
        let params = VisionExpertParams {
            optimizer: OptimizerSettings { epochs: 100, patience: 100, ..VisionExpertParams::default().optimizer },
            ..VisionExpertParams::default()
        };
        let m = fit_vision(&feats, &y, 2, &params).unwrap();
        let ExpertBody::Vision(v) = &m.model else { panic!() };
        let acc = feats
            .iter()
            .zip(&y)
            .filter(|(f, &c)| {
                let p = v.predict(&f.0).unwrap();
                usize::from(p[1] > p[0]) == c
            })
            .count();
        assert!(acc >= 180, "accuracy {acc}/200");
    }
}
