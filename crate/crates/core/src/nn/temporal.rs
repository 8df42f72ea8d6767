//! Monitor: causal convolution, bidirectional recurrent layer, attention
//! pooling and a softmax head over the hourly vitals.

use serde::{Deserialize, Serialize};

use super::attention::{pool_backward, pool_forward, PoolBlocks};
use super::ops::{self, add_acc, gemv_acc, gemv_t_acc, outer_acc, softmax, Block, LayoutBuilder};
use super::recurrent::{birnn_backward, birnn_forward, BiRnnBlocks, CellType};
use super::{
    check_labels, is_degenerate, train_minibatch, validation_split, ExpertBody, ExpertKind, ExpertModel,
    Objective, OptimizerSettings, FORMAT_VERSION,
};
use crate::cohort::VitalsSeries;
use crate::error::{Error, Result};
use crate::rng;
use crate::ProbVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalExpertParams {
    pub filters: usize,
    pub kernel: usize,
    pub cell: CellType,
    pub hidden: usize,
    pub attention: usize,
    pub optimizer: OptimizerSettings,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TemporalExpertParams {
    fn default() -> Self {
        TemporalExpertParams {
            filters: 32,
            kernel: 3,
            cell: CellType::Lstm,
            hidden: 128,
            attention: 32,
            optimizer: OptimizerSettings {
                step_size: 0.1,
                epochs: 12,
                patience: 3,
                ..OptimizerSettings::default()
            },
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TemporalExpertParams {
    /// Small sizes for single-core runs.
    pub fn desk() -> Self {
        TemporalExpertParams {
            filters: 8,
            hidden: 8,
            attention: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel == 0 || self.hidden == 0 || self.attention == 0 {
            return Err(Error::InvalidParam("monitor: layer sizes must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidParam("monitor: validation_fraction must be in [0, 0.5)".into()));
        }
        self.optimizer.validate()
    }
}

/// Parameter layout of the Monitor network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorNet {
    pub channels: usize,
    pub kernel: usize,
    pub n_classes: usize,
    /// `filters x (kernel * channels)`, columns ordered by lag then channel.
    pub conv_w: Block,
    pub conv_b: Block,
    pub rnn: BiRnnBlocks,
    pub pool: PoolBlocks,
    pub out_w: Block,
    pub out_b: Block,
    pub n_params: usize,
}

impl MonitorNet {
    pub fn new(channels: usize, n_classes: usize, p: &TemporalExpertParams) -> (Self, LayoutBuilder) {
        let mut l = LayoutBuilder::new();
        let conv_w = l.matrix(p.filters, p.kernel * channels);
        let conv_b = l.vector(p.filters);
        let rnn = BiRnnBlocks::new(&mut l, p.cell, p.filters, p.hidden);
        let pool = PoolBlocks::new(&mut l, rnn.output_dim(), p.attention);
        let out_w = l.matrix(n_classes, rnn.output_dim());
        let out_b = l.vector(n_classes);
        let net = MonitorNet {
            channels,
            kernel: p.kernel,
            n_classes,
            conv_w,
            conv_b,
            rnn,
            pool,
            out_w,
            out_b,
            n_params: l.len(),
        };
        (net, l)
    }

    fn window(&self, xs: &[Vec<f64>], t: usize) -> Vec<f64> {
        let mut win = vec![0.0; self.kernel * self.channels];
        for k in 0..self.kernel.min(t + 1) {
            win[k * self.channels..(k + 1) * self.channels].copy_from_slice(&xs[t - k]);
        }
        win
    }

    /// Logits for a prepared (imputed, standardized) series.
    pub fn logits(&self, w: &[f64], xs: &[Vec<f64>]) -> Vec<f64> {
        self.forward(w, xs).3
    }

    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        w: &[f64],
        xs: &[Vec<f64>],
    ) -> (Vec<Vec<f64>>, super::recurrent::BiCache, super::attention::PoolCache, Vec<f64>) {
        let conv: Vec<Vec<f64>> = (0..xs.len())
            .map(|t| {
                let mut a = self.conv_b.of(w).to_vec();
                gemv_acc(self.conv_w.of(w), &self.window(xs, t), &mut a);
                a.iter().map(|v| v.tanh()).collect()
            })
            .collect();
        let bi = birnn_forward(w, &self.rnn, &conv);
        let pooled = pool_forward(w, &self.pool, &bi.outputs);
        let mut logits = self.out_b.of(w).to_vec();
        gemv_acc(self.out_w.of(w), &pooled.pooled, &mut logits);
        (conv, bi, pooled, logits)
    }

    /// Cross-entropy at `label`, adding its gradient to `grad` when given.
    pub fn loss_grad(&self, w: &[f64], xs: &[Vec<f64>], label: usize, grad: Option<&mut [f64]>) -> f64 {
        let (conv, bi, pooled, logits) = self.forward(w, xs);
        let (loss, p) = ops::softmax_xent(&logits, label);
        let Some(grad) = grad else { return loss };
        let dlogits = ops::xent_grad(&p, label);
        add_acc(self.out_b.of_mut(grad), &dlogits);
        outer_acc(self.out_w.of_mut(grad), &dlogits, &pooled.pooled);
        let mut dpooled = vec![0.0; pooled.pooled.len()];
        gemv_t_acc(self.out_w.of(w), &dlogits, &mut dpooled);
        let dhs = pool_backward(w, &self.pool, &bi.outputs, &pooled, &dpooled, grad);
        let dconv = birnn_backward(w, &self.rnn, &conv, &bi, &dhs, grad);
        for (t, (c, dc)) in conv.iter().zip(&dconv).enumerate() {
            let dpre: Vec<f64> = c.iter().zip(dc).map(|(a, d)| d * (1.0 - a * a)).collect();
            add_acc(self.conv_b.of_mut(grad), &dpre);
            outer_acc(self.conv_w.of_mut(grad), &dpre, &self.window(xs, t));
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalModel {
    pub params: TemporalExpertParams,
    pub net: MonitorNet,
    pub weights: Vec<f64>,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

/// Observed-value mean and standard deviation per channel.
pub fn channel_stats(series: &[VitalsSeries], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut n = vec![0usize; channels];
    for s in series {
        for (row, m) in s.values.iter().zip(&s.mask) {
            for c in 0..channels {
                if m[c] {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                    n[c] += 1;
                }
            }
        }
    }
    let mean: Vec<f64> = (0..channels).map(|c| if n[c] > 0 { sum[c] / n[c] as f64 } else { 0.0 }).collect();
    let std = (0..channels)
        .map(|c| {
            if n[c] < 2 {
                return 1.0;
            }
            let var = sq[c] / n[c] as f64 - mean[c] * mean[c];
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Forward-fill each channel, fall back to the channel mean before the
/// first observation, then standardize.
pub fn prepare_series(s: &VitalsSeries, mean: &[f64], std: &[f64]) -> Vec<Vec<f64>> {
    let mut last: Vec<f64> = mean.to_vec();
    s.values
        .iter()
        .zip(&s.mask)
        .map(|(row, m)| {
            (0..mean.len())
                .map(|c| {
                    if m[c] {
                        last[c] = row[c];
                    }
                    (last[c] - mean[c]) / std[c]
                })
                .collect()
        })
        .collect()
}

impl TemporalModel {
    pub fn predict(&self, s: &VitalsSeries) -> ProbVector {
        let xs = prepare_series(s, &self.channel_mean, &self.channel_std);
        softmax(&self.net.logits(&self.weights, &xs))
    }
}

struct SeriesObjective<'a> {
    net: &'a MonitorNet,
    xs: &'a [Vec<Vec<f64>>],
    y: &'a [usize],
}

impl Objective for SeriesObjective<'_> {
    fn sample_loss(&self, w: &[f64], i: usize, grad: Option<&mut [f64]>) -> f64 {
        self.net.loss_grad(w, &self.xs[i], self.y[i], grad)
    }
}

pub fn fit_temporal(
    series: &[VitalsSeries],
    y: &[usize],
    n_classes: usize,
    params: &TemporalExpertParams,
) -> Result<ExpertModel> {
    params.validate()?;
    check_labels(y, n_classes, series.len())?;
    if series.iter().any(|s| s.is_empty()) {
        return Err(Error::ModalityAbsent("vitals"));
    }
    if is_degenerate(y) {
        return Ok(ExpertModel::prior(ExpertKind::Monitor, y, n_classes));
    }
    let channels = series[0].values[0].len();
    let (mean, std) = channel_stats(series, channels);
    let xs: Vec<Vec<Vec<f64>>> = series.iter().map(|s| prepare_series(s, &mean, &std)).collect();
    let (net, layout) = MonitorNet::new(channels, n_classes, params);
    let init = layout.init(&mut rng::stream(params.seed, rng::streams::INIT));
    let obj = SeriesObjective { net: &net, xs: &xs, y };
    let (train, val) = validation_split(series.len(), params.validation_fraction, params.seed);
    let score_on = if val.is_empty() { train.clone() } else { val };
    let out = train_minibatch(&obj, init, &train, &params.optimizer, params.seed, |w| {
        -super::mean_loss(&obj, w, &score_on)
    });
    Ok(ExpertModel {
        format_version: FORMAT_VERSION,
        kind: ExpertKind::Monitor,
        n_classes,
        model: ExpertBody::Temporal(TemporalModel {
            params: params.clone(),
            net,
            weights: out.weights,
            channel_mean: mean,
            channel_std: std,
        }),
        log: out.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_relative_error;
    use rand::Rng as _;

    fn small(cell: CellType) -> TemporalExpertParams {
        TemporalExpertParams {
            filters: 3,
            kernel: 3,
            cell,
            hidden: 4,
            attention: 3,
            ..TemporalExpertParams::default()
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (cell, point) in [CellType::Gru, CellType::Lstm].into_iter().flat_map(|c| (0..5).map(move |k| (c, k))) {
            let (net, layout) = MonitorNet::new(2, 3, &small(cell));
            let mut r = rng::stream(5, point);
            let w = layout.init(&mut r);
            let xs: Vec<Vec<f64>> = (0..6).map(|_| (0..2).map(|_| r.random_range(-1.5..1.5)).collect()).collect();
            let mut g = vec![0.0; w.len()];
            net.loss_grad(&w, &xs, 1, Some(&mut g));
            let err = max_relative_error(|p| net.loss_grad(p, &xs, 1, None), &w, &g, 1e-5);
            assert!(err <= 1e-4, "{cell:?}: relative error {err}");
        }
    }

    #[test]
    fn causal_conv_ignores_future_steps() {
        let (net, _) = MonitorNet::new(1, 2, &small(CellType::Gru));
        let a: Vec<Vec<f64>> = vec![vec![0.3], vec![-0.2], vec![1.0]];
        let mut b = a.clone();
        b[2][0] = -4.0;
        let wa = net.window(&a, 1);
        let wb = net.window(&b, 1);
        assert_eq!(wa, wb);
        assert_eq!(wa, vec![-0.2, 0.3, 0.0]);
    }

    #[test]
    fn imputation_forward_fills_then_standardizes() {
        let s = VitalsSeries {
            values: vec![vec![0.0], vec![4.0], vec![0.0]],
            mask: vec![vec![false], vec![true], vec![false]],
            t0: 0.0,
        };
        let xs = prepare_series(&s, &[2.0], &[2.0]);
        assert_eq!(xs, vec![vec![0.0], vec![1.0], vec![1.0]]);
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar re-derivation of the Monitor forward pass for one channel,
    /// one filter, one hidden unit per direction and one attention unit.
    fn scripted_forward(net: &MonitorNet, w: &[f64], xs: &[f64]) -> Vec<f64> {
        let cw = net.conv_w.of(w);
        let cb = net.conv_b.of(w)[0];
        let conv: Vec<f64> = (0..xs.len())
            .map(|t| {
                let lag = |k: usize| if t >= k { xs[t - k] } else { 0.0 };
                (cb + cw[0] * lag(0) + cw[1] * lag(1) + cw[2] * lag(2)).tanh()
            })
            .collect();
        let gru = |blk: &crate::nn::recurrent::RnnBlocks, seq: &[f64]| -> Vec<f64> {
            let (wi, u, b, bu) = (blk.w.of(w), blk.u.of(w), blk.b.of(w), blk.bu.of(w)[0]);
            let mut h = 0.0;
            seq.iter()
                .map(|&c| {
                    let z = sig(wi[0] * c + u[0] * h + b[0]);
                    let r = sig(wi[1] * c + u[1] * h + b[1]);
                    let n = (wi[2] * c + b[2] + r * (u[2] * h + bu)).tanh();
                    h = (1.0 - z) * n + z * h;
                    h
                })
                .collect()
        };
        let hf = gru(&net.rnn.fwd, &conv);
        let rev: Vec<f64> = conv.iter().rev().copied().collect();
        let mut hb = gru(&net.rnn.bwd, &rev);
        hb.reverse();
        let (aw, ab, av) = (net.pool.w.of(w), net.pool.b.of(w)[0], net.pool.v.of(w)[0]);
        let scores: Vec<f64> = (0..xs.len()).map(|t| av * (aw[0] * hf[t] + aw[1] * hb[t] + ab).tanh()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let pf: f64 = (0..xs.len()).map(|t| e[t] / z * hf[t]).sum();
        let pb: f64 = (0..xs.len()).map(|t| e[t] / z * hb[t]).sum();
        let (ow, ob) = (net.out_w.of(w), net.out_b.of(w));
        let l0 = ow[0] * pf + ow[1] * pb + ob[0];
        let l1 = ow[2] * pf + ow[3] * pb + ob[1];
        let mx = l0.max(l1);
        let (e0, e1) = ((l0 - mx).exp(), (l1 - mx).exp());
        vec![e0 / (e0 + e1), e1 / (e0 + e1)]
    }

    #[test]
    fn hand_set_model_matches_scripted_forward() {
        let params = TemporalExpertParams {
            filters: 1,
            kernel: 3,
            cell: CellType::Gru,
            hidden: 1,
            attention: 1,
            ..TemporalExpertParams::desk()
        };
        let (net, layout) = MonitorNet::new(1, 2, &params);
        let w: Vec<f64> = (0..layout.len()).map(|i| 0.7 * ((i + 1) as f64).sin()).collect();
        let model = TemporalModel {
            params,
            net: net.clone(),
            weights: w.clone(),
            channel_mean: vec![0.0],
            channel_std: vec![1.0],
        };
        let s = VitalsSeries {
            values: vec![vec![0.5], vec![-1.0], vec![2.0]],
            mask: vec![vec![true]; 3],
            t0: 0.0,
        };
        let got = model.predict(&s);
        let want = scripted_forward(&net, &w, &[0.5, -1.0, 2.0]);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn attention_weights_are_a_shift_invariant_simplex() {
        let (net, layout) = MonitorNet::new(2, 2, &small(CellType::Lstm));
        let mut r = rng::stream(12, 0);
        let mut w = layout.init(&mut r);
        let hs: Vec<Vec<f64>> = (0..7).map(|_| (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let a = crate::nn::attention::pool_forward(&w, &net.pool, &hs).alpha;
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let scores = crate::nn::attention::pool_scores(&w, &net.pool, &hs).0;
        let shifted: Vec<f64> = scores.iter().map(|s| s + 3.25).collect();
        let b = ops::softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // A constant tanh argument through the bias leaves weights uniform.
        for x in net.pool.v.of_mut(&mut w) {
            *x = 0.0;
        }
        let u = crate::nn::attention::pool_forward(&w, &net.pool, &hs).alpha;
        assert!(u.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn constant_labels_give_prior_and_training_is_deterministic() {
        let mut r = rng::stream(4, 0);
        let series: Vec<VitalsSeries> = (0..30)
            .map(|_| VitalsSeries {
                values: (0..5).map(|_| vec![r.random_range(-1.0..1.0)]).collect(),
                mask: vec![vec![true]; 5],
                t0: 0.0,
            })
            .collect();
        let m = fit_temporal(&series, &[1; 30], 2, &TemporalExpertParams::desk()).unwrap();
        assert!(m.is_prior_only());
        let y: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let a = fit_temporal(&series, &y, 2, &TemporalExpertParams::desk()).unwrap();
        let b = fit_temporal(&series, &y, 2, &TemporalExpertParams::desk()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn learns_slope_sign() {
        let mut r = rng::stream(9, 0);
        let mut series = Vec::new();
        let mut y = Vec::new();
        for i in 0..64 {
            let up = i % 2 == 0;
            let slope = if up { 0.3 } else { -0.3 };
            let values: Vec<Vec<f64>> = (0..12)
                .map(|t| vec![slope * t as f64 + r.random_range(-0.3..0.3), r.random_range(-1.0..1.0)])
                .collect();
            series.push(VitalsSeries {
                mask: vec![vec![true; 2]; 12],
                values,
                t0: 0.0,
            });
            y.push(usize::from(up));
        }
        let params = TemporalExpertParams {
            optimizer: OptimizerSettings {
                step_size: 0.2,
                batch_size: 8,
                epochs: 200,
                patience: 200,
                ..OptimizerSettings::default()
            },
            validation_fraction: 0.0,
            ..TemporalExpertParams::desk()
        };
        let m = fit_temporal(&series, &y, 2, &params).unwrap();
        let ExpertBody::Temporal(tm) = &m.model else { panic!() };
        let correct = series
            .iter()
            .zip(&y)
            .filter(|(s, &c)| {
                let p = tm.predict(s);
                usize::from(p[1] > p[0]) == c
            })
            .count();
        assert!(correct as f64 / 64.0 >= 0.95, "accuracy {correct}/64");
    }
}
