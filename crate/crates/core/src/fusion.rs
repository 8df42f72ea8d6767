//! FusionFormer: an end-to-end deep-fusion network. The pooled vitals state
//! queries the note embeddings through gated additive attention; the fused
//! vector is then concatenated with static and image codes and classified.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, PatientRecord, Schema, Task};
use crate::error::{Error, Result};
use crate::metrics::auc_for;
use crate::nn::attention::{pool_backward, pool_forward, PoolBlocks, PoolCache};
use crate::nn::ops::{self, add_acc, gemv_acc, gemv_t_acc, outer_acc, sigmoid, softmax, Block, LayoutBuilder};
use crate::nn::recurrent::{birnn_backward, birnn_forward, BiCache, BiRnnBlocks, CellType};
use crate::nn::temporal::{channel_stats, prepare_series};
use crate::nn::vision::standardizer;
use crate::nn::{batch_loss_grad, train_minibatch, Objective, OptimizerSettings};
use crate::rng::{self, fnv1a};
use crate::ProbVector;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionFormerParams {
    /// Hidden units per GRU direction.
    pub hidden: usize,
    /// Width of both additive attention scorers.
    pub attention: usize,
    pub embed_dim: usize,
    /// Note tokens hash into `2^hash_bits` embedding rows.
    pub hash_bits: u32,
    /// Uniform init scale of the embedding table.
    pub embed_init: f64,
    pub static_dim: usize,
    pub vision_dim: usize,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl Default for FusionFormerParams {
    fn default() -> Self {
        FusionFormerParams {
            hidden: 64,
            attention: 32,
            embed_dim: 32,
            hash_bits: 15,
            embed_init: 0.1,
            static_dim: 8,
            vision_dim: 8,
            optimizer: OptimizerSettings {
                step_size: 0.05,
                batch_size: 32,
                epochs: 60,
                patience: 10,
                l2: 1e-5,
                clip_norm: 5.0,
            },
            seed: 0,
        }
    }
}

impl FusionFormerParams {
    /// Small sizes for single-core runs.
    pub fn desk() -> Self {
        FusionFormerParams {
            hidden: 16,
            attention: 16,
            embed_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.attention, self.embed_dim, self.static_dim, self.vision_dim];
        if dims.contains(&0) {
            return Err(Error::InvalidParam("fusionformer: all dimensions must be >= 1".into()));
        }
        if !(1..=24).contains(&self.hash_bits) {
            return Err(Error::InvalidParam("fusionformer: hash_bits must be in 1..=24".into()));
        }
        if !(self.embed_init >= 0.0 && self.embed_init.is_finite()) {
            return Err(Error::InvalidParam("fusionformer: embed_init must be finite and >= 0".into()));
        }
        self.optimizer.validate()
    }
}

/// Parameter layout of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNet {
    pub channels: usize,
    pub static_in: usize,
    pub image_in: usize,
    pub n_classes: usize,
    pub rnn: BiRnnBlocks,
    pub pool: PoolBlocks,
    pub embed: Block,
    pub w_q: Block,
    pub w_k: Block,
    pub v: Block,
    pub w_g: Block,
    pub b_g: Block,
    pub w_v: Block,
    pub w_s: Block,
    pub b_s: Block,
    pub w_i: Block,
    pub b_i: Block,
    pub w_c: Block,
    pub b_c: Block,
    pub n_params: usize,
}

impl FusionNet {
    pub fn new(
        channels: usize,
        static_in: usize,
        image_in: usize,
        n_classes: usize,
        p: &FusionFormerParams,
    ) -> (Self, LayoutBuilder) {
        let mut l = LayoutBuilder::new();
        let rnn = BiRnnBlocks::new(&mut l, CellType::Gru, channels, p.hidden);
        let hd = rnn.output_dim();
        let pool = PoolBlocks::new(&mut l, hd, p.attention);
        let embed = l.uniform(1 << p.hash_bits, p.embed_dim, p.embed_init);
        let w_q = l.matrix(p.attention, hd);
        let w_k = l.matrix(p.attention, p.embed_dim);
        let v = l.matrix(p.attention, 1);
        let w_g = l.matrix(hd, hd + p.embed_dim);
        let b_g = l.vector(hd);
        let w_v = l.matrix(hd, p.embed_dim);
        let w_s = l.matrix(p.static_dim, static_in.max(1));
        let b_s = l.vector(p.static_dim);
        let w_i = l.matrix(p.vision_dim, image_in.max(1));
        let b_i = l.vector(p.vision_dim);
        let w_c = l.matrix(n_classes, hd + p.static_dim + p.vision_dim + 1);
        let b_c = l.vector(n_classes);
        let net = FusionNet {
            channels,
            static_in,
            image_in,
            n_classes,
            rnn,
            pool,
            embed,
            w_q,
            w_k,
            v,
            w_g,
            b_g,
            w_v,
            w_s,
            b_s,
            w_i,
            b_i,
            w_c,
            b_c,
            n_params: l.len(),
        };
        (net, l)
    }

    pub fn hidden_dim(&self) -> usize {
        self.rnn.output_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.cols
    }
}

/// One record in network coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput {
    pub vitals: Vec<Vec<f64>>,
    /// Hashed token ids per note, notes in canonical order.
    pub notes: Vec<Vec<u32>>,
    pub statics: Vec<f64>,
    pub image: Option<Vec<f64>>,
}

pub struct AttentionCache {
    pub alpha: Vec<f64>,
    u: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    projected: Vec<f64>,
    pub gate: Vec<f64>,
    hc: Vec<f64>,
}

fn attend(net: &FusionNet, w: &[f64], h: &[f64], notes: &[Vec<f64>]) -> (Vec<f64>, AttentionCache) {
    let d = net.embed_dim();
    let mut q = vec![0.0; net.w_q.rows];
    gemv_acc(net.w_q.of(w), h, &mut q);
    let v = net.v.of(w);
    let mut u = Vec::with_capacity(notes.len());
    let mut scores = Vec::with_capacity(notes.len());
    for e in notes {
        let mut pre = q.clone();
        gemv_acc(net.w_k.of(w), e, &mut pre);
        let uj: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        scores.push(uj.iter().zip(v).map(|(a, b)| a * b).sum());
        u.push(uj);
    }
    let alpha = softmax(&scores);
    let mut context = vec![0.0; d];
    for (e, a) in notes.iter().zip(&alpha) {
        for (c, x) in context.iter_mut().zip(e) {
            *c += a * x;
        }
    }
    let mut projected = vec![0.0; h.len()];
    gemv_acc(net.w_v.of(w), &context, &mut projected);
    let mut hc = h.to_vec();
    hc.extend_from_slice(&context);
    let mut ag = net.b_g.of(w).to_vec();
    gemv_acc(net.w_g.of(w), &hc, &mut ag);
    let gate: Vec<f64> = ag.iter().map(|&x| sigmoid(x)).collect();
    let fused = (0..h.len())
        .map(|k| gate[k] * h[k] + (1.0 - gate[k]) * projected[k])
        .collect();
    (
        fused,
        AttentionCache {
            alpha,
            u,
            context,
            projected,
            gate,
            hc,
        },
    )
}

/// Returns `(dh, d_notes)`.
fn attend_backward(
    net: &FusionNet,
    w: &[f64],
    h: &[f64],
    notes: &[Vec<f64>],
    cache: &AttentionCache,
    dfused: &[f64],
    grad: &mut [f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let hd = h.len();
    let d = net.embed_dim();
    let g = &cache.gate;
    let mut dh: Vec<f64> = (0..hd).map(|k| dfused[k] * g[k]).collect();
    let dproj: Vec<f64> = (0..hd).map(|k| dfused[k] * (1.0 - g[k])).collect();
    let dag: Vec<f64> = (0..hd)
        .map(|k| dfused[k] * (h[k] - cache.projected[k]) * g[k] * (1.0 - g[k]))
        .collect();
    outer_acc(net.w_v.of_mut(grad), &dproj, &cache.context);
    let mut dc = vec![0.0; d];
    gemv_t_acc(net.w_v.of(w), &dproj, &mut dc);
    outer_acc(net.w_g.of_mut(grad), &dag, &cache.hc);
    add_acc(net.b_g.of_mut(grad), &dag);
    let mut dhc = vec![0.0; hd + d];
    gemv_t_acc(net.w_g.of(w), &dag, &mut dhc);
    add_acc(&mut dh, &dhc[..hd]);
    add_acc(&mut dc, &dhc[hd..]);

    let v = net.v.of(w);
    let dalpha: Vec<f64> = notes.iter().map(|e| e.iter().zip(&dc).map(|(a, b)| a * b).sum()).collect();
    let mean: f64 = cache.alpha.iter().zip(&dalpha).map(|(a, b)| a * b).sum();
    let mut dq = vec![0.0; net.w_q.rows];
    let mut dnotes = Vec::with_capacity(notes.len());
    for (j, e) in notes.iter().enumerate() {
        let a = cache.alpha[j];
        let de = a * (dalpha[j] - mean);
        let mut dej: Vec<f64> = dc.iter().map(|x| a * x).collect();
        let uj = &cache.u[j];
        add_acc(net.v.of_mut(grad), &uj.iter().map(|x| de * x).collect::<Vec<_>>());
        let dpre: Vec<f64> = uj.iter().zip(v).map(|(x, vv)| de * vv * (1.0 - x * x)).collect();
        add_acc(&mut dq, &dpre);
        outer_acc(net.w_k.of_mut(grad), &dpre, e);
        gemv_t_acc(net.w_k.of(w), &dpre, &mut dej);
        dnotes.push(dej);
    }
    outer_acc(net.w_q.of_mut(grad), &dq, h);
    gemv_t_acc(net.w_q.of(w), &dq, &mut dh);
    (dh, dnotes)
}

/// Gated additive attention of query `h` over note embeddings.
pub fn gated_additive_attention(net: &FusionNet, w: &[f64], h: &[f64], notes: &[Vec<f64>]) -> Result<Vec<f64>> {
    if h.len() != net.hidden_dim() {
        return Err(Error::Dimension {
            expected: net.hidden_dim(),
            actual: h.len(),
        });
    }
    if let Some(e) = notes.iter().find(|e| e.len() != net.embed_dim()) {
        return Err(Error::Dimension {
            expected: net.embed_dim(),
            actual: e.len(),
        });
    }
    if w.len() != net.n_params {
        return Err(Error::Dimension {
            expected: net.n_params,
            actual: w.len(),
        });
    }
    Ok(attend(net, w, h, notes).0)
}

struct Forward {
    bi: BiCache,
    pool: PoolCache,
    note_emb: Vec<Vec<f64>>,
    attn: AttentionCache,
    z: Vec<f64>,
    logits: Vec<f64>,
}

impl FusionNet {
    fn note_embeddings(&self, w: &[f64], notes: &[Vec<u32>]) -> Vec<Vec<f64>> {
        let d = self.embed_dim();
        let table = self.embed.of(w);
        notes
            .iter()
            .map(|ids| {
                let mut e = vec![0.0; d];
                for &id in ids {
                    add_acc(&mut e, &table[id as usize * d..(id as usize + 1) * d]);
                }
                let n = ids.len() as f64;
                e.iter_mut().for_each(|x| *x /= n);
                e
            })
            .collect()
    }

    fn forward(&self, w: &[f64], x: &FusionInput) -> Forward {
        let bi = birnn_forward(w, &self.rnn, &x.vitals);
        let pool = pool_forward(w, &self.pool, &bi.outputs);
        let note_emb = self.note_embeddings(w, &x.notes);
        let (fused, attn) = attend(self, w, &pool.pooled, &note_emb);
        let mut s = self.b_s.of(w).to_vec();
        gemv_acc(self.w_s.of(w), &x.statics, &mut s);
        let (img, flag) = match &x.image {
            Some(f) => {
                let mut c = self.b_i.of(w).to_vec();
                gemv_acc(self.w_i.of(w), f, &mut c);
                (c, 0.0)
            }
            None => (vec![0.0; self.w_i.rows], 1.0),
        };
        let mut z = fused;
        z.extend_from_slice(&s);
        z.extend_from_slice(&img);
        z.push(flag);
        let mut logits = self.b_c.of(w).to_vec();
        gemv_acc(self.w_c.of(w), &z, &mut logits);
        Forward {
            bi,
            pool,
            note_emb,
            attn,
            z,
            logits,
        }
    }

    pub fn logits(&self, w: &[f64], x: &FusionInput) -> Vec<f64> {
        self.forward(w, x).logits
    }

    /// Cross-entropy at `label`, adding its gradient to `grad` when given.
    pub fn loss_grad(&self, w: &[f64], x: &FusionInput, label: usize, grad: Option<&mut [f64]>) -> f64 {
        let f = self.forward(w, x);
        let (loss, p) = ops::softmax_xent(&f.logits, label);
        let Some(grad) = grad else { return loss };
        let dlogits = ops::xent_grad(&p, label);
        add_acc(self.b_c.of_mut(grad), &dlogits);
        outer_acc(self.w_c.of_mut(grad), &dlogits, &f.z);
        let mut dz = vec![0.0; f.z.len()];
        gemv_t_acc(self.w_c.of(w), &dlogits, &mut dz);
        let hd = self.hidden_dim();
        let ds = &dz[hd..hd + self.w_s.rows];
        outer_acc(self.w_s.of_mut(grad), ds, &x.statics);
        add_acc(self.b_s.of_mut(grad), ds);
        if let Some(img) = &x.image {
            let di = &dz[hd + self.w_s.rows..hd + self.w_s.rows + self.w_i.rows];
            outer_acc(self.w_i.of_mut(grad), di, img);
            add_acc(self.b_i.of_mut(grad), di);
        }
        let (dh, dnotes) = attend_backward(self, w, &f.pool.pooled, &f.note_emb, &f.attn, &dz[..hd], grad);
        let d = self.embed_dim();
        let table = self.embed.of_mut(grad);
        for (ids, de) in x.notes.iter().zip(&dnotes) {
            let n = ids.len() as f64;
            for &id in ids {
                let row = &mut table[id as usize * d..(id as usize + 1) * d];
                for (g, v) in row.iter_mut().zip(de) {
                    *g += v / n;
                }
            }
        }
        let dhs = pool_backward(w, &self.pool, &f.bi.outputs, &f.pool, &dh, grad);
        birnn_backward(w, &self.rnn, &x.vitals, &f.bi, &dhs, grad);
        loss
    }
}

/// Standardization statistics and encodings fitted on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEncoder {
    pub hash_bits: u32,
    pub vital_mean: Vec<f64>,
    pub vital_std: Vec<f64>,
    pub numeric_mean: Vec<f64>,
    pub numeric_std: Vec<f64>,
    pub cardinalities: Vec<u32>,
    pub image_mean: Vec<f64>,
    pub image_std: Vec<f64>,
}

fn note_order(a: &crate::cohort::NoteDoc, b: &crate::cohort::NoteDoc) -> Ordering {
    a.timestamp.total_cmp(&b.timestamp).then_with(|| a.tokens.cmp(&b.tokens))
}

impl FusionEncoder {
    pub fn fit(records: &[&PatientRecord], schema: &Schema, hash_bits: u32) -> Self {
        let series: Vec<_> = records.iter().map(|r| r.vitals_series.clone()).collect();
        let (vital_mean, vital_std) = channel_stats(&series, schema.vital_channels.len());
        let numeric: Vec<Vec<f64>> = records.iter().map(|r| r.static_vector.numeric.clone()).collect();
        let (numeric_mean, numeric_std) = if schema.numeric.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            standardizer(&numeric)
        };
        let images: Vec<Vec<f64>> = records
            .iter()
            .filter_map(|r| r.image_feature_vector.as_ref().map(|f| f.0.clone()))
            .collect();
        let (image_mean, image_std) = if images.is_empty() {
            (vec![0.0; schema.image_dim], vec![1.0; schema.image_dim])
        } else {
            standardizer(&images)
        };
        FusionEncoder {
            hash_bits,
            vital_mean,
            vital_std,
            numeric_mean,
            numeric_std,
            cardinalities: schema.categorical.iter().map(|c| c.cardinality).collect(),
            image_mean,
            image_std,
        }
    }

    pub fn static_width(&self) -> usize {
        self.numeric_mean.len() + self.cardinalities.iter().map(|&c| c as usize).sum::<usize>()
    }

    pub fn encode(&self, r: &PatientRecord) -> Result<FusionInput> {
        if r.vitals_series.is_empty() {
            return Err(Error::ModalityAbsent("vitals"));
        }
        let vitals = prepare_series(&r.vitals_series, &self.vital_mean, &self.vital_std);
        let mask = (1u64 << self.hash_bits) - 1;
        let mut docs: Vec<&crate::cohort::NoteDoc> = r.notes.iter().filter(|n| !n.tokens.is_empty()).collect();
        docs.sort_by(|a, b| note_order(a, b));
        let notes = docs
            .iter()
            .map(|n| {
                n.tokens
                    .iter()
                    .map(|t| (fnv1a(format!("u:{t}").as_bytes()) & mask) as u32)
                    .collect()
            })
            .collect();
        let mut statics: Vec<f64> = r
            .static_vector
            .numeric
            .iter()
            .zip(&self.numeric_mean)
            .zip(&self.numeric_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect();
        for (&code, &card) in r.static_vector.categorical.iter().zip(&self.cardinalities) {
            statics.extend((0..card).map(|c| f64::from(u8::from(c == code))));
        }
        let image = match &r.image_feature_vector {
            Some(f) if f.0.len() != self.image_mean.len() => {
                return Err(Error::Dimension {
                    expected: self.image_mean.len(),
                    actual: f.0.len(),
                })
            }
            Some(f) => Some(
                f.0.iter()
                    .zip(&self.image_mean)
                    .zip(&self.image_std)
                    .map(|((x, m), s)| (x - m) / s)
                    .collect(),
            ),
            None => None,
        };
        Ok(FusionInput {
            vitals,
            notes,
            statics,
            image,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionFormerModel {
    pub format_version: u32,
    pub params: FusionFormerParams,
    pub n_classes: usize,
    pub encoder: FusionEncoder,
    pub net: FusionNet,
    pub weights: Vec<f64>,
}

impl FusionFormerModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: FusionFormerModel = serde_json::from_str(&text)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported fusionformer format_version {}",
                m.format_version
            )));
        }
        Ok(m)
    }
}

pub fn fusionformer_forward(model: &FusionFormerModel, record: &PatientRecord) -> Result<ProbVector> {
    let x = model.encoder.encode(record)?;
    Ok(softmax(&model.net.logits(&model.weights, &x)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_auc: f64,
    pub val_auc: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurves {
    pub points: Vec<CurvePoint>,
    pub best_epoch: usize,
}

impl TrainingCurves {
    pub fn best(&self) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_auc,val_auc,train_loss,val_loss\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                p.epoch, p.train_auc, p.val_auc, p.train_loss, p.val_loss
            ));
        }
        out
    }
}

struct FusionObjective<'a> {
    net: &'a FusionNet,
    xs: &'a [FusionInput],
    y: &'a [usize],
}

impl Objective for FusionObjective<'_> {
    fn sample_loss(&self, w: &[f64], i: usize, grad: Option<&mut [f64]>) -> f64 {
        self.net.loss_grad(w, &self.xs[i], self.y[i], grad)
    }
}

fn evaluate(net: &FusionNet, w: &[f64], xs: &[FusionInput], y: &[usize]) -> Result<(f64, f64)> {
    use rayon::prelude::*;
    let out: Vec<(f64, ProbVector)> = xs
        .par_iter()
        .zip(y)
        .map(|(x, &c)| ops::softmax_xent(&net.logits(w, x), c))
        .collect();
    let loss = out.iter().map(|(l, _)| l).sum::<f64>() / xs.len() as f64;
    let probs: Vec<ProbVector> = out.into_iter().map(|(_, p)| p).collect();
    Ok((auc_for(&probs, y)?, loss))
}

/// Train on `train` with early stopping on validation AUC.
pub fn train_fusionformer(
    train: &[&PatientRecord],
    y_train: &[usize],
    val: &[&PatientRecord],
    y_val: &[usize],
    n_classes: usize,
    schema: &Schema,
    params: &FusionFormerParams,
) -> Result<(FusionFormerModel, TrainingCurves)> {
    params.validate()?;
    if train.len() != y_train.len() || val.len() != y_val.len() {
        return Err(Error::InvalidInput("fusionformer: labels and records differ in length".into()));
    }
    for (part, y) in [("training", y_train), ("validation", y_val)] {
        if y.iter().any(|&c| c >= n_classes) {
            return Err(Error::InvalidInput(format!("fusionformer: {part} label outside {n_classes} classes")));
        }
        if y.windows(2).all(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!("fusionformer: degenerate {part} labels")));
        }
    }
    let encoder = FusionEncoder::fit(train, schema, params.hash_bits);
    let encode = |rs: &[&PatientRecord]| rs.iter().map(|r| encoder.encode(r)).collect::<Result<Vec<_>>>();
    let xs_train = encode(train)?;
    let xs_val = encode(val)?;
    let (net, layout) = FusionNet::new(
        schema.vital_channels.len(),
        encoder.static_width(),
        schema.image_dim,
        n_classes,
        params,
    );
    let init = layout.init(&mut rng::stream(params.seed, rng::streams::INIT));
    let obj = FusionObjective {
        net: &net,
        xs: &xs_train,
        y: y_train,
    };
    let idx: Vec<usize> = (0..xs_train.len()).collect();
    let mut points = Vec::new();
    let mut failure = None;
    let out = train_minibatch(&obj, init, &idx, &params.optimizer, params.seed, |w| {
        let scored = evaluate(&net, w, &xs_train, y_train).and_then(|t| Ok((t, evaluate(&net, w, &xs_val, y_val)?)));
        match scored {
            Ok(((train_auc, train_loss), (val_auc, val_loss))) => {
                points.push(CurvePoint {
                    epoch: points.len() + 1,
                    train_auc,
                    val_auc,
                    train_loss,
                    val_loss,
                });
                val_auc
            }
            Err(e) => {
                failure.get_or_insert(e);
                f64::NEG_INFINITY
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let curves = TrainingCurves {
        points,
        best_epoch: out.log.best_epoch,
    };
    let model = FusionFormerModel {
        format_version: FORMAT_VERSION,
        params: params.clone(),
        n_classes,
        encoder,
        net,
        weights: out.weights,
    };
    Ok((model, curves))
}

/// Train on a labelled cohort using an internal stratified 80/10/10 split;
/// the test part is left untouched.
pub fn train_fusionformer_on_cohort(
    cohort: &Cohort,
    task: Task,
    params: &FusionFormerParams,
) -> Result<(FusionFormerModel, TrainingCurves)> {
    let (train, val, _) = crate::cohort::split_cohort(cohort, (0.8, 0.1, 0.1), task, params.seed)?;
    let train_refs: Vec<&PatientRecord> = train.records.iter().collect();
    let val_refs: Vec<&PatientRecord> = val.records.iter().collect();
    train_fusionformer(
        &train_refs,
        &train.labels(task)?,
        &val_refs,
        &val.labels(task)?,
        task.n_classes(),
        &cohort.schema,
        params,
    )
}

/// Full-batch gradient of the mean loss, exposed for gradient checks.
pub fn fusion_loss_grad(net: &FusionNet, w: &[f64], xs: &[FusionInput], y: &[usize], l2: f64) -> (f64, Vec<f64>) {
    let obj = FusionObjective { net, xs, y };
    let idx: Vec<usize> = (0..xs.len()).collect();
    batch_loss_grad(&obj, w, &idx, l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::max_relative_error_at;
    use crate::synth::{generate_cohort, GenSpec};
    use rand::Rng as _;

    fn tiny() -> FusionFormerParams {
        FusionFormerParams {
            hidden: 2,
            attention: 3,
            embed_dim: 2,
            hash_bits: 3,
            embed_init: 0.5,
            static_dim: 2,
            vision_dim: 2,
            ..FusionFormerParams::default()
        }
    }

    fn random_input(r: &mut crate::rng::Rng, with_image: bool) -> FusionInput {
        FusionInput {
            vitals: (0..4).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect(),
            notes: vec![vec![0, 3, 5], vec![7], vec![2, 2]],
            statics: (0..3).map(|_| r.random_range(-1.0..1.0)).collect(),
            image: with_image.then(|| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()),
        }
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        let (net, layout) = FusionNet::new(2, 3, 2, 3, &tiny());
        for point in 0..5 {
            let mut r = rng::stream(21, point);
            let w = layout.init(&mut r);
            let xs = vec![random_input(&mut r, true), random_input(&mut r, false)];
            let y = [2, 0];
            let (_, g) = fusion_loss_grad(&net, &w, &xs, &y, 0.0);
            let err = max_relative_error_at(|p| fusion_loss_grad(&net, p, &xs, &y, 0.0).0, &w, &g, 1e-5, 0..w.len());
            assert!(err <= 1e-4, "point {point}: relative error {err}");
        }
    }

    #[test]
    fn identical_notes_give_that_context() {
        let (net, layout) = FusionNet::new(2, 3, 2, 2, &tiny());
        let w = layout.init(&mut rng::stream(1, 0));
        let e = vec![0.3, -0.7];
        let (_, cache) = attend(&net, &w, &[0.1, 0.2, -0.3, 0.4], &[e.clone(), e.clone(), e.clone()]);
        for (c, x) in cache.context.iter().zip(&e) {
            assert!((c - x).abs() < 1e-15);
        }
        assert!((cache.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(cache.gate.iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn zero_parameters_halve_the_query() {
        let (net, _) = FusionNet::new(2, 3, 2, 2, &tiny());
        let w = vec![0.0; net.n_params];
        let h = [0.4, -1.0, 2.0, 0.5];
        let fused = gated_additive_attention(&net, &w, &h, &[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        assert_eq!(fused, vec![0.2, -0.5, 1.0, 0.25]);
        let empty = gated_additive_attention(&net, &w, &h, &[]).unwrap();
        assert_eq!(empty, fused);
        assert!(gated_additive_attention(&net, &w, &h, &[vec![1.0]]).is_err());
    }

    /// Hand-set 2-note instance with 2-dimensional query and embeddings,
    /// recomputed term by term.
    #[test]
    fn hand_set_attention_matches_scripted_oracle() {
        let params = FusionFormerParams {
            hidden: 1,
            attention: 2,
            embed_dim: 2,
            ..tiny()
        };
        let (net, _) = FusionNet::new(1, 1, 1, 2, &params);
        let mut w = vec![0.0; net.n_params];
        net.w_q.of_mut(&mut w).copy_from_slice(&[0.5, -0.2, 0.1, 0.3]);
        net.w_k.of_mut(&mut w).copy_from_slice(&[1.0, 0.0, -0.5, 0.8]);
        net.v.of_mut(&mut w).copy_from_slice(&[0.7, -1.1]);
        net.w_g.of_mut(&mut w).copy_from_slice(&[0.2, 0.1, -0.3, 0.4, 0.0, 0.6, 0.5, -0.2]);
        net.b_g.of_mut(&mut w).copy_from_slice(&[0.05, -0.1]);
        net.w_v.of_mut(&mut w).copy_from_slice(&[1.5, -0.5, 0.25, 2.0]);
        let h = [0.6, -0.4];
        let e1 = [1.0, 0.5];
        let e2 = [-0.5, 2.0];

        let q = [0.5 * 0.6 - 0.2 * -0.4, 0.1 * 0.6 + 0.3 * -0.4];
        let score = |e: [f64; 2]| {
            let a0 = (q[0] + e[0]).tanh();
            let a1 = (q[1] - 0.5 * e[0] + 0.8 * e[1]).tanh();
            0.7 * a0 - 1.1 * a1
        };
        let (s1, s2) = (score(e1), score(e2));
        let a1 = 1.0 / (1.0 + (s2 - s1).exp());
        let a2 = 1.0 - a1;
        let c = [a1 * e1[0] + a2 * e2[0], a1 * e1[1] + a2 * e2[1]];
        let hc = [h[0], h[1], c[0], c[1]];
        let sg = |x: f64| 1.0 / (1.0 + (-x).exp());
        let g0 = sg(0.05 + 0.2 * hc[0] + 0.1 * hc[1] - 0.3 * hc[2] + 0.4 * hc[3]);
        let g1 = sg(-0.1 + 0.0 * hc[0] + 0.6 * hc[1] + 0.5 * hc[2] - 0.2 * hc[3]);
        let p0 = 1.5 * c[0] - 0.5 * c[1];
        let p1 = 0.25 * c[0] + 2.0 * c[1];
        let want = [g0 * h[0] + (1.0 - g0) * p0, g1 * h[1] + (1.0 - g1) * p1];

        let got = gated_additive_attention(&net, &w, &h, &[e1.to_vec(), e2.to_vec()]).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    /// Hand-set instance with no notes and a missing image, recomputed from
    /// the combiner formula.
    #[test]
    fn hand_set_forward_matches_scripted_oracle() {
        let (net, layout) = FusionNet::new(2, 3, 2, 2, &tiny());
        let w = layout.init(&mut rng::stream(33, 0));
        let mut r = rng::stream(34, 0);
        let mut x = random_input(&mut r, false);
        x.notes.clear();
        let bi = birnn_forward(&w, &net.rnn, &x.vitals);
        let h = pool_forward(&w, &net.pool, &bi.outputs).pooled;
        // Zero notes: c = 0 so the projection vanishes.
        let mut ag = net.b_g.of(&w).to_vec();
        let mut hc = h.clone();
        hc.extend([0.0, 0.0]);
        gemv_acc(net.w_g.of(&w), &hc, &mut ag);
        let fused: Vec<f64> = h.iter().zip(&ag).map(|(hv, a)| hv / (1.0 + (-a).exp())).collect();
        let mut s = net.b_s.of(&w).to_vec();
        gemv_acc(net.w_s.of(&w), &x.statics, &mut s);
        let z: Vec<f64> = fused.into_iter().chain(s).chain([0.0, 0.0, 1.0]).collect();
        let wc = net.w_c.of(&w);
        let bc = net.b_c.of(&w);
        let l: Vec<f64> = (0..2).map(|k| bc[k] + (0..z.len()).map(|j| wc[k * z.len() + j] * z[j]).sum::<f64>()).collect();
        let p1 = 1.0 / (1.0 + (l[0] - l[1]).exp());
        let got = softmax(&net.logits(&w, &x));
        assert!((got[1] - p1).abs() < 1e-12);
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_ignores_note_order_and_requires_vitals() {
        let spec = GenSpec::abx_default();
        let cohort = generate_cohort(&spec, 60, 5).unwrap();
        let refs: Vec<&PatientRecord> = cohort.records.iter().collect();
        let y = cohort.labels(Task::Antibiotic).unwrap();
        let params = FusionFormerParams {
            optimizer: OptimizerSettings {
                epochs: 2,
                ..FusionFormerParams::desk().optimizer
            },
            hash_bits: 8,
            ..FusionFormerParams::desk()
        };
        let (model, _) = train_fusionformer(&refs[..40], &y[..40], &refs[40..], &y[40..], 4, &cohort.schema, &params).unwrap();
        let mut rec = cohort.records.iter().find(|r| r.notes.len() >= 3).unwrap().clone();
        let a = fusionformer_forward(&model, &rec).unwrap();
        rec.notes.reverse();
        rec.notes.rotate_left(1);
        assert_eq!(a, fusionformer_forward(&model, &rec).unwrap());
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        rec.vitals_series.values.clear();
        rec.vitals_series.mask.clear();
        assert!(matches!(fusionformer_forward(&model, &rec), Err(Error::ModalityAbsent("vitals"))));
    }

    #[test]
    fn patience_zero_and_determinism() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 80, 9).unwrap();
        let params = FusionFormerParams {
            optimizer: OptimizerSettings {
                epochs: 8,
                patience: 0,
                ..FusionFormerParams::desk().optimizer
            },
            hash_bits: 8,
            ..FusionFormerParams::desk()
        };
        let (m1, c1) = train_fusionformer_on_cohort(&cohort, Task::Detection, &params).unwrap();
        let (m2, c2) = train_fusionformer_on_cohort(&cohort, Task::Detection, &params).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(m1.weights, m2.weights);
        // Stops at the first epoch whose validation AUC fails to improve.
        let vals: Vec<f64> = c1.points.iter().map(|p| p.val_auc).collect();
        let stop = vals.windows(2).position(|w| w[1] <= w[0]).map(|i| i + 2).unwrap_or(vals.len());
        assert_eq!(vals.len(), stop);
        assert!(c1.to_csv().starts_with("epoch,train_auc,val_auc,train_loss,val_loss\n"));
    }

    #[test]
    fn model_roundtrips_through_json() {
        let cohort = generate_cohort(&GenSpec::detection_default(), 50, 2).unwrap();
        let params = FusionFormerParams {
            optimizer: OptimizerSettings { epochs: 1, ..FusionFormerParams::desk().optimizer },
            hash_bits: 6,
            ..FusionFormerParams::desk()
        };
        let (m, _) = train_fusionformer_on_cohort(&cohort, Task::Detection, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ff.json");
        m.save(&path).unwrap();
        assert_eq!(FusionFormerModel::load(&path).unwrap(), m);
    }
}
