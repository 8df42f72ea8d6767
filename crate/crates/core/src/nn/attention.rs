//! Additive attention pooling over time:
//! `s_t = v . tanh(W h_t + b)`, `alpha = softmax(s)`, `pooled = sum_t alpha_t h_t`.

use serde::{Deserialize, Serialize};

use super::ops::{add_acc, gemv_acc, gemv_t_acc, outer_acc, softmax, Block, LayoutBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolBlocks {
    pub input: usize,
    pub attn: usize,
    pub w: Block,
    pub b: Block,
    pub v: Block,
}

impl PoolBlocks {
    pub fn new(l: &mut LayoutBuilder, input: usize, attn: usize) -> Self {
        PoolBlocks {
            input,
            attn,
            w: l.matrix(attn, input),
            b: l.vector(attn),
            v: l.matrix(attn, 1),
        }
    }
}

pub struct PoolCache {
    pub pooled: Vec<f64>,
    pub alpha: Vec<f64>,
    u: Vec<Vec<f64>>,
}

/// Attention scores before the softmax.
pub fn pool_scores(p: &[f64], blk: &PoolBlocks, hs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let v = blk.v.of(p);
    let mut scores = Vec::with_capacity(hs.len());
    let mut us = Vec::with_capacity(hs.len());
    for h in hs {
        let mut a = blk.b.of(p).to_vec();
        gemv_acc(blk.w.of(p), h, &mut a);
        let u: Vec<f64> = a.iter().map(|x| x.tanh()).collect();
        scores.push(u.iter().zip(v).map(|(a, b)| a * b).sum());
        us.push(u);
    }
    (scores, us)
}

pub fn pool_forward(p: &[f64], blk: &PoolBlocks, hs: &[Vec<f64>]) -> PoolCache {
    let (scores, u) = pool_scores(p, blk, hs);
    let alpha = softmax(&scores);
    let mut pooled = vec![0.0; blk.input];
    for (h, &a) in hs.iter().zip(&alpha) {
        for (o, x) in pooled.iter_mut().zip(h) {
            *o += a * x;
        }
    }
    PoolCache { pooled, alpha, u }
}

/// Returns the gradient w.r.t. each `h_t`.
pub fn pool_backward(
    p: &[f64],
    blk: &PoolBlocks,
    hs: &[Vec<f64>],
    cache: &PoolCache,
    d_pooled: &[f64],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    let v = blk.v.of(p);
    let d_alpha: Vec<f64> = hs
        .iter()
        .map(|h| h.iter().zip(d_pooled).map(|(a, b)| a * b).sum())
        .collect();
    let mean: f64 = cache.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
    let mut dhs = Vec::with_capacity(hs.len());
    for t in 0..hs.len() {
        let a = cache.alpha[t];
        let ds = a * (d_alpha[t] - mean);
        let mut dh: Vec<f64> = d_pooled.iter().map(|d| a * d).collect();
        let u = &cache.u[t];
        add_acc(blk.v.of_mut(grad), &u.iter().map(|x| ds * x).collect::<Vec<_>>());
        let dpre: Vec<f64> = u.iter().zip(v).map(|(x, vv)| ds * vv * (1.0 - x * x)).collect();
        outer_acc(blk.w.of_mut(grad), &dpre, &hs[t]);
        add_acc(blk.b.of_mut(grad), &dpre);
        gemv_t_acc(blk.w.of(p), &dpre, &mut dh);
        dhs.push(dh);
    }
    dhs
}
