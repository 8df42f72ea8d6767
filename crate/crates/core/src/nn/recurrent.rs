//! GRU and LSTM layers with backpropagation through time, plus a
//! bidirectional wrapper.

use serde::{Deserialize, Serialize};

use super::ops::{add_acc, gemv_acc, gemv_t_acc, outer_acc, sigmoid, Block, LayoutBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Gru,
    Lstm,
}

impl CellType {
    fn gates(self) -> usize {
        match self {
            CellType::Gru => 3,
            CellType::Lstm => 4,
        }
    }
}

/// Parameter blocks of one recurrent direction. Gate order is `[z, r, n]`
/// for GRU and `[i, f, g, o]` for LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RnnBlocks {
    pub cell: CellType,
    pub input: usize,
    pub hidden: usize,
    pub w: Block,
    pub u: Block,
    pub b: Block,
    /// Recurrent bias of the GRU candidate; empty for LSTM.
    pub bu: Block,
}

impl RnnBlocks {
    pub fn new(l: &mut LayoutBuilder, cell: CellType, input: usize, hidden: usize) -> Self {
        let g = cell.gates();
        RnnBlocks {
            cell,
            input,
            hidden,
            w: l.matrix(g * hidden, input),
            u: l.matrix(g * hidden, hidden),
            b: l.vector(g * hidden),
            bu: l.vector(if cell == CellType::Gru { hidden } else { 0 }),
        }
    }
}

/// Per-step activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Gate activations, `gates * hidden`.
    act: Vec<f64>,
    /// GRU: `U_n h + b_u`; LSTM: `tanh(c)`.
    aux: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SeqCache {
    pub outputs: Vec<Vec<f64>>,
    steps: Vec<StepCache>,
}

/// Run one direction over `xs` from a zero state.
pub fn rnn_forward(p: &[f64], blk: &RnnBlocks, xs: &[Vec<f64>]) -> SeqCache {
    let hd = blk.hidden;
    let g = blk.cell.gates();
    let w = blk.w.of(p);
    let u = blk.u.of(p);
    let b = blk.b.of(p);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut outputs = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let mut a = b.to_vec();
        gemv_acc(w, x, &mut a);
        let mut ah = vec![0.0; g * hd];
        gemv_acc(u, &h, &mut ah);
        match blk.cell {
            CellType::Gru => {
                let bu = blk.bu.of(p);
                let mut act = vec![0.0; 3 * hd];
                let mut hn = vec![0.0; hd];
                let mut h_new = vec![0.0; hd];
                for k in 0..hd {
                    let z = sigmoid(a[k] + ah[k]);
                    let r = sigmoid(a[hd + k] + ah[hd + k]);
                    hn[k] = ah[2 * hd + k] + bu[k];
                    let n = (a[2 * hd + k] + r * hn[k]).tanh();
                    act[k] = z;
                    act[hd + k] = r;
                    act[2 * hd + k] = n;
                    h_new[k] = (1.0 - z) * n + z * h[k];
                }
                steps.push(StepCache {
                    h_prev: std::mem::replace(&mut h, h_new),
                    c_prev: Vec::new(),
                    act,
                    aux: hn,
                });
            }
            CellType::Lstm => {
                let mut act = vec![0.0; 4 * hd];
                let mut tc = vec![0.0; hd];
                let mut h_new = vec![0.0; hd];
                let mut c_new = vec![0.0; hd];
                for k in 0..hd {
                    let i = sigmoid(a[k] + ah[k]);
                    let f = sigmoid(a[hd + k] + ah[hd + k]);
                    let gg = (a[2 * hd + k] + ah[2 * hd + k]).tanh();
                    let o = sigmoid(a[3 * hd + k] + ah[3 * hd + k]);
                    act[k] = i;
                    act[hd + k] = f;
                    act[2 * hd + k] = gg;
                    act[3 * hd + k] = o;
                    c_new[k] = f * c[k] + i * gg;
                    tc[k] = c_new[k].tanh();
                    h_new[k] = o * tc[k];
                }
                steps.push(StepCache {
                    h_prev: std::mem::replace(&mut h, h_new),
                    c_prev: std::mem::replace(&mut c, c_new),
                    act,
                    aux: tc,
                });
            }
        }
        outputs.push(h.clone());
    }
    SeqCache { outputs, steps }
}

/// Backpropagate `d_out[t]` (gradient w.r.t. output `t`) through the
/// sequence. Accumulates parameter gradients into `grad` and returns the
/// gradient w.r.t. each input.
pub fn rnn_backward(
    p: &[f64],
    blk: &RnnBlocks,
    xs: &[Vec<f64>],
    cache: &SeqCache,
    d_out: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    let hd = blk.hidden;
    let g = blk.cell.gates();
    let w = blk.w.of(p);
    let u = blk.u.of(p);
    let mut dxs = vec![vec![0.0; blk.input]; xs.len()];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = vec![0.0; g * hd];
    let mut dah = vec![0.0; g * hd];
    for t in (0..xs.len()).rev() {
        let st = &cache.steps[t];
        let mut dh = d_out[t].clone();
        add_acc(&mut dh, &dh_next);
        let mut dh_prev = vec![0.0; hd];
        match blk.cell {
            CellType::Gru => {
                let mut dbu = vec![0.0; hd];
                for k in 0..hd {
                    let (z, r, n) = (st.act[k], st.act[hd + k], st.act[2 * hd + k]);
                    let dn = dh[k] * (1.0 - z);
                    let dz = dh[k] * (st.h_prev[k] - n);
                    dh_prev[k] = dh[k] * z;
                    let dan = dn * (1.0 - n * n);
                    let dr = dan * st.aux[k];
                    let dhn = dan * r;
                    let daz = dz * z * (1.0 - z);
                    let dar = dr * r * (1.0 - r);
                    da[k] = daz;
                    da[hd + k] = dar;
                    da[2 * hd + k] = dan;
                    dah[k] = daz;
                    dah[hd + k] = dar;
                    dah[2 * hd + k] = dhn;
                    dbu[k] = dhn;
                }
                add_acc(blk.bu.of_mut(grad), &dbu);
                outer_acc(blk.u.of_mut(grad), &dah, &st.h_prev);
                gemv_t_acc(u, &dah, &mut dh_prev);
            }
            CellType::Lstm => {
                for k in 0..hd {
                    let (i, f, gg, o) = (st.act[k], st.act[hd + k], st.act[2 * hd + k], st.act[3 * hd + k]);
                    let tc = st.aux[k];
                    let dout = dh[k] * tc;
                    let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
                    let di = dc * gg;
                    let dg = dc * i;
                    let df = dc * st.c_prev[k];
                    dc_next[k] = dc * f;
                    da[k] = di * i * (1.0 - i);
                    da[hd + k] = df * f * (1.0 - f);
                    da[2 * hd + k] = dg * (1.0 - gg * gg);
                    da[3 * hd + k] = dout * o * (1.0 - o);
                }
                outer_acc(blk.u.of_mut(grad), &da, &st.h_prev);
                gemv_t_acc(u, &da, &mut dh_prev);
            }
        }
        outer_acc(blk.w.of_mut(grad), &da, &xs[t]);
        add_acc(blk.b.of_mut(grad), &da);
        gemv_t_acc(w, &da, &mut dxs[t]);
        dh_next = dh_prev;
    }
    dxs
}

/// Forward and backward directions whose outputs are concatenated per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiRnnBlocks {
    pub fwd: RnnBlocks,
    pub bwd: RnnBlocks,
}

impl BiRnnBlocks {
    pub fn new(l: &mut LayoutBuilder, cell: CellType, input: usize, hidden: usize) -> Self {
        BiRnnBlocks {
            fwd: RnnBlocks::new(l, cell, input, hidden),
            bwd: RnnBlocks::new(l, cell, input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }
}

pub struct BiCache {
    pub outputs: Vec<Vec<f64>>,
    fwd: SeqCache,
    bwd: SeqCache,
    reversed: Vec<Vec<f64>>,
}

pub fn birnn_forward(p: &[f64], blk: &BiRnnBlocks, xs: &[Vec<f64>]) -> BiCache {
    let fwd = rnn_forward(p, &blk.fwd, xs);
    let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
    let bwd = rnn_forward(p, &blk.bwd, &reversed);
    let t_len = xs.len();
    let outputs = (0..t_len)
        .map(|t| {
            let mut o = fwd.outputs[t].clone();
            o.extend_from_slice(&bwd.outputs[t_len - 1 - t]);
            o
        })
        .collect();
    BiCache {
        outputs,
        fwd,
        bwd,
        reversed,
    }
}

pub fn birnn_backward(
    p: &[f64],
    blk: &BiRnnBlocks,
    xs: &[Vec<f64>],
    cache: &BiCache,
    d_out: &[Vec<f64>],
    grad: &mut [f64],
) -> Vec<Vec<f64>> {
    let hd = blk.fwd.hidden;
    let t_len = xs.len();
    let d_f: Vec<Vec<f64>> = d_out.iter().map(|d| d[..hd].to_vec()).collect();
    let d_b: Vec<Vec<f64>> = (0..t_len).map(|t| d_out[t_len - 1 - t][hd..].to_vec()).collect();
    let mut dx = rnn_backward(p, &blk.fwd, xs, &cache.fwd, &d_f, grad);
    let dx_rev = rnn_backward(p, &blk.bwd, &cache.reversed, &cache.bwd, &d_b, grad);
    for t in 0..t_len {
        add_acc(&mut dx[t], &dx_rev[t_len - 1 - t]);
    }
    dx
}
