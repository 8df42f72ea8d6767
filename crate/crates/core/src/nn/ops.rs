//! Dense kernels on row-major slices, a parameter layout, and the softmax
//! cross-entropy head.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// A `rows x cols` row-major block inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn of<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.len()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.offset..self.offset + self.len()]
    }
}

/// Allocates consecutive blocks.
#[derive(Debug, Clone, Default)]
pub struct LayoutBuilder {
    len: usize,
    weights: Vec<(Block, f64)>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A weight matrix, initialized uniformly with Glorot scale.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> Block {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(rows, cols, s)
    }

    /// A matrix initialized uniformly on `[-scale, scale)`.
    pub fn uniform(&mut self, rows: usize, cols: usize, scale: f64) -> Block {
        let b = self.push(rows, cols);
        self.weights.push((b, scale));
        b
    }

    /// A bias vector, initialized to zero.
    pub fn vector(&mut self, len: usize) -> Block {
        self.push(len, 1)
    }

    fn push(&mut self, rows: usize, cols: usize) -> Block {
        let b = Block {
            offset: self.len,
            rows,
            cols,
        };
        self.len += rows * cols;
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.len];
        for &(b, s) in &self.weights {
            if s == 0.0 {
                continue;
            }
            for x in b.of_mut(&mut p) {
                *x = rng.random_range(-s..s);
            }
        }
        p
    }
}

/// `out += W x` for `W` of shape `out.len() x x.len()`.
pub fn gemv_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dx += W^T dy`.
pub fn gemv_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (x, a) in dx.iter_mut().zip(row) {
            *x += a * d;
        }
    }
}

/// `dW += dy x^T`.
pub fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (g, a) in row.iter_mut().zip(x) {
            *g += d * a;
        }
    }
}

pub fn add_acc(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    crate::synth::logistic(x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Cross-entropy of `softmax(logits)` at `label`; returns the loss and the
/// probabilities. The logit gradient is `p - onehot(label)`.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    let p = logits.iter().map(|&l| (l - lse).exp()).collect();
    (lse - logits[label], p)
}

pub fn xent_grad(p: &[f64], label: usize) -> Vec<f64> {
    let mut d = p.to_vec();
    d[label] -= 1.0;
    d
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
