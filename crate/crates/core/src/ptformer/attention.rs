//! Scaled dot-product attention with hand-written backward passes.
//!
//! Scores are scaled by `1/sqrt(dim)` with `dim` the model width, also for
//! the per-head projections. There are no positional encodings.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Matrix = DMatrix<f64>;

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Gradient of the scores given the softmax output and the gradient of the
/// weights: `dS = A ∘ (dA − rowsum(dA ∘ A))`.
fn softmax_rows_backward(weights: &Matrix, d_weights: &Matrix) -> Matrix {
    let mut d_scores = weights.component_mul(d_weights);
    for (r, mut row) in d_scores.row_iter_mut().enumerate() {
        let dot: f64 = row.iter().sum();
        for (c, v) in row.iter_mut().enumerate() {
            *v -= weights[(r, c)] * dot;
        }
    }
    d_scores
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn scale_for(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

/// Per-head projections, each `dim × dim/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Vec<Matrix>,
    pub w_k: Vec<Matrix>,
    pub w_v: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights, rows sum to one.
    pub weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct SelfAttentionCache {
    pub input: Matrix,
    pub heads: Vec<HeadCache>,
}

impl AttentionParams {
    /// Entries drawn i.i.d. from N(0, 1).
    pub fn init(dim: usize, num_heads: usize, rng: &mut impl Rng) -> Self {
        let head_dim = dim / num_heads;
        let mut draw = || standard_normal(dim, head_dim, rng);
        let mut w_q = Vec::with_capacity(num_heads);
        let mut w_k = Vec::with_capacity(num_heads);
        let mut w_v = Vec::with_capacity(num_heads);
        for _ in 0..num_heads {
            w_q.push(draw());
            w_k.push(draw());
            w_v.push(draw());
        }
        AttentionParams { w_q, w_k, w_v }
    }

    pub fn zeros(dim: usize, num_heads: usize) -> Self {
        let z = || vec![Matrix::zeros(dim, dim / num_heads); num_heads];
        AttentionParams {
            w_q: z(),
            w_k: z(),
            w_v: z(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn dim(&self) -> usize {
        self.w_q[0].nrows()
    }

    /// Multi-head self-attention; head outputs are concatenated along the
    /// feature axis, so the output has the input's shape.
    pub fn forward(&self, input: &Matrix) -> (Matrix, SelfAttentionCache) {
        let dim = input.ncols();
        let scale = scale_for(dim);
        let head_dim = self.w_q[0].ncols();
        let mut out = Matrix::zeros(input.nrows(), head_dim * self.num_heads());
        let mut heads = Vec::with_capacity(self.num_heads());
        for h in 0..self.num_heads() {
            let q = input * &self.w_q[h];
            let k = input * &self.w_k[h];
            let v = input * &self.w_v[h];
            let weights = softmax_rows(&((&q * k.transpose()) * scale));
            out.columns_mut(h * head_dim, head_dim).copy_from(&(&weights * &v));
            heads.push(HeadCache { q, k, v, weights });
        }
        (
            out,
            SelfAttentionCache {
                input: input.clone(),
                heads,
            },
        )
    }

    /// Accumulates parameter gradients into `grads`, returns the input gradient.
    pub fn backward(&self, cache: &SelfAttentionCache, d_out: &Matrix, grads: &mut AttentionParams) -> Matrix {
        let x = &cache.input;
        let scale = scale_for(x.ncols());
        let head_dim = self.w_q[0].ncols();
        let mut d_x = Matrix::zeros(x.nrows(), x.ncols());
        for (h, head) in cache.heads.iter().enumerate() {
            let d_head = d_out.columns(h * head_dim, head_dim).clone_owned();
            let d_weights = &d_head * head.v.transpose();
            let d_v = head.weights.tr_mul(&d_head);
            let d_scores = softmax_rows_backward(&head.weights, &d_weights) * scale;
            let d_q = &d_scores * &head.k;
            let d_k = d_scores.tr_mul(&head.q);
            grads.w_q[h] += x.tr_mul(&d_q);
            grads.w_k[h] += x.tr_mul(&d_k);
            grads.w_v[h] += x.tr_mul(&d_v);
            d_x += &d_q * self.w_q[h].transpose()
                + &d_k * self.w_k[h].transpose()
                + &d_v * self.w_v[h].transpose();
        }
        d_x
    }
}

/// Single-head cross-attention: queries from the patch, keys and values from
/// the explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone)]
pub struct CrossAttentionCache {
    pub query_input: Matrix,
    pub context_input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub weights: Matrix,
}

impl CrossAttentionParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let w_q = standard_normal(dim, dim, rng);
        let w_k = standard_normal(dim, dim, rng);
        let w_v = standard_normal(dim, dim, rng);
        CrossAttentionParams { w_q, w_k, w_v }
    }

    pub fn zeros(dim: usize) -> Self {
        CrossAttentionParams {
            w_q: Matrix::zeros(dim, dim),
            w_k: Matrix::zeros(dim, dim),
            w_v: Matrix::zeros(dim, dim),
        }
    }

    /// `softmax(P W_q (X W_k)^T / sqrt(dim)) X W_v`, shape `(rows(P), dim)`.
    pub fn forward(&self, patch: &Matrix, context: &Matrix) -> (Matrix, CrossAttentionCache) {
        let scale = scale_for(patch.ncols());
        let q = patch * &self.w_q;
        let k = context * &self.w_k;
        let v = context * &self.w_v;
        let weights = softmax_rows(&((&q * k.transpose()) * scale));
        let out = &weights * &v;
        (
            out,
            CrossAttentionCache {
                query_input: patch.clone(),
                context_input: context.clone(),
                q,
                k,
                v,
                weights,
            },
        )
    }

    /// Returns `(d_patch, d_context)`.
    pub fn backward(
        &self,
        cache: &CrossAttentionCache,
        d_out: &Matrix,
        grads: &mut CrossAttentionParams,
    ) -> (Matrix, Matrix) {
        let scale = scale_for(cache.query_input.ncols());
        let d_weights = d_out * cache.v.transpose();
        let d_v = cache.weights.tr_mul(d_out);
        let d_scores = softmax_rows_backward(&cache.weights, &d_weights) * scale;
        let d_q = &d_scores * &cache.k;
        let d_k = d_scores.tr_mul(&cache.q);
        grads.w_q += cache.query_input.tr_mul(&d_q);
        grads.w_k += cache.context_input.tr_mul(&d_k);
        grads.w_v += cache.context_input.tr_mul(&d_v);
        let d_patch = &d_q * self.w_q.transpose();
        let d_context = &d_k * self.w_k.transpose() + &d_v * self.w_v.transpose();
        (d_patch, d_context)
    }
}
