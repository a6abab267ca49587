use rand::Rng;
use rand_distr::{Bernoulli, Distribution};

use super::attention::{standard_normal, Matrix};

/// `relu(X W1 + b1) [dropout] W2 + b2`. Biases are `1 × width` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    pub input: Matrix,
    pub pre_activation: Matrix,
    /// Post-ReLU, post-dropout hidden activations.
    pub hidden: Matrix,
    pub mask: Option<Matrix>,
}

fn add_row(m: &mut Matrix, bias: &Matrix) {
    for mut row in m.row_iter_mut() {
        row += bias.row(0);
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.ncols());
    for row in m.row_iter() {
        out += row;
    }
    out
}

/// Inverted-dropout mask: entries are `0` or `1/(1-rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Matrix {
    let keep = Bernoulli::new(1.0 - rate).expect("rate in [0, 1)");
    let scale = 1.0 / (1.0 - rate);
    Matrix::from_fn(rows, cols, |_, _| if keep.sample(rng) { scale } else { 0.0 })
}

impl FeedForwardParams {
    /// He-normal weights (variance `2/fan_in`), zero biases.
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w1 = standard_normal(dim, hidden, rng) * (2.0 / dim as f64).sqrt();
        let w2 = standard_normal(hidden, dim, rng) * (2.0 / hidden as f64).sqrt();
        FeedForwardParams {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn zeros(dim: usize, hidden: usize) -> Self {
        FeedForwardParams {
            w1: Matrix::zeros(dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, dim),
            b2: Matrix::zeros(1, dim),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, input: &Matrix, mask: Option<Matrix>) -> (Matrix, FeedForwardCache) {
        let mut pre = input * &self.w1;
        add_row(&mut pre, &self.b1);
        let mut hidden = pre.map(|v| v.max(0.0));
        if let Some(mask) = &mask {
            hidden.component_mul_assign(mask);
        }
        let mut out = &hidden * &self.w2;
        add_row(&mut out, &self.b2);
        (
            out,
            FeedForwardCache {
                input: input.clone(),
                pre_activation: pre,
                hidden,
                mask,
            },
        )
    }

    pub fn backward(&self, cache: &FeedForwardCache, d_out: &Matrix, grads: &mut FeedForwardParams) -> Matrix {
        grads.w2 += cache.hidden.tr_mul(d_out);
        grads.b2 += column_sums(d_out);
        let mut d_hidden = d_out * self.w2.transpose();
        if let Some(mask) = &cache.mask {
            d_hidden.component_mul_assign(mask);
        }
        let d_pre = d_hidden.zip_map(&cache.pre_activation, |g, z| if z > 0.0 { g } else { 0.0 });
        grads.w1 += cache.input.tr_mul(&d_pre);
        grads.b1 += column_sums(&d_pre);
        &d_pre * self.w1.transpose()
    }
}
