use nalgebra::DVector;
use rand::Rng;

use crate::ptformer::attention::standard_normal;
use crate::ptformer::{Matrix, ParamTensors};

/// Logistic head over the fused vector: `σ(wᵀe + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// `fused_len × 1`.
    pub w: Matrix,
    /// `1 × 1`.
    pub b: Matrix,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ClassifierParams {
    pub fn zeros(fused_len: usize) -> Self {
        ClassifierParams {
            w: Matrix::zeros(fused_len, 1),
            b: Matrix::zeros(1, 1),
        }
    }

    /// Glorot-normal weights `N(0, 1/fused_len)`, zero bias.
    pub fn init(fused_len: usize, rng: &mut impl Rng) -> Self {
        ClassifierParams {
            w: standard_normal(fused_len, 1, rng) / (fused_len as f64).sqrt(),
            b: Matrix::zeros(1, 1),
        }
    }

    pub fn from_parts(w: &[f64], b: f64) -> Self {
        ClassifierParams {
            w: Matrix::from_column_slice(w.len(), 1, w),
            b: Matrix::from_element(1, 1, b),
        }
    }

    pub fn bias(&self) -> f64 {
        self.b[(0, 0)]
    }

    pub fn logit(&self, e: &DVector<f64>) -> f64 {
        assert_eq!(e.len(), self.w.nrows(), "fused length must match classifier rows");
        self.w.column(0).dot(e) + self.bias()
    }
}

impl ParamTensors for ClassifierParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

pub fn predict_probability(e: &DVector<f64>, c: &ClassifierParams) -> f64 {
    sigmoid(c.logit(e))
}
