//! Fusion of the four modality embeddings into one vector per sample.
//!
//! Per sample:
//!
//! 1. shared multi-head self-attention over explanation, description and
//!    instruction;
//! 2. cross-attention with patch queries against the attended explanation;
//! 3. a separate feed-forward block on each of the three streams (dropout
//!    inside the block during training);
//! 4. mean-pooling over the sequence axis and concatenation, giving a
//!    vector of length `3 * dim`.
//!
//! The patch embedding enters cross-attention directly.

pub mod attention;
pub mod feedforward;

use nalgebra::DVector;
use rand::Rng;

use crate::rng;
use crate::types::{EmbeddingMatrix, FusedEmbedding, HyperParams};

pub use attention::{softmax_rows, AttentionParams, CrossAttentionParams, Matrix};
pub use feedforward::FeedForwardParams;

use attention::{CrossAttentionCache, SelfAttentionCache};
use feedforward::{dropout_mask, FeedForwardCache};

/// The four embedded inputs of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInputs {
    pub sample_id: String,
    pub patch: EmbeddingMatrix,
    pub explanation: EmbeddingMatrix,
    pub description: EmbeddingMatrix,
    pub instruction: EmbeddingMatrix,
}

/// Visits every trainable matrix under a stable name.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)>;
}

impl ParamTensors for AttentionParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (kind, mats) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            for (h, m) in mats.iter().enumerate() {
                out.push((format!("{kind}.{h}"), m));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (kind, mats) in [("w_q", &mut self.w_q), ("w_k", &mut self.w_k), ("w_v", &mut self.w_v)] {
            for (h, m) in mats.iter_mut().enumerate() {
                out.push((format!("{kind}.{h}"), m));
            }
        }
        out
    }
}

impl ParamTensors for CrossAttentionParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![("w_q".into(), &self.w_q), ("w_k".into(), &self.w_k), ("w_v".into(), &self.w_v)]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
        ]
    }
}

impl ParamTensors for FeedForwardParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Matrix)>) -> impl Iterator<Item = (String, &'a Matrix)> + use<'a> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Matrix)>,
) -> impl Iterator<Item = (String, &'a mut Matrix)> + use<'a> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

/// Trainable parameters (or their gradients) of the fusion stack.
#[derive(Debug, Clone, PartialEq)]
pub struct PtFormerParams {
    /// Shared by the three text streams.
    pub self_attn: AttentionParams,
    pub cross_attn: CrossAttentionParams,
    pub ff_pa_ex: FeedForwardParams,
    pub ff_desc: FeedForwardParams,
    pub ff_inst: FeedForwardParams,
}

pub type PtFormerGrads = PtFormerParams;

impl PtFormerParams {
    pub fn zeros(dim: usize, num_heads: usize, ff_hidden: usize) -> Self {
        PtFormerParams {
            self_attn: AttentionParams::zeros(dim, num_heads),
            cross_attn: CrossAttentionParams::zeros(dim),
            ff_pa_ex: FeedForwardParams::zeros(dim, ff_hidden),
            ff_desc: FeedForwardParams::zeros(dim, ff_hidden),
            ff_inst: FeedForwardParams::zeros(dim, ff_hidden),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.num_heads(), self.ff_hidden())
    }

    pub fn dim(&self) -> usize {
        self.cross_attn.w_q.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.self_attn.num_heads()
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_pa_ex.hidden()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, a) in self.tensors_mut() {
            *a *= factor;
        }
    }
}

impl ParamTensors for PtFormerParams {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefixed("self_attn", self.self_attn.tensors())
            .chain(prefixed("cross_attn", self.cross_attn.tensors()))
            .chain(prefixed("ff_pa_ex", self.ff_pa_ex.tensors()))
            .chain(prefixed("ff_desc", self.ff_desc.tensors()))
            .chain(prefixed("ff_inst", self.ff_inst.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("self_attn", self.self_attn.tensors_mut())
            .chain(prefixed_mut("cross_attn", self.cross_attn.tensors_mut()))
            .chain(prefixed_mut("ff_pa_ex", self.ff_pa_ex.tensors_mut()))
            .chain(prefixed_mut("ff_desc", self.ff_desc.tensors_mut()))
            .chain(prefixed_mut("ff_inst", self.ff_inst.tensors_mut()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtFormerState {
    pub params: PtFormerParams,
    pub dropout_rate: f64,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    pub sa_explanation: SelfAttentionCache,
    pub sa_description: SelfAttentionCache,
    pub sa_instruction: SelfAttentionCache,
    pub cross: CrossAttentionCache,
    pub ff_pa_ex: FeedForwardCache,
    pub ff_desc: FeedForwardCache,
    pub ff_inst: FeedForwardCache,
}

fn mean_pool(m: &Matrix) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn unpool(grad: &DVector<f64>, rows: usize) -> Matrix {
    let n = rows as f64;
    Matrix::from_fn(rows, grad.len(), |_, c| grad[c] / n)
}

/// Default feed-forward inner width.
pub fn default_ff_hidden(dim: usize) -> usize {
    dim
}

impl PtFormerState {
    /// Attention matrices i.i.d. N(0, 1); feed-forward weights He-normal with
    /// zero biases. Deterministic per seed.
    pub fn init(hp: &HyperParams, ff_hidden: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, rng::INIT, 0);
        let dim = hp.dim;
        let self_attn = AttentionParams::init(dim, hp.num_heads, &mut rng);
        let cross_attn = CrossAttentionParams::init(dim, &mut rng);
        let ff_pa_ex = FeedForwardParams::init(dim, ff_hidden, &mut rng);
        let ff_desc = FeedForwardParams::init(dim, ff_hidden, &mut rng);
        let ff_inst = FeedForwardParams::init(dim, ff_hidden, &mut rng);
        PtFormerState {
            params: PtFormerParams {
                self_attn,
                cross_attn,
                ff_pa_ex,
                ff_desc,
                ff_inst,
            },
            dropout_rate: hp.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn fused_len(&self) -> usize {
        3 * self.dim()
    }

    /// Forward pass. Dropout is applied when `dropout_rng` is given.
    pub fn forward<R: Rng>(&self, inputs: &SampleInputs, mut dropout_rng: Option<&mut R>) -> (DVector<f64>, FuseCache) {
        let p = &self.params;
        let rate = self.dropout_rate;
        let hidden = p.ff_hidden();
        let mut mask = |rows: usize| match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => Some(dropout_mask(rows, hidden, rate, rng)),
            _ => None,
        };

        let (ex_hat, sa_explanation) = p.self_attn.forward(inputs.explanation.values());
        let (desc_hat, sa_description) = p.self_attn.forward(inputs.description.values());
        let (inst_hat, sa_instruction) = p.self_attn.forward(inputs.instruction.values());
        let (pa_ex, cross) = p.cross_attn.forward(inputs.patch.values(), &ex_hat);

        let (y_pa_ex, ff_pa_ex) = p.ff_pa_ex.forward(&pa_ex, mask(pa_ex.nrows()));
        let (y_desc, ff_desc) = p.ff_desc.forward(&desc_hat, mask(desc_hat.nrows()));
        let (y_inst, ff_inst) = p.ff_inst.forward(&inst_hat, mask(inst_hat.nrows()));

        let dim = self.dim();
        let mut fused = DVector::zeros(3 * dim);
        fused.rows_mut(0, dim).copy_from(&mean_pool(&y_pa_ex));
        fused.rows_mut(dim, dim).copy_from(&mean_pool(&y_desc));
        fused.rows_mut(2 * dim, dim).copy_from(&mean_pool(&y_inst));
        (
            fused,
            FuseCache {
                sa_explanation,
                sa_description,
                sa_instruction,
                cross,
                ff_pa_ex,
                ff_desc,
                ff_inst,
            },
        )
    }

    /// Evaluation-mode fusion (no dropout).
    pub fn fuse(&self, inputs: &SampleInputs) -> FusedEmbedding {
        let (values, _) = self.forward::<rng::StreamRng>(inputs, None);
        FusedEmbedding::new(inputs.sample_id.clone(), values)
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(&self, cache: &FuseCache, d_fused: &DVector<f64>, grads: &mut PtFormerGrads) {
        let p = &self.params;
        let dim = self.dim();
        let slot = |k: usize| d_fused.rows(k * dim, dim).clone_owned();

        let d_pa_ex = p.ff_pa_ex.backward(
            &cache.ff_pa_ex,
            &unpool(&slot(0), cache.ff_pa_ex.input.nrows()),
            &mut grads.ff_pa_ex,
        );
        let (_, d_ex_hat) = p.cross_attn.backward(&cache.cross, &d_pa_ex, &mut grads.cross_attn);
        p.self_attn.backward(&cache.sa_explanation, &d_ex_hat, &mut grads.self_attn);

        let d_desc_hat = p.ff_desc.backward(
            &cache.ff_desc,
            &unpool(&slot(1), cache.ff_desc.input.nrows()),
            &mut grads.ff_desc,
        );
        p.self_attn.backward(&cache.sa_description, &d_desc_hat, &mut grads.self_attn);

        let d_inst_hat = p.ff_inst.backward(
            &cache.ff_inst,
            &unpool(&slot(2), cache.ff_inst.input.nrows()),
            &mut grads.ff_inst,
        );
        p.self_attn.backward(&cache.sa_instruction, &d_inst_hat, &mut grads.self_attn);
    }
}

/// Evaluation-mode gradients of `Σ_j upstream_j · fuse(batch_j)` with
/// respect to every parameter.
pub fn pt_former_gradients(state: &PtFormerState, batch: &[SampleInputs], upstream: &[DVector<f64>]) -> PtFormerGrads {
    assert_eq!(batch.len(), upstream.len(), "one upstream gradient per sample");
    let mut grads = state.params.zeros_like();
    for (inputs, d_fused) in batch.iter().zip(upstream) {
        let (_, cache) = state.forward::<rng::StreamRng>(inputs, None);
        state.backward(&cache, d_fused, &mut grads);
    }
    grads
}

/// Fusion without the attention stack: `[mean(patch ∪ explanation) ;
/// mean(description) ; mean(instruction)]`, still `3 * dim` long. The first
/// slot averages the pooled patch and explanation vectors.
pub fn pooled_concat(inputs: &SampleInputs) -> FusedEmbedding {
    let dim = inputs.patch.dim();
    let mut fused = DVector::zeros(3 * dim);
    let first = (mean_pool(inputs.patch.values()) + mean_pool(inputs.explanation.values())) * 0.5;
    fused.rows_mut(0, dim).copy_from(&first);
    fused.rows_mut(dim, dim).copy_from(&mean_pool(inputs.description.values()));
    fused.rows_mut(2 * dim, dim).copy_from(&mean_pool(inputs.instruction.values()));
    FusedEmbedding::new(inputs.sample_id.clone(), fused)
}
