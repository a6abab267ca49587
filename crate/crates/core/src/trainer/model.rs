use nalgebra::DVector;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::classifier::{predict_probability, ClassifierParams};
use super::loss::{bce_logit_grad, bce_loss, combined_loss, LossBlend};
use crate::ptformer::{pooled_concat, FuseCache, Matrix, ParamTensors, PtFormerGrads, PtFormerState, SampleInputs};
use crate::rng::{self, StreamRng};
use crate::sbcl::{mine_triplets, triplet_objective, AnchorMode, Triplet};
use crate::types::{HyperParams, Label};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    PtFormer,
    /// Plain pooled concatenation; the attention stack is bypassed and frozen.
    PooledConcat,
}

/// Fusion stack plus logistic head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub ptformer: PtFormerState,
    pub classifier: ClassifierParams,
    pub fusion: FusionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub ptformer: PtFormerGrads,
    pub classifier: ClassifierParams,
}

fn prefix_all<'a, M>(prefix: &str, items: Vec<(String, M)>) -> impl Iterator<Item = (String, M)> + use<'a, M> {
    let prefix = prefix.to_string();
    items.into_iter().map(move |(n, m)| (format!("{prefix}.{n}"), m))
}

impl ParamTensors for Model {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefix_all("ptformer", self.ptformer.params.tensors())
            .chain(prefix_all("classifier", self.classifier.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefix_all("ptformer", self.ptformer.params.tensors_mut())
            .chain(prefix_all("classifier", self.classifier.tensors_mut()))
            .collect()
    }
}

impl ParamTensors for ModelGrads {
    fn tensors(&self) -> Vec<(String, &Matrix)> {
        prefix_all("ptformer", self.ptformer.tensors())
            .chain(prefix_all("classifier", self.classifier.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefix_all("ptformer", self.ptformer.tensors_mut())
            .chain(prefix_all("classifier", self.classifier.tensors_mut()))
            .collect()
    }
}

impl Model {
    /// Fusion weights from the `init` substream (index 0), classifier
    /// weights from index 1.
    pub fn init(hp: &HyperParams, ff_hidden: usize, fusion: FusionMode, seed: u64) -> Self {
        let ptformer = PtFormerState::init(hp, ff_hidden, seed);
        let mut rng = rng::substream(seed, rng::INIT, 1);
        let classifier = ClassifierParams::init(ptformer.fused_len(), &mut rng);
        Model {
            ptformer,
            classifier,
            fusion,
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            ptformer: self.ptformer.params.zeros_like(),
            classifier: ClassifierParams::zeros(self.classifier.w.nrows()),
        }
    }

    /// Which tensors (in [`ParamTensors::tensors`] order) the optimizer updates.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.tensors()
            .iter()
            .map(|(name, _)| self.fusion == FusionMode::PtFormer || !name.starts_with("ptformer."))
            .collect()
    }

    fn forward_one(&self, inputs: &SampleInputs, dropout: Option<&mut StreamRng>) -> (DVector<f64>, Option<FuseCache>) {
        match self.fusion {
            FusionMode::PtFormer => {
                let (e, cache) = self.ptformer.forward(inputs, dropout);
                (e, Some(cache))
            }
            FusionMode::PooledConcat => (pooled_concat(inputs).values, None),
        }
    }

    /// Evaluation-mode fused vector.
    pub fn embed(&self, inputs: &SampleInputs) -> DVector<f64> {
        self.forward_one(inputs, None).0
    }

    pub fn probability(&self, inputs: &SampleInputs) -> f64 {
        predict_probability(&self.embed(inputs), &self.classifier)
    }
}

/// Loss configuration for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveOptions {
    pub margin: f64,
    pub alpha: f64,
    pub loss_blend: LossBlend,
    pub use_sbcl: bool,
    pub anchor_mode: AnchorMode,
}

impl ObjectiveOptions {
    pub fn from_hyperparams(hp: &HyperParams) -> Self {
        ObjectiveOptions {
            margin: hp.margin,
            alpha: hp.alpha,
            loss_blend: LossBlend::Sum,
            use_sbcl: true,
            anchor_mode: AnchorMode::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub l_bce: f64,
    pub l_sbcl: f64,
    pub loss: f64,
    /// SBCL was requested but the batch had no valid triplet.
    pub sbcl_skipped: bool,
    pub triplets: Vec<Triplet>,
    /// Hinge arguments of the mined triplets.
    pub hinge_args: Vec<f64>,
    pub probs: Vec<f64>,
    pub grads: ModelGrads,
}

/// Loss and gradients for one batch. With `dropout_seed` the forward pass
/// is in training mode, sample `i` drawing its masks from
/// `substream(dropout_seed, "dropout", i)`.
pub fn batch_objective(
    model: &Model,
    inputs: &[&SampleInputs],
    labels: &[Label],
    opts: &ObjectiveOptions,
    dropout_seed: Option<u64>,
    mining_rng: &mut StreamRng,
) -> BatchOutcome {
    assert_eq!(inputs.len(), labels.len());
    let forwards: Vec<(DVector<f64>, Option<FuseCache>)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = dropout_seed.map(|s| rng::substream(s, rng::DROPOUT, i as u64));
            model.forward_one(x, rng.as_mut())
        })
        .collect();
    let fused: Vec<DVector<f64>> = forwards.iter().map(|(e, _)| e.clone()).collect();
    let probs: Vec<f64> = fused.iter().map(|e| predict_probability(e, &model.classifier)).collect();
    let n = inputs.len().max(1) as f64;
    let l_bce = bce_loss(&probs, labels).expect("lengths checked");

    let (mut l_sbcl, mut sbcl_skipped, mut triplets, mut hinge_args, mut sbcl_grads) = (0.0, false, vec![], vec![], None);
    if opts.use_sbcl {
        match mine_triplets(&fused, labels, opts.anchor_mode, mining_rng) {
            Ok(mined) => {
                let out = triplet_objective(&fused, &mined, opts.margin);
                l_sbcl = out.loss;
                triplets = out.triplets;
                hinge_args = out.margins;
                sbcl_grads = Some(out.grads);
            }
            Err(_) => sbcl_skipped = true,
        }
    }
    let (w_bce, w_sbcl) = opts.loss_blend.weights(opts.alpha);
    let loss = combined_loss(l_bce, l_sbcl, opts.loss_blend, opts.alpha);

    let mut grads = model.zero_grads();
    let dz: Vec<f64> = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| w_bce * bce_logit_grad(p, l) / n)
        .collect();
    let w = model.classifier.w.column(0).clone_owned();
    let upstream: Vec<DVector<f64>> = (0..inputs.len())
        .map(|i| {
            let mut g = &w * dz[i];
            if let Some(sg) = &sbcl_grads {
                g += &sg[i] * w_sbcl;
            }
            g
        })
        .collect();
    for (i, e) in fused.iter().enumerate() {
        grads.classifier.w.column_mut(0).axpy(dz[i], e, 1.0);
        grads.classifier.b[(0, 0)] += dz[i];
    }
    if model.fusion == FusionMode::PtFormer {
        let per_sample: Vec<PtFormerGrads> = forwards
            .par_iter()
            .zip(upstream.par_iter())
            .map(|((_, cache), d)| {
                let mut g = model.ptformer.params.zeros_like();
                model.ptformer.backward(cache.as_ref().expect("ptformer cache"), d, &mut g);
                g
            })
            .collect();
        // fixed-order reduction keeps results independent of thread count
        for g in &per_sample {
            grads.ptformer.add_assign(g);
        }
    }

    BatchOutcome {
        l_bce,
        l_sbcl,
        loss,
        sbcl_skipped,
        triplets,
        hinge_args,
        probs,
        grads,
    }
}

/// Evaluation-mode batch loss alone, for finite-difference checks.
pub fn batch_loss(model: &Model, inputs: &[&SampleInputs], labels: &[Label], opts: &ObjectiveOptions) -> (f64, Vec<Triplet>) {
    let mut rng = StreamRng::seed_from_u64(0);
    let out = batch_objective(model, inputs, labels, opts, None, &mut rng);
    (out.loss, out.triplets)
}
