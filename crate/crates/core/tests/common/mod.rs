#![allow(dead_code)]

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use patchfuse::ptformer::{pt_former_gradients, ParamTensors, PtFormerState, SampleInputs};
use patchfuse::trainer::{batch_loss, batch_objective, FusionMode, Model, ObjectiveOptions};
use patchfuse::{EmbeddingMatrix, HyperParams, Label, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor under which two gradients count as equal; well above
/// the central-difference round-off for these loss magnitudes.
pub const ABS_FLOOR: f64 = 1e-8;
/// Hinge arguments closer than this to zero sit on the kink.
pub const KINK: f64 = 1e-6;

pub fn small_hp(dim: usize, heads: usize) -> HyperParams {
    HyperParams {
        dim,
        num_heads: heads,
        dropout: 0.0,
        ..HyperParams::default()
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-0.6..0.6))
}

pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<SampleInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut m = |modality| {
                let rows = rng.random_range(1..=4);
                EmbeddingMatrix::new(random_matrix(rows, dim, &mut rng), modality).unwrap()
            };
            SampleInputs {
                sample_id: format!("s{i}"),
                patch: m(Modality::Patch),
                explanation: m(Modality::Explanation),
                description: m(Modality::Description),
                instruction: m(Modality::Instruction),
            }
        })
        .collect()
}

/// Initialised model with every tensor (biases included) nudged off zero.
pub fn random_model(hp: &HyperParams, seed: u64) -> Model {
    let mut model = Model::init(hp, hp.dim, FusionMode::PtFormer, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in model.tensors_mut() {
        let scale = if name.starts_with("ptformer.self_attn") || name.starts_with("ptformer.cross_attn") {
            // keep attention logits moderate so softmax is not saturated
            0.4
        } else {
            1.0
        };
        for x in t.iter_mut() {
            *x = *x * scale + rng.random_range(-0.1..0.1);
        }
    }
    model
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
    pub max_rel_err: f64,
    pub elapsed: Duration,
}

impl FdReport {
    fn compare(&mut self, name: &str, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        self.checked += 1;
        if err > REL_TOL * scale + ABS_FLOOR {
            self.failures.push(format!("{name}: analytic {analytic:e} vs numeric {numeric:e}"));
        } else if scale > 1e-6 {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }
}

/// Combined-loss gradient check over every PT-Former and classifier entry.
/// Perturbations that change the mined triplets or flip a hinge, or that
/// start on a hinge kink, are skipped.
pub fn check_combined_loss(dim: usize, heads: usize, n: usize, seed: u64) -> FdReport {
    let start = Instant::now();
    let hp = small_hp(dim, heads);
    let model = random_model(&hp, seed);
    let inputs = random_inputs(n, dim, seed + 1);
    let labels: Vec<Label> = (0..n)
        .map(|i| if i % 2 == 0 { Label::Security } else { Label::NonSecurity })
        .collect();
    let refs: Vec<&SampleInputs> = inputs.iter().collect();
    let opts = ObjectiveOptions::from_hyperparams(&hp);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = batch_objective(&model, &refs, &labels, &opts, None, &mut rng);
    let mut report = FdReport::default();
    if base.hinge_args.iter().any(|a| a.abs() < KINK) {
        report.skipped = usize::MAX;
        return report;
    }
    let active: Vec<bool> = base.hinge_args.iter().map(|a| *a > 0.0).collect();
    let analytic: Vec<(String, DMatrix<f64>)> =
        base.grads.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();

    for (t, (name, grad)) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.tensors_mut()[t].1[k] += delta;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let out = batch_objective(&m, &refs, &labels, &opts, None, &mut rng);
                let same_hinges = out.hinge_args.iter().map(|a| *a > 0.0).collect::<Vec<_>>() == active;
                (out.loss, out.triplets == base.triplets && same_hinges)
            };
            let (plus, ok_p) = eval(FD_STEP);
            let (minus, ok_m) = eval(-FD_STEP);
            if !(ok_p && ok_m) {
                report.skipped += 1;
                continue;
            }
            report.compare(&format!("{name}[{k}]"), grad[k], (plus - minus) / (2.0 * FD_STEP));
        }
    }
    // sanity: the loss helper agrees with the objective
    assert_eq!(batch_loss(&model, &refs, &labels, &opts).0, base.loss);
    report.elapsed = start.elapsed();
    report
}

/// Gradient check of `Σ_j u_j · fuse(x_j)` for random upstream vectors.
pub fn check_ptformer(dim: usize, heads: usize, n: usize, seed: u64) -> FdReport {
    let start = Instant::now();
    let hp = small_hp(dim, heads);
    let state: PtFormerState = random_model(&hp, seed).ptformer;
    let inputs = random_inputs(n, dim, seed + 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let upstream: Vec<DVector<f64>> = (0..n)
        .map(|_| DVector::from_fn(3 * dim, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let objective = |s: &PtFormerState| -> f64 {
        inputs
            .iter()
            .zip(&upstream)
            .map(|(x, u)| u.dot(&s.fuse(x).values))
            .sum()
    };
    let grads = pt_former_gradients(&state, &inputs, &upstream);
    let mut report = FdReport::default();
    let analytic: Vec<(String, DMatrix<f64>)> = grads.tensors().into_iter().map(|(n, m)| (n, m.clone())).collect();
    for (t, (name, grad)) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let eval = |delta: f64| {
                let mut s = state.clone();
                s.params.tensors_mut()[t].1[k] += delta;
                objective(&s)
            };
            report.compare(&format!("{name}[{k}]"), grad[k], (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
    }
    report.elapsed = start.elapsed();
    report
}

pub mod e2e {
    use patchfuse::embed::HashedProjection;
    use patchfuse::explain::{Explainer, ExplainerConfig};
    use patchfuse::fixtures::synthetic_dataset;
    use patchfuse::ingest::dataset::{split_dataset, DatasetSplit};
    use patchfuse::ingest::tokenize::HashedTokenizer;
    use patchfuse::pipeline::{augment, Backends};
    use patchfuse::trainer::TrainOptions;
    use patchfuse::HyperParams;
    use std::path::Path;

    pub const SEED: u64 = 42;

    /// Settings for the 64-sample overfit run: dim 16, learning rate 1e-3.
    pub fn overfit_hp(epochs: usize) -> HyperParams {
        HyperParams {
            epochs,
            learning_rate: 1e-3,
            dim: 16,
            num_heads: 2,
            dropout: 0.1,
            seed: SEED,
            ..HyperParams::default()
        }
    }

    pub fn stub_explainer(cache: &Path) -> Explainer {
        Explainer::new(ExplainerConfig {
            cache_dir: cache.to_path_buf(),
            ..ExplainerConfig::default()
        })
        .unwrap()
    }

    pub fn backends(dim: usize, cache: &Path) -> Backends {
        Backends {
            tokenizer: Box::new(HashedTokenizer::default()),
            embedder: Box::new(HashedProjection::new(dim, SEED)),
            explainer: Some(stub_explainer(cache)),
        }
    }

    /// The 64-sample synthetic set, explained by the stub, split 80/10/10.
    pub fn synthetic_split(cache: &Path, n: usize, source: &str, shift: bool) -> DatasetSplit {
        let raw = synthetic_dataset(n, SEED, source, shift);
        let explained = augment(&raw, &stub_explainer(cache)).unwrap();
        split_dataset(&explained, (0.8, 0.1, 0.1), SEED, true).unwrap()
    }

    pub fn options() -> TrainOptions {
        TrainOptions::default()
    }
}
