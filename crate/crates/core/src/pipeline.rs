//! Turns raw samples into the four embedded inputs the fusion stack reads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::Embedder;
use crate::error::Result;
use crate::explain::{instruction_text, Explainer};
use crate::ingest::tokenize::{tokenize, Tokenizer};
use crate::ptformer::SampleInputs;
use crate::types::{EmbeddingMatrix, Label, Modality, PatchSample};

/// Tokenizer, embedder and (optionally) an explainer for samples that
/// arrive without an explanation.
pub struct Backends {
    pub tokenizer: Box<dyn Tokenizer>,
    pub embedder: Box<dyn Embedder>,
    pub explainer: Option<Explainer>,
}

/// Which optional modalities are fed; a disabled one becomes the
/// single zero-row sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputOptions {
    pub use_explanation: bool,
    pub use_instruction: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        InputOptions {
            use_explanation: true,
            use_instruction: true,
        }
    }
}

/// Embedded samples with their labels, in input order.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub inputs: Vec<SampleInputs>,
    pub labels: Vec<Label>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.inputs.iter().map(|i| i.sample_id.clone()).collect()
    }
}

/// Fills in missing explanations. Samples that already carry one are kept.
pub fn augment(samples: &[PatchSample], explainer: &Explainer) -> Result<Vec<PatchSample>> {
    samples
        .par_iter()
        .map(|s| {
            let mut s = s.clone();
            if s.explanation.is_none() {
                s.explanation = Some(explainer.explain(&s)?);
            }
            Ok(s)
        })
        .collect()
}

fn embed_one(
    sample: &PatchSample,
    backends: &Backends,
    max_tokens: usize,
    opts: InputOptions,
) -> Result<SampleInputs> {
    let dim = backends.embedder.dim();
    let embed = |text: &str, modality: Modality| -> Result<EmbeddingMatrix> {
        let tokens = tokenize(text, backends.tokenizer.as_ref(), max_tokens);
        backends.embedder.embed(&sample.id, &tokens, modality)
    };
    let explanation = match (&sample.explanation, opts.use_explanation, &backends.explainer) {
        (_, false, _) => EmbeddingMatrix::sentinel(dim, Modality::Explanation),
        (Some(text), true, _) => embed(text, Modality::Explanation)?,
        (None, true, Some(explainer)) => embed(&explainer.explain(sample)?, Modality::Explanation)?,
        (None, true, None) => EmbeddingMatrix::sentinel(dim, Modality::Explanation),
    };
    let instruction = if opts.use_instruction {
        embed(instruction_text(), Modality::Instruction)?
    } else {
        EmbeddingMatrix::sentinel(dim, Modality::Instruction)
    };
    Ok(SampleInputs {
        sample_id: sample.id.clone(),
        patch: embed(&sample.diff_text, Modality::Patch)?,
        explanation,
        description: embed(sample.description.as_deref().unwrap_or(""), Modality::Description)?,
        instruction,
    })
}

pub fn prepare(
    samples: &[PatchSample],
    backends: &Backends,
    max_tokens: usize,
    opts: InputOptions,
) -> Result<Prepared> {
    let inputs = samples
        .par_iter()
        .map(|s| embed_one(s, backends, max_tokens, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        inputs,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedProjection;
    use crate::fixtures::synthetic_dataset;
    use crate::ingest::tokenize::HashedTokenizer;

    fn backends() -> Backends {
        Backends {
            tokenizer: Box::new(HashedTokenizer::default()),
            embedder: Box::new(HashedProjection::new(8, 1)),
            explainer: None,
        }
    }

    #[test]
    fn disabled_modalities_are_sentinels() {
        let samples = synthetic_dataset(4, 0, "syn", false);
        let opts = InputOptions {
            use_explanation: false,
            use_instruction: false,
        };
        let mut with = samples.clone();
        with[0].explanation = Some("adds a bounds check".into());
        let p = prepare(&with, &backends(), 64, opts).unwrap();
        assert_eq!(p.inputs[0].explanation.seq_len(), 1);
        assert_eq!(p.inputs[0].explanation.values().norm(), 0.0);
        assert_eq!(p.inputs[0].instruction.values().norm(), 0.0);

        let full = prepare(&with, &backends(), 64, InputOptions::default()).unwrap();
        assert!(full.inputs[0].explanation.seq_len() > 1);
        assert!(full.inputs[0].instruction.seq_len() > 1);
        assert_eq!(full.labels, samples.iter().map(|s| s.label).collect::<Vec<_>>());
    }

    #[test]
    fn preparation_is_deterministic() {
        let samples = synthetic_dataset(6, 3, "syn", false);
        let a = prepare(&samples, &backends(), 32, InputOptions::default()).unwrap();
        let b = prepare(&samples, &backends(), 32, InputOptions::default()).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert!(a.inputs.iter().all(|i| i.patch.seq_len() <= 32));
    }
}
