//! Concept vectors: the mean of last-layer token representations over a
//! corpus of examples, taken before the final layernorm (projection
//! re-applies LN_f later, so normalizing here would double up).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::tokenizer::Tokenizer;
use crate::math::Scalar;
use crate::model::{forward, AblationMask, ModelInput, ModelWeights, TraceLevel};

/// A dense stand-in for a concept in the model's residual space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptVector {
    pub d_model: usize,
    pub n_examples: usize,
    pub values: Vec<f64>,
    pub source_digest: String,
}

impl ConceptVector {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.values.len() != d_model || self.d_model != d_model {
            return Err(Error::Shape(format!(
                "concept vector dimension {} != d_model {d_model}",
                self.values.len()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("concept vector".into()));
        }
        Ok(())
    }

    /// The vector as a kernel-precision embedding row.
    pub fn as_embedding<F: Scalar>(&self) -> Vec<F> {
        self.values.iter().map(|&v| F::from_f64(v)).collect()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Example texts for one concept.
#[derive(Debug, Clone)]
pub struct ConceptCorpus {
    pub examples: Vec<String>,
    pub label: String,
}

impl ConceptCorpus {
    pub fn new(examples: Vec<String>, label: impl Into<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("empty concept corpus".into()));
        }
        Ok(Self {
            examples,
            label: label.into(),
        })
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let (examples, label) = crate::io::datasets::read_corpus(path)?;
        Self::new(examples, label)
    }

    /// Content hash of the example set (order-sensitive, length-framed).
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for text in &self.examples {
            hasher.update((text.len() as u64).to_le_bytes());
            hasher.update(text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Mean of the last-layer hidden states over all token positions of one
/// example (one forward pass). Accumulated in f64, position-major.
pub fn example_representation<F: Scalar>(
    weights: &ModelWeights<F>,
    tokenizer: &Tokenizer,
    text: &str,
) -> Result<Vec<f64>> {
    let tokens = tokenizer.encode(text)?;
    if tokens.is_empty() {
        return Err(Error::EmptySequence);
    }
    let trace = forward(
        weights,
        ModelInput::Tokens(&tokens),
        &AblationMask::empty(),
        TraceLevel::Full,
    )?;
    let d = weights.config.d_model;
    let mut sum = vec![0.0f64; d];
    for pos in 0..trace.seq_len() {
        for (acc, &v) in sum.iter_mut().zip(trace.last_hidden(pos).iter()) {
            *acc += v.to_f64();
        }
    }
    let n = trace.seq_len() as f64;
    for v in sum.iter_mut() {
        *v /= n;
    }
    Ok(sum)
}

/// Mean of the example representations: consumes exactly one forward pass
/// per example. Summation order is fixed (example-major) so reruns are
/// bit-identical.
pub fn concept_vector<F: Scalar>(
    weights: &ModelWeights<F>,
    tokenizer: &Tokenizer,
    corpus: &ConceptCorpus,
) -> Result<ConceptVector> {
    let d = weights.config.d_model;
    let mut sum = vec![0.0f64; d];
    for text in &corpus.examples {
        let rep = example_representation(weights, tokenizer, text)?;
        for (acc, v) in sum.iter_mut().zip(rep) {
            *acc += v;
        }
    }
    let n = corpus.examples.len() as f64;
    for v in sum.iter_mut() {
        *v /= n;
    }
    Ok(ConceptVector {
        d_model: d,
        n_examples: corpus.examples.len(),
        values: sum,
        source_digest: corpus.digest(),
    })
}
