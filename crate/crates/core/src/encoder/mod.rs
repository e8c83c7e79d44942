//! Sentence encoders.
//!
//! [`SentenceEncoder`] is the inference contract every module consumes;
//! [`TrainableEncoder`] adds the single hook the trainers need. Training
//! code computes the gradient of its loss with respect to each output
//! embedding and hands those upstream gradients to the encoder, which
//! back-propagates them into its own parameters and applies an optimiser
//! step. That keeps the losses backend-agnostic: the toy backend
//! differentiates by hand, autograd backends differentiate the surrogate
//! `Σᵢ ⟨gᵢ, f(xᵢ)⟩`.

mod checkpoint;
mod lookup;
mod toy;

pub use checkpoint::{read_f64_blob, read_manifest, write_f64_blob, Backend, EncoderManifest, Pooling, MANIFEST_FILE, PARAMS_FILE};
pub use lookup::LookupEncoder;
pub use toy::{ToyEncoder, ToyEncoderConfig, DEFAULT_MAX_TOKENS};

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::optim::AdamConfig;

/// A fixed-dimension sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps `values`, rejecting empty or non-finite vectors.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(PieError::Shape("embedding has zero dimensions".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(PieError::NonFinite(format!("embedding entry {i} is {}", values[i])));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| v * c).collect())
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Maps texts to embeddings. Implementations must be deterministic for a
/// fixed parameter state and must not let batch members interact.
pub trait SentenceEncoder: Sync {
    fn dim(&self) -> usize;

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed_one(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

/// An encoder whose parameters can be updated from upstream gradients.
pub trait TrainableEncoder: SentenceEncoder {
    fn parameter_count(&self) -> usize;

    /// Back-propagates `upstream[i] = ∂L/∂f(texts[i])` and applies one
    /// optimiser step. Texts may repeat; their gradients accumulate.
    fn backward_step(&mut self, texts: &[&str], upstream: &[Vec<f64>], optimizer: &AdamConfig)
        -> Result<()>;
}

impl<E: SentenceEncoder + ?Sized> SentenceEncoder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).embed(texts)
    }
}

/// Arithmetic mean of token vectors.
pub fn mean_pool(token_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = token_vectors
        .first()
        .ok_or_else(|| PieError::invalid("cannot mean-pool zero tokens"))?;
    let mut out = vec![0.0; first.len()];
    for v in token_vectors {
        if v.len() != out.len() {
            return Err(PieError::Shape(format!(
                "token vector of dim {} among dim {}",
                v.len(),
                out.len()
            )));
        }
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    let n = token_vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Rejects empty or whitespace-only texts.
pub fn check_texts(texts: &[&str]) -> Result<()> {
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(i) => Err(PieError::invalid(format!("text {i} is empty"))),
        None => Ok(()),
    }
}

/// Checks one upstream gradient of length `dim` per text.
pub fn check_upstream(texts: &[&str], upstream: &[Vec<f64>], dim: usize) -> Result<()> {
    if texts.len() != upstream.len() {
        return Err(PieError::Shape(format!(
            "{} texts but {} upstream gradients",
            texts.len(),
            upstream.len()
        )));
    }
    if let Some(g) = upstream.iter().find(|g| g.len() != dim) {
        return Err(PieError::Shape(format!("upstream gradient of dim {} (expected {dim})", g.len())));
    }
    Ok(())
}

/// Embeds the distinct texts once and returns a lookup keyed by text.
pub fn embed_unique<'a, E: SentenceEncoder + ?Sized>(
    model: &E,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<std::collections::HashMap<String, Embedding>> {
    let mut order: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in texts {
        if seen.insert(t) {
            order.push(t);
        }
    }
    let mut out = std::collections::HashMap::with_capacity(order.len());
    for chunk in order.chunks(256) {
        let embs = model.embed(chunk)?;
        for (t, e) in chunk.iter().zip(embs) {
            out.insert((*t).to_string(), e);
        }
    }
    Ok(out)
}
