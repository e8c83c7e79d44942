use std::collections::HashMap;

use super::{check_texts, Embedding, SentenceEncoder};
use crate::error::{PieError, Result};

/// Serves precomputed embeddings by exact text, with an optional fallback
/// vector for unseen texts. Useful for externally computed embeddings and
/// for oracle or constant encoders in evaluation tests.
#[derive(Debug, Clone)]
pub struct LookupEncoder {
    dim: usize,
    table: HashMap<String, Embedding>,
    fallback: Option<Embedding>,
}

impl LookupEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
            fallback: None,
        }
    }

    /// Every text maps to `value`.
    pub fn constant(value: Embedding) -> Self {
        Self {
            dim: value.dim(),
            table: HashMap::new(),
            fallback: Some(value),
        }
    }

    pub fn insert(&mut self, text: impl Into<String>, emb: Embedding) -> Result<()> {
        if emb.dim() != self.dim {
            return Err(PieError::Shape(format!(
                "embedding of dim {} in a dim {} table",
                emb.dim(),
                self.dim
            )));
        }
        self.table.insert(text.into(), emb);
        Ok(())
    }

    pub fn with_fallback(mut self, value: Embedding) -> Result<Self> {
        if value.dim() != self.dim {
            return Err(PieError::Shape("fallback dimension mismatch".into()));
        }
        self.fallback = Some(value);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl SentenceEncoder for LookupEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        check_texts(texts)?;
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .or(self.fallback.as_ref())
                    .cloned()
                    .ok_or_else(|| PieError::invalid(format!("no embedding for {t:?}")))
            })
            .collect()
    }
}
