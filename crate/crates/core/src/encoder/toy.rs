//! Hashed bag-of-tokens encoder with a linear projection.
//!
//! Each token hashes into one of `hash_bins` rows of a trainable table;
//! a trainable `dim × dim` matrix projects every row, and the sentence
//! vector is the mean of the projected token vectors. Positions play no
//! role, so the encoder is order-invariant.

use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_f64_blob, write_f64_blob};
use super::{
    check_texts, check_upstream, read_manifest, Backend, Embedding, EncoderManifest, Pooling,
    SentenceEncoder, TrainableEncoder, PARAMS_FILE,
};
use crate::error::{PieError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::rng_from_seed;
use crate::text::{hash_bin, tokenize};

pub const DEFAULT_MAX_TOKENS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub dim: usize,
    pub hash_bins: usize,
    pub seed: u64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    /// `hash_bins × dim` table followed by the row-major `dim × dim` projection.
    params: Vec<f64>,
    adam: Adam,
}

impl ToyEncoder {
    /// Seeded initialisation: table entries ~ N(0, 1), projection ~ N(0, 1/dim).
    pub fn new(dim: usize, hash_bins: usize, seed: u64) -> Result<Self> {
        Self::with_config(ToyEncoderConfig {
            dim,
            hash_bins,
            seed,
            max_tokens: DEFAULT_MAX_TOKENS,
        })
    }

    pub fn with_config(config: ToyEncoderConfig) -> Result<Self> {
        if config.dim < 2 {
            return Err(PieError::invalid(format!("dim must be >= 2, got {}", config.dim)));
        }
        if config.hash_bins < config.dim {
            return Err(PieError::invalid(format!(
                "hash_bins ({}) must be >= dim ({})",
                config.hash_bins, config.dim
            )));
        }
        if config.max_tokens == 0 {
            return Err(PieError::invalid("max_tokens must be positive"));
        }
        let mut rng = rng_from_seed(config.seed);
        let table_len = config.hash_bins * config.dim;
        let proj_scale = 1.0 / (config.dim as f64).sqrt();
        let mut params = Vec::with_capacity(table_len + config.dim * config.dim);
        for _ in 0..table_len {
            params.push(rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..config.dim * config.dim {
            params.push(rng.sample::<f64, _>(StandardNormal) * proj_scale);
        }
        Ok(Self {
            config,
            params,
            adam: Adam::default(),
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    /// Direct parameter access for finite-difference checks.
    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn table_len(&self) -> usize {
        self.config.hash_bins * self.config.dim
    }

    fn row(&self, bin: usize) -> &[f64] {
        let d = self.config.dim;
        &self.params[bin * d..(bin + 1) * d]
    }

    fn projection(&self) -> &[f64] {
        &self.params[self.table_len()..]
    }

    fn bins_of(&self, text: &str) -> Vec<usize> {
        let mut tokens = tokenize(text);
        if tokens.len() > self.config.max_tokens {
            warn!(
                "truncating text of {} tokens to {}",
                tokens.len(),
                self.config.max_tokens
            );
            tokens.truncate(self.config.max_tokens);
        }
        tokens
            .iter()
            .map(|t| hash_bin(t, self.config.hash_bins))
            .collect()
    }

    /// Mean of the raw table rows, before projection.
    fn pooled_rows(&self, bins: &[usize]) -> Vec<f64> {
        let d = self.config.dim;
        let mut h = vec![0.0; d];
        for &b in bins {
            h.iter_mut().zip(self.row(b)).for_each(|(a, x)| *a += x);
        }
        let n = bins.len() as f64;
        h.iter_mut().for_each(|a| *a /= n);
        h
    }

    fn project(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        let p = self.projection();
        (0..d)
            .map(|r| p[r * d..(r + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Projected vector of every token, the "final-layer token states".
    pub fn token_vectors(&self, text: &str) -> Vec<Vec<f64>> {
        self.bins_of(text)
            .into_iter()
            .map(|b| self.project(self.row(b)))
            .collect()
    }

    /// Gradient of `Σᵢ ⟨upstream[i], f(texts[i])⟩` with respect to the flat parameters.
    pub fn parameter_gradient(&self, texts: &[&str], upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_texts(texts)?;
        let d = self.config.dim;
        check_upstream(texts, upstream, d)?;
        let table_len = self.table_len();
        let mut grad = vec![0.0; self.params.len()];
        let p = self.projection();
        for (text, g) in texts.iter().zip(upstream) {
            let bins = self.bins_of(text);
            let h = self.pooled_rows(&bins);
            // out = P h  =>  dP += g hᵀ, dh = Pᵀ g
            let dp = &mut grad[table_len..];
            for r in 0..d {
                for c in 0..d {
                    dp[r * d + c] += g[r] * h[c];
                }
            }
            let mut dh = vec![0.0; d];
            for r in 0..d {
                for c in 0..d {
                    dh[c] += p[r * d + c] * g[r];
                }
            }
            let inv = 1.0 / bins.len() as f64;
            for &b in &bins {
                let row = &mut grad[b * d..(b + 1) * d];
                row.iter_mut().zip(&dh).for_each(|(a, x)| *a += x * inv);
            }
        }
        Ok(grad)
    }

    pub fn manifest(&self) -> EncoderManifest {
        EncoderManifest {
            format_version: 1,
            backend: Backend::Toy,
            dim: self.config.dim,
            pooling: Pooling::Mean,
            hyperparameters: serde_json::to_value(self.config).expect("plain struct serialises"),
        }
    }

    /// Writes `manifest.json` and the little-endian f64 parameter blob.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.manifest().write(dir)?;
        write_f64_blob(&dir.join(PARAMS_FILE), &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        if manifest.backend != Backend::Toy {
            return Err(PieError::Checkpoint(format!(
                "{} holds a {:?} encoder, not a toy encoder",
                dir.display(),
                manifest.backend
            )));
        }
        let config: ToyEncoderConfig = serde_json::from_value(manifest.hyperparameters)?;
        let mut model = Self::with_config(config)?;
        let params = read_f64_blob(&dir.join(PARAMS_FILE))?;
        if params.len() != model.params.len() {
            return Err(PieError::Checkpoint(format!(
                "parameter blob has {} values, expected {}",
                params.len(),
                model.params.len()
            )));
        }
        model.params = params;
        Ok(model)
    }
}

impl SentenceEncoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        check_texts(texts)?;
        texts
            .iter()
            .map(|t| {
                let bins = self.bins_of(t);
                Embedding::new(self.project(&self.pooled_rows(&bins)))
            })
            .collect()
    }
}

impl TrainableEncoder for ToyEncoder {
    fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn backward_step(
        &mut self,
        texts: &[&str],
        upstream: &[Vec<f64>],
        optimizer: &AdamConfig,
    ) -> Result<()> {
        let grad = self.parameter_gradient(texts, upstream)?;
        self.adam.step(optimizer, &mut self.params, &grad);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::mean_pool;
    use rand::seq::SliceRandom;

    fn model() -> ToyEncoder {
        ToyEncoder::new(16, 64, 11).unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let m = model();
        let embs = m.embed(&["book a flight", "book a flight"]).unwrap();
        assert_eq!(embs[0], embs[1]);
        assert!(embs.iter().all(|e| e.dim() == 16));
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let a = ToyEncoder::new(8, 64, 5).unwrap();
        let b = ToyEncoder::new(8, 64, 5).unwrap();
        assert_eq!(
            a.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a.parameters(), ToyEncoder::new(8, 64, 6).unwrap().parameters());
    }

    #[test]
    fn single_token_equals_projected_row() {
        let m = model();
        let tv = m.token_vectors("flight");
        assert_eq!(tv.len(), 1);
        assert_eq!(m.embed_one("flight").unwrap().as_slice(), tv[0].as_slice());
    }

    #[test]
    fn sentence_vector_is_mean_of_token_vectors() {
        let m = model();
        let text = "i want to book a flight";
        let pooled = mean_pool(&m.token_vectors(text)).unwrap();
        let e = m.embed_one(text).unwrap();
        for (a, b) in pooled.iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn order_invariant() {
        let m = model();
        let mut words = ["please", "book", "me", "a", "cheap", "flight"];
        let base = m.embed_one(&words.join(" ")).unwrap();
        words.shuffle(&mut rng_from_seed(1));
        let shuffled = m.embed_one(&words.join(" ")).unwrap();
        for (a, b) in base.as_slice().iter().zip(shuffled.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_equals_singletons() {
        let m = model();
        let texts = ["one two", "three", "four five six"];
        let batch = m.embed(&texts).unwrap();
        for (t, e) in texts.iter().zip(&batch) {
            assert_eq!(&m.embed_one(t).unwrap(), e);
        }
    }

    #[test]
    fn invalid_sizes_and_empty_text_rejected() {
        assert!(ToyEncoder::new(1, 64, 0).is_err());
        assert!(ToyEncoder::new(16, 8, 0).is_err());
        assert!(model().embed(&["ok", "  "]).is_err());
    }

    #[test]
    fn overlong_text_is_truncated() {
        let m = ToyEncoder::with_config(ToyEncoderConfig {
            dim: 4,
            hash_bins: 16,
            seed: 0,
            max_tokens: 3,
        })
        .unwrap();
        let long = m.embed_one("a b c d e f").unwrap();
        assert_eq!(long, m.embed_one("a b c").unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = ToyEncoder::new(6, 32, 3).unwrap();
        let texts = ["open a checking account", "play some jazz music", "account"];
        let upstream: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let scalar = |m: &ToyEncoder| -> f64 {
            m.embed(&texts)
                .unwrap()
                .iter()
                .zip(&upstream)
                .map(|(e, g)| e.as_slice().iter().zip(g).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let grad = m.parameter_gradient(&texts, &upstream).unwrap();
        let h = 1e-5;
        let mut rng = rng_from_seed(4);
        for _ in 0..20 {
            let i = rng.gen_range(0..m.parameter_count());
            let orig = m.parameters()[i];
            m.parameters_mut()[i] = orig + h;
            let up = scalar(&m);
            m.parameters_mut()[i] = orig - h;
            let down = scalar(&m);
            m.parameters_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() <= tol.max(1e-9), "coord {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = model();
        let texts = ["a b", "c"];
        let up = vec![vec![0.1; 16], vec![-0.2; 16]];
        m.backward_step(&texts, &up, &AdamConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = ToyEncoder::load(dir.path()).unwrap();
        assert_eq!(
            m.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            loaded.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(loaded.config(), m.config());
    }
}
