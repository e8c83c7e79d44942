//! Backend dispatch for encoders and taggers read from disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pie_core::encoder::{
    read_manifest, Backend, Embedding, SentenceEncoder, ToyEncoder, ToyEncoderConfig,
    TrainableEncoder,
};
use pie_core::irl::{
    tagger_backend, train_tagger, Annotation, HashedTagger, HashedTaggerConfig, IrlSpan, IrlTagger,
    TaggerLog, TrainingOptions, TAGGER_BACKEND,
};
use pie_core::optim::AdamConfig;
use pie_transformer::{
    small_bert_config, train_transformer_tagger, word_level_tokenizer, TransformerEncoder,
    TransformerSettings, TransformerTagger, CONFIG_FILE, TRANSFORMER_TAGGER_BACKEND,
};
use serde::{Deserialize, Serialize};

/// An encoder checkpoint of either backend.
#[derive(Clone)]
pub enum AnyEncoder {
    Toy(ToyEncoder),
    Transformer(TransformerEncoder),
}

impl AnyEncoder {
    /// Loads a checkpoint directory. A directory without a manifest is read
    /// as a plain BERT model directory.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let backend = match read_manifest(dir) {
            Ok(m) => m.backend,
            Err(_) if dir.join(CONFIG_FILE).exists() => Backend::Transformer,
            Err(e) => {
                return Err(e).with_context(|| format!("reading encoder at {}", dir.display()))
            }
        };
        Ok(match backend {
            Backend::Toy => AnyEncoder::Toy(ToyEncoder::load(dir)?),
            Backend::Transformer => AnyEncoder::Transformer(TransformerEncoder::load(dir)?),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        match self {
            AnyEncoder::Toy(m) => m.save(dir)?,
            AnyEncoder::Transformer(m) => m.save(dir)?,
        }
        Ok(())
    }

    pub fn backend(&self) -> Backend {
        match self {
            AnyEncoder::Toy(_) => Backend::Toy,
            AnyEncoder::Transformer(_) => Backend::Transformer,
        }
    }
}

impl SentenceEncoder for AnyEncoder {
    fn dim(&self) -> usize {
        match self {
            AnyEncoder::Toy(m) => m.dim(),
            AnyEncoder::Transformer(m) => m.dim(),
        }
    }

    fn embed(&self, texts: &[&str]) -> pie_core::Result<Vec<Embedding>> {
        match self {
            AnyEncoder::Toy(m) => m.embed(texts),
            AnyEncoder::Transformer(m) => m.embed(texts),
        }
    }
}

impl TrainableEncoder for AnyEncoder {
    fn parameter_count(&self) -> usize {
        match self {
            AnyEncoder::Toy(m) => m.parameter_count(),
            AnyEncoder::Transformer(m) => m.parameter_count(),
        }
    }

    fn backward_step(
        &mut self,
        texts: &[&str],
        upstream: &[Vec<f64>],
        optimizer: &AdamConfig,
    ) -> pie_core::Result<()> {
        match self {
            AnyEncoder::Toy(m) => m.backward_step(texts, upstream, optimizer),
            AnyEncoder::Transformer(m) => m.backward_step(texts, upstream, optimizer),
        }
    }
}

/// How to build a fresh encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase", deny_unknown_fields)]
pub enum EncoderSpec {
    Toy {
        #[serde(default = "default_toy_dim")]
        dim: usize,
        #[serde(default = "default_toy_bins")]
        hash_bins: usize,
    },
    /// A model directory to start from, or a small random BERT over the
    /// vocabulary of the texts it will see.
    Transformer {
        #[serde(default)]
        model_dir: Option<PathBuf>,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default = "default_layers")]
        layers: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        #[serde(default = "default_max_length")]
        max_length: usize,
    },
}

fn default_toy_dim() -> usize {
    64
}
fn default_toy_bins() -> usize {
    4096
}
fn default_hidden() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_max_length() -> usize {
    pie_transformer::DEFAULT_MAX_LENGTH
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Toy {
            dim: default_toy_dim(),
            hash_bins: default_toy_bins(),
        }
    }
}

impl EncoderSpec {
    /// Builds the encoder. `vocab` supplies the word list for a random
    /// transformer and is ignored otherwise.
    pub fn build(&self, vocab: &[&str], seed: u64) -> Result<AnyEncoder> {
        Ok(match self {
            EncoderSpec::Toy { dim, hash_bins } => {
                AnyEncoder::Toy(ToyEncoder::with_config(ToyEncoderConfig {
                    dim: *dim,
                    hash_bins: *hash_bins,
                    seed,
                    max_tokens: pie_core::encoder::DEFAULT_MAX_TOKENS,
                })?)
            }
            EncoderSpec::Transformer {
                model_dir: Some(dir),
                ..
            } => AnyEncoder::Transformer(
                TransformerEncoder::load(dir)
                    .with_context(|| format!("loading {}", dir.display()))?,
            ),
            EncoderSpec::Transformer {
                model_dir: None,
                hidden,
                layers,
                heads,
                max_length,
            } => {
                if vocab.is_empty() {
                    bail!("a random transformer needs texts to build its vocabulary from");
                }
                let tokenizer = word_level_tokenizer(vocab)?;
                let config =
                    small_bert_config(tokenizer.get_vocab_size(true), *hidden, *layers, *heads);
                let settings = TransformerSettings {
                    max_length: *max_length,
                };
                AnyEncoder::Transformer(TransformerEncoder::new_random(
                    config, tokenizer, settings, seed,
                )?)
            }
        })
    }
}

/// A tagger checkpoint of either backend.
pub enum AnyTagger {
    Hashed(HashedTagger),
    Transformer(TransformerTagger),
}

impl AnyTagger {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let backend =
            tagger_backend(dir).with_context(|| format!("reading tagger at {}", dir.display()))?;
        Ok(match backend.as_str() {
            TAGGER_BACKEND => AnyTagger::Hashed(HashedTagger::load(dir)?),
            TRANSFORMER_TAGGER_BACKEND => AnyTagger::Transformer(TransformerTagger::load(dir)?),
            other => bail!("{}: unknown tagger backend `{other}`", dir.display()),
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        match self {
            AnyTagger::Hashed(t) => t.save(dir)?,
            AnyTagger::Transformer(t) => t.save(dir)?,
        }
        Ok(())
    }
}

impl IrlTagger for AnyTagger {
    fn tag(&self, tokens: &[String]) -> pie_core::Result<Vec<IrlSpan>> {
        match self {
            AnyTagger::Hashed(t) => t.tag(tokens),
            AnyTagger::Transformer(t) => t.tag(tokens),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaggerKind {
    #[default]
    Hashed,
    Transformer,
}

/// Everything needed to train a tagger besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerSpec {
    pub backend: TaggerKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hashed backend.
    pub hidden_dim: usize,
    pub hash_bins: usize,
    /// Transformer backend: encoder weights to start from. Without one, a
    /// small random BERT is built over the annotation vocabulary.
    pub init: Option<PathBuf>,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_length: usize,
}

impl Default for TaggerSpec {
    fn default() -> Self {
        let options = TrainingOptions::default();
        let hashed = HashedTaggerConfig::default();
        Self {
            backend: TaggerKind::Hashed,
            epochs: options.epochs,
            learning_rate: options.learning_rate,
            batch_size: options.batch_size,
            hidden_dim: hashed.hidden_dim,
            hash_bins: hashed.hash_bins,
            init: None,
            hidden: default_hidden(),
            layers: default_layers(),
            heads: default_heads(),
            max_length: default_max_length(),
        }
    }
}

impl TaggerSpec {
    pub fn train(
        &self,
        train: &[Annotation],
        valid: &[Annotation],
        seed: u64,
    ) -> Result<(AnyTagger, TaggerLog)> {
        let options = TrainingOptions {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: pie_core::rng::derive_seed(seed, "tagger/order"),
        };
        let init_seed = pie_core::rng::derive_seed(seed, "tagger/init");
        Ok(match self.backend {
            TaggerKind::Hashed => {
                let config = HashedTaggerConfig {
                    hidden_dim: self.hidden_dim,
                    hash_bins: self.hash_bins,
                    seed: init_seed,
                };
                let (model, log) = train_tagger(train, valid, config, &options)?;
                (AnyTagger::Hashed(model), log)
            }
            TaggerKind::Transformer => {
                let settings = TransformerSettings {
                    max_length: self.max_length,
                };
                let init = match &self.init {
                    Some(dir) => TransformerTagger::from_pretrained(dir, settings, init_seed)?,
                    None => {
                        let words: Vec<String> = train
                            .iter()
                            .chain(valid)
                            .map(|a| a.tokens.join(" "))
                            .collect();
                        let tokenizer = word_level_tokenizer(&words)?;
                        let config = small_bert_config(
                            tokenizer.get_vocab_size(true),
                            self.hidden,
                            self.layers,
                            self.heads,
                        );
                        TransformerTagger::new_random(config, tokenizer, settings, init_seed)?
                    }
                };
                let (model, log) = train_transformer_tagger(init, train, valid, &options)?;
                (AnyTagger::Transformer(model), log)
            }
        })
    }
}
