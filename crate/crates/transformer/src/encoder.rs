use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use pie_core::encoder::{check_texts, check_upstream, read_manifest, Backend, Embedding, EncoderManifest, Pooling, SentenceEncoder, TrainableEncoder, MANIFEST_FILE};
use pie_core::optim::AdamConfig;
use pie_core::{PieError, Result};
use tokenizers::Tokenizer;

use crate::backbone::{group_by_length, Backbone, TransformerSettings, CONFIG_FILE, TOKENIZER_FILE, WEIGHTS_FILE};
use crate::be;

/// Mean-pooled BERT-family sentence encoder.
///
/// Texts are bucketed by token length so no padding enters a forward pass;
/// the pooled vector is the mean over every final-layer state, special
/// tokens included.
pub struct TransformerEncoder {
    backbone: Backbone,
    optimizer: Option<(AdamConfig, AdamW)>,
}

impl TransformerEncoder {
    /// A randomly initialised model, seeded for reproducibility.
    pub fn new_random(config: serde_json::Value, tokenizer: Tokenizer, settings: TransformerSettings, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(config, tokenizer, settings, None)?;
        backbone.init_seeded(seed)?;
        Ok(Self { backbone, optimizer: None })
    }

    /// Loads `config.json`, `tokenizer.json` and `model.safetensors` from
    /// `dir`. A `manifest.json`, when present, supplies the settings.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let settings = if dir.join(MANIFEST_FILE).exists() {
            let manifest = read_manifest(dir)?;
            if manifest.backend != Backend::Transformer {
                return Err(PieError::Checkpoint(format!("{} is not a transformer checkpoint", dir.display())));
            }
            serde_json::from_value(manifest.hyperparameters)?
        } else {
            TransformerSettings::default()
        };
        let (config, tokenizer) = Backbone::read_files(dir)?;
        let backbone = Backbone::build(config, tokenizer, settings, None)?;
        backbone.load_weights(&dir.join(WEIGHTS_FILE), false)?;
        Ok(Self { backbone, optimizer: None })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.backbone.save_files(dir)?;
        self.manifest().write(dir)
    }

    pub fn manifest(&self) -> EncoderManifest {
        EncoderManifest {
            format_version: 1,
            backend: Backend::Transformer,
            dim: self.dim(),
            pooling: Pooling::Mean,
            hyperparameters: serde_json::json!({
                "max_length": self.backbone.settings.max_length,
                "config_file": CONFIG_FILE,
                "tokenizer_file": TOKENIZER_FILE,
                "weights_file": WEIGHTS_FILE,
            }),
        }
    }

    pub fn settings(&self) -> TransformerSettings {
        self.backbone.settings
    }

    fn encode_all(&self, texts: &[&str]) -> Result<Vec<Vec<u32>>> {
        check_texts(texts)?;
        texts.iter().map(|t| self.backbone.encode(t)).collect()
    }

    /// Pooled `(n, hidden)` tensors for one length bucket.
    fn pooled(&self, rows: &[&[u32]]) -> Result<Tensor> {
        let states = self.backbone.forward(rows)?;
        be(states.mean(1))
    }
}

impl Clone for TransformerEncoder {
    /// Deep copy of the weights. Optimiser state is not carried over.
    fn clone(&self) -> Self {
        Self {
            backbone: self.backbone.deep_clone().expect("copying transformer weights"),
            optimizer: None,
        }
    }
}

impl SentenceEncoder for TransformerEncoder {
    fn dim(&self) -> usize {
        self.backbone.hidden_size()
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let encoded = self.encode_all(texts)?;
        let mut out: Vec<Option<Embedding>> = vec![None; texts.len()];
        for group in group_by_length(&encoded) {
            let rows: Vec<&[u32]> = group.iter().map(|&i| encoded[i].as_slice()).collect();
            let pooled = be(self.pooled(&rows)?.to_vec2::<f32>())?;
            for (&i, v) in group.iter().zip(pooled) {
                out[i] = Some(Embedding::new(v.into_iter().map(f64::from).collect())?);
            }
        }
        Ok(out.into_iter().map(|e| e.expect("every text embedded")).collect())
    }
}

impl TrainableEncoder for TransformerEncoder {
    fn parameter_count(&self) -> usize {
        self.backbone.parameter_count()
    }

    /// Differentiates `Σᵢ ⟨upstreamᵢ, f(textᵢ)⟩` and takes one AdamW step.
    fn backward_step(&mut self, texts: &[&str], upstream: &[Vec<f64>], optimizer: &AdamConfig) -> Result<()> {
        let dim = self.dim();
        check_upstream(texts, upstream, dim)?;
        if texts.is_empty() {
            return Ok(());
        }
        let encoded = self.encode_all(texts)?;
        let mut surrogate: Option<Tensor> = None;
        for group in group_by_length(&encoded) {
            let rows: Vec<&[u32]> = group.iter().map(|&i| encoded[i].as_slice()).collect();
            let pooled = self.pooled(&rows)?;
            let g: Vec<f32> = group.iter().flat_map(|&i| upstream[i].iter().map(|&x| x as f32)).collect();
            let g = be(Tensor::from_vec(g, (group.len(), dim), &self.backbone.device))?;
            let term = be(be(pooled.mul(&g))?.sum_all())?;
            surrogate = Some(match surrogate {
                Some(s) => be(s.add(&term))?,
                None => term,
            });
        }
        let surrogate = surrogate.expect("at least one group");
        let grads = be(surrogate.backward())?;
        let stale = self.optimizer.as_ref().is_some_and(|(c, _)| {
            (c.beta1, c.beta2, c.epsilon, c.weight_decay) != (optimizer.beta1, optimizer.beta2, optimizer.epsilon, optimizer.weight_decay)
        });
        if self.optimizer.is_none() || stale {
            let params = ParamsAdamW {
                lr: optimizer.learning_rate,
                beta1: optimizer.beta1,
                beta2: optimizer.beta2,
                eps: optimizer.epsilon,
                weight_decay: optimizer.weight_decay,
            };
            self.optimizer = Some((*optimizer, be(AdamW::new(self.backbone.vars(), params))?));
        }
        let (cfg, opt) = self.optimizer.as_mut().expect("optimizer initialised");
        if cfg.learning_rate != optimizer.learning_rate {
            opt.set_learning_rate(optimizer.learning_rate);
            cfg.learning_rate = optimizer.learning_rate;
        }
        be(opt.step(&grads))
    }
}
