use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Linear, Module, VarBuilder, VarMap};
use candle_transformers::models::bert::Config;
use log::warn;
use pie_core::rng::substream;
use pie_core::{PieError, Result};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tokenizers::Tokenizer;

use crate::be;
use crate::bert::Bert;

pub const CONFIG_FILE: &str = "config.json";
pub const TOKENIZER_FILE: &str = "tokenizer.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const DEFAULT_MAX_LENGTH: usize = 128;

/// Settings persisted in the checkpoint manifest's `hyperparameters`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerSettings {
    /// Token budget per text, special tokens included.
    pub max_length: usize,
}

impl Default for TransformerSettings {
    fn default() -> Self {
        Self { max_length: DEFAULT_MAX_LENGTH }
    }
}

/// BERT weights plus tokenizer, with an optional linear head stored
/// under `classifier.*`.
pub(crate) struct Backbone {
    pub config_json: serde_json::Value,
    pub config: Config,
    pub tokenizer: Tokenizer,
    pub settings: TransformerSettings,
    pub varmap: VarMap,
    pub model: Bert,
    pub head: Option<Linear>,
    pub device: Device,
}

impl Backbone {
    /// Builds the graph with placeholder weights; callers then seed or load.
    pub fn build(
        config_json: serde_json::Value,
        tokenizer: Tokenizer,
        settings: TransformerSettings,
        head: Option<usize>,
    ) -> Result<Self> {
        let config: Config = serde_json::from_value(config_json.clone())?;
        if settings.max_length < 2 || settings.max_length > config.max_position_embeddings {
            return Err(PieError::invalid(format!(
                "max_length {} must lie in 2..={}",
                settings.max_length, config.max_position_embeddings
            )));
        }
        let vocab = tokenizer.get_vocab_size(true);
        if vocab > config.vocab_size {
            return Err(PieError::invalid(format!(
                "tokenizer has {vocab} entries but the model vocabulary is {}",
                config.vocab_size
            )));
        }
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let model = be(Bert::load(vb.clone(), &config))?;
        let head = match head {
            Some(out) => Some(be(candle_nn::linear(config.hidden_size, out, vb.pp("classifier")))?),
            None => None,
        };
        Ok(Self {
            config_json,
            config,
            tokenizer,
            settings,
            varmap,
            model,
            head,
            device,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn sorted_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("varmap lock");
        let mut vars: Vec<(String, Var)> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn parameter_count(&self) -> usize {
        self.sorted_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.sorted_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Seeded initialisation: normal weights with the config's
    /// `initializer_range`, zero biases, unit layer-norm gains.
    pub fn init_seeded(&self, seed: u64) -> Result<()> {
        let mut rng = substream(seed, "transformer/init");
        let normal = Normal::new(0.0f32, self.config.initializer_range as f32)
            .map_err(|e| PieError::invalid(e.to_string()))?;
        for (name, var) in self.sorted_vars() {
            let shape = var.shape().clone();
            let n = shape.elem_count();
            let is_norm = name.contains("LayerNorm") || name.contains("layer_norm");
            let values: Vec<f32> = if name.ends_with("bias") || name.ends_with("beta") {
                vec![0.0; n]
            } else if is_norm {
                vec![1.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            let t = be(Tensor::from_vec(values, shape, &self.device))?;
            be(var.set(&t))?;
        }
        Ok(())
    }

    /// Fills every variable from a safetensors file. Names may carry a
    /// `bert.` prefix and layer norms may use `gamma`/`beta`. With
    /// `allow_missing_head`, a missing `classifier.*` keeps its current value.
    pub fn load_weights(&self, path: &Path, allow_missing_head: bool) -> Result<()> {
        let tensors = be(candle_core::safetensors::load(path, &self.device))?;
        for (name, var) in self.sorted_vars() {
            match lookup(&tensors, &name) {
                Some(t) => {
                    let t = be(t.to_dtype(DType::F32))?;
                    be(var.set(&t)).map_err(|e| PieError::Checkpoint(format!("{name}: {e}")))?;
                }
                None if allow_missing_head && name.starts_with("classifier.") => {
                    warn!("{}: no {name}; keeping initial head", path.display());
                }
                None => {
                    return Err(PieError::Checkpoint(format!("{} has no tensor for {name}", path.display())));
                }
            }
        }
        Ok(())
    }

    /// Copies of all variable values, keyed by name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.sorted_vars()
            .into_iter()
            .map(|(k, v)| Ok((k, be(v.as_tensor().copy())?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.sorted_vars() {
            let t = snapshot
                .get(&name)
                .ok_or_else(|| PieError::Checkpoint(format!("snapshot lacks {name}")))?;
            be(var.set(t))?;
        }
        Ok(())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::build(
            self.config_json.clone(),
            self.tokenizer.clone(),
            self.settings,
            self.head.as_ref().map(|h| h.weight().dims()[0]),
        )?;
        copy.restore(&self.snapshot()?)?;
        Ok(copy)
    }

    /// Writes `config.json`, `tokenizer.json` and `model.safetensors`.
    pub fn save_files(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| PieError::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config_json)?).map_err(|e| PieError::io(&cfg_path, e))?;
        let tok_path = dir.join(TOKENIZER_FILE);
        self.tokenizer
            .save(&tok_path, false)
            .map_err(|e| PieError::Backend(format!("{}: {e}", tok_path.display())))?;
        let snapshot = self.snapshot()?;
        be(candle_core::safetensors::save(&snapshot, dir.join(WEIGHTS_FILE)))
    }

    pub fn read_files(dir: &Path) -> Result<(serde_json::Value, Tokenizer)> {
        let cfg_path = dir.join(CONFIG_FILE);
        let body = fs::read_to_string(&cfg_path).map_err(|e| PieError::io(&cfg_path, e))?;
        let tok_path = dir.join(TOKENIZER_FILE);
        let tokenizer = Tokenizer::from_file(&tok_path)
            .map_err(|e| PieError::Backend(format!("{}: {e}", tok_path.display())))?;
        Ok((serde_json::from_str(&body)?, tokenizer))
    }

    /// Token ids for one text, truncated to `max_length` with the final
    /// special token kept.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let enc = self
            .tokenizer
            .encode(text, true)
            .map_err(|e| PieError::Backend(format!("tokenizer: {e}")))?;
        let mut ids = enc.get_ids().to_vec();
        if ids.is_empty() {
            return Err(PieError::invalid(format!("text {text:?} produced no tokens")));
        }
        self.truncate(&mut ids, text);
        Ok(ids)
    }

    /// Token ids and, for each word, the index of its first sub-token
    /// (`None` when truncation dropped it).
    pub fn encode_words(&self, words: &[String]) -> Result<(Vec<u32>, Vec<Option<usize>>)> {
        let enc = self
            .tokenizer
            .encode(words, true)
            .map_err(|e| PieError::Backend(format!("tokenizer: {e}")))?;
        let mut ids = enc.get_ids().to_vec();
        let word_ids = enc.get_word_ids();
        let truncated = self.truncate(&mut ids, &words.join(" "));
        let limit = if truncated { ids.len() - 1 } else { ids.len() };
        let mut first = vec![None; words.len()];
        for (pos, w) in word_ids.iter().enumerate().take(limit) {
            if let Some(w) = w {
                let w = *w as usize;
                if w < first.len() && first[w].is_none() {
                    first[w] = Some(pos);
                }
            }
        }
        Ok((ids, first))
    }

    fn truncate(&self, ids: &mut Vec<u32>, text: &str) -> bool {
        let max = self.settings.max_length;
        if ids.len() <= max {
            return false;
        }
        let last = *ids.last().expect("non-empty");
        warn!("truncating {} tokens to {max}: {:.40}", ids.len(), text);
        ids.truncate(max - 1);
        ids.push(last);
        true
    }

    /// Final-layer states, shape `(batch, len, hidden)`, for equal-length rows.
    pub fn forward(&self, rows: &[&[u32]]) -> Result<Tensor> {
        let len = rows[0].len();
        let flat: Vec<u32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let ids = be(Tensor::from_vec(flat, (rows.len(), len), &self.device))?;
        be(self.model.forward(&ids))
    }

    pub fn head_logits(&self, states: &Tensor) -> Result<Tensor> {
        let head = self.head.as_ref().ok_or_else(|| PieError::Backend("model has no classifier head".into()))?;
        be(head.forward(states))
    }
}

fn lookup<'a>(tensors: &'a HashMap<String, Tensor>, name: &str) -> Option<&'a Tensor> {
    let alt = name.replace("LayerNorm.weight", "LayerNorm.gamma").replace("LayerNorm.bias", "LayerNorm.beta");
    [name.to_string(), format!("bert.{name}"), alt.clone(), format!("bert.{alt}")]
        .iter()
        .find_map(|k| tensors.get(k))
}

/// Groups text indices by token length so each forward pass is unpadded.
pub(crate) fn group_by_length(encoded: &[Vec<u32>]) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, ids) in encoded.iter().enumerate() {
        groups.entry(ids.len()).or_default().push(i);
    }
    groups.into_values().collect()
}
