//! A small trainable token tagger.
//!
//! Each token is represented by hashed window features (the word, its
//! neighbours at distance one and two, adjacent bigrams and a suffix).
//! The token encoder sums trainable feature embeddings and applies `tanh`;
//! a linear head maps that state to the 13 BIO tags. Training minimises
//! per-token cross entropy with Adam, updating only the feature rows that
//! occur in a batch.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{bio_to_spans, evaluate_tagger, Annotation, IrlSpan, IrlTagger, Tag, TagSequence, TAG_COUNT};
use crate::encoder::{MANIFEST_FILE, PARAMS_FILE};
use crate::error::{PieError, Result};
use crate::optim::AdamConfig;
use crate::rng::{derive_seed, rng_from_seed};
use crate::text::hash_bin;

pub const TAGGER_BACKEND: &str = "hashed-window";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedTaggerConfig {
    pub hidden_dim: usize,
    pub hash_bins: usize,
    pub seed: u64,
}

impl Default for HashedTaggerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 48,
            hash_bins: 1 << 15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_f1: f64,
    pub valid_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaggerLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means the initialisation.
    pub selected_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct HashedTagger {
    config: HashedTaggerConfig,
    /// Feature table (`hash_bins × hidden`), head weights (`13 × hidden`), head bias (13).
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TaggerManifest {
    format_version: u32,
    backend: String,
    config: HashedTaggerConfig,
}

fn window_features(tokens: &[String], i: usize) -> [String; 9] {
    let at = |j: isize| -> String {
        if j < 0 {
            "<s>".into()
        } else if j as usize >= tokens.len() {
            "</s>".into()
        } else {
            tokens[j as usize].to_lowercase()
        }
    };
    let i = i as isize;
    let w0 = at(i);
    let suffix: String = {
        let chars: Vec<char> = w0.chars().collect();
        chars[chars.len().saturating_sub(3)..].iter().collect()
    };
    [
        "bias".to_string(),
        format!("w0={w0}"),
        format!("w-1={}", at(i - 1)),
        format!("w+1={}", at(i + 1)),
        format!("w-2={}", at(i - 2)),
        format!("w+2={}", at(i + 2)),
        format!("w-1w0={}|{w0}", at(i - 1)),
        format!("w0w+1={w0}|{}", at(i + 1)),
        format!("suf3={suffix}"),
    ]
}

/// Cached forward state of one token.
struct TokenState {
    feats: Vec<usize>,
    hidden: Vec<f64>,
    probs: [f64; TAG_COUNT],
}

impl HashedTagger {
    pub fn new(config: HashedTaggerConfig) -> Result<Self> {
        if config.hidden_dim == 0 || config.hash_bins == 0 {
            return Err(PieError::invalid("tagger hidden_dim and hash_bins must be positive"));
        }
        let mut rng = rng_from_seed(config.seed);
        let h = config.hidden_dim;
        let table = config.hash_bins * h;
        let head_scale = 1.0 / (h as f64).sqrt();
        let mut params = Vec::with_capacity(table + TAG_COUNT * h + TAG_COUNT);
        for _ in 0..table {
            params.push(0.1 * rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..TAG_COUNT * h {
            params.push(head_scale * rng.sample::<f64, _>(StandardNormal));
        }
        params.extend(std::iter::repeat_n(0.0, TAG_COUNT));
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &HashedTaggerConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn table_len(&self) -> usize {
        self.config.hash_bins * self.config.hidden_dim
    }

    fn features(&self, tokens: &[String], i: usize) -> Vec<usize> {
        window_features(tokens, i)
            .iter()
            .map(|f| hash_bin(f, self.config.hash_bins))
            .collect()
    }

    fn forward_token(&self, tokens: &[String], i: usize) -> TokenState {
        let h = self.config.hidden_dim;
        let feats = self.features(tokens, i);
        let mut pre = vec![0.0; h];
        for &f in &feats {
            pre.iter_mut()
                .zip(&self.params[f * h..(f + 1) * h])
                .for_each(|(a, x)| *a += x);
        }
        let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();
        let w = &self.params[self.table_len()..self.table_len() + TAG_COUNT * h];
        let b = &self.params[self.table_len() + TAG_COUNT * h..];
        let mut logits = [0.0; TAG_COUNT];
        for (t, l) in logits.iter_mut().enumerate() {
            *l = b[t] + w[t * h..(t + 1) * h].iter().zip(&hidden).map(|(a, x)| a * x).sum::<f64>();
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = [0.0; TAG_COUNT];
        let mut z = 0.0;
        for (p, l) in probs.iter_mut().zip(&logits) {
            *p = (l - max).exp();
            z += *p;
        }
        probs.iter_mut().for_each(|p| *p /= z);
        TokenState { feats, hidden, probs }
    }

    /// Per-token tag distributions; each row sums to one.
    pub fn tag_distribution(&self, tokens: &[String]) -> Result<Vec<[f64; TAG_COUNT]>> {
        if tokens.is_empty() {
            return Err(PieError::invalid("cannot tag an empty token list"));
        }
        Ok((0..tokens.len()).map(|i| self.forward_token(tokens, i).probs).collect())
    }

    /// Argmax tag per token.
    pub fn predict_tags(&self, tokens: &[String]) -> Result<TagSequence> {
        let dist = self.tag_distribution(tokens)?;
        Ok(TagSequence(
            dist.iter()
                .map(|p| {
                    let best = p
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, v)| if *v > p[best] { i } else { best });
                    Tag::from_index(best).expect("index < 13")
                })
                .collect(),
        ))
    }

    /// Mean token cross entropy over a batch, accumulating gradients into `grad`.
    fn accumulate(&self, batch: &[&Annotation], grad: &mut [f64], touched: &mut BTreeSet<usize>) -> f64 {
        let h = self.config.hidden_dim;
        let table = self.table_len();
        let n_tokens: usize = batch.iter().map(|a| a.tokens.len()).sum();
        let scale = 1.0 / n_tokens.max(1) as f64;
        let mut loss = 0.0;
        for a in batch {
            for (i, gold) in a.tags.0.iter().enumerate() {
                let st = self.forward_token(&a.tokens, i);
                let y = gold.index();
                loss -= st.probs[y].max(1e-300).ln();
                let mut dlogit = st.probs;
                dlogit[y] -= 1.0;
                let mut dh = vec![0.0; h];
                for (t, dl) in dlogit.iter().enumerate() {
                    let dl = dl * scale;
                    let w_row = table + t * h;
                    for k in 0..h {
                        grad[w_row + k] += dl * st.hidden[k];
                        dh[k] += dl * self.params[w_row + k];
                    }
                    grad[table + TAG_COUNT * h + t] += dl;
                }
                for k in 0..h {
                    dh[k] *= 1.0 - st.hidden[k] * st.hidden[k];
                }
                for &f in &st.feats {
                    touched.insert(f);
                    grad[f * h..(f + 1) * h]
                        .iter_mut()
                        .zip(&dh)
                        .for_each(|(g, d)| *g += d);
                }
            }
        }
        loss * scale
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| PieError::io(dir, e))?;
        let manifest = TaggerManifest {
            format_version: 1,
            backend: TAGGER_BACKEND.into(),
            config: self.config,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| PieError::io(&path, e))?;
        crate::encoder::write_f64_blob(&dir.join(PARAMS_FILE), &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let body = fs::read_to_string(&path).map_err(|e| PieError::io(&path, e))?;
        let manifest: TaggerManifest = serde_json::from_str(&body)?;
        if manifest.backend != TAGGER_BACKEND {
            return Err(PieError::Checkpoint(format!(
                "{} holds a `{}` tagger",
                dir.display(),
                manifest.backend
            )));
        }
        let mut model = Self::new(manifest.config)?;
        let params = crate::encoder::read_f64_blob(&dir.join(PARAMS_FILE))?;
        if params.len() != model.params.len() {
            return Err(PieError::Checkpoint("tagger parameter count mismatch".into()));
        }
        model.params = params;
        Ok(model)
    }
}

/// Reads the backend name from a tagger checkpoint directory.
pub fn tagger_backend(dir: impl AsRef<Path>) -> Result<String> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let body = fs::read_to_string(&path).map_err(|e| PieError::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&body)?;
    Ok(v.get("backend").and_then(|b| b.as_str()).unwrap_or_default().to_string())
}

impl IrlTagger for HashedTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<IrlSpan>> {
        Ok(bio_to_spans(&self.predict_tags(tokens)?))
    }
}

fn span_f1<T: IrlTagger>(model: &T, data: &[Annotation]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let gold: Vec<_> = data.iter().map(Annotation::spans).collect();
    let pred = data
        .iter()
        .map(|a| model.tag(&a.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_tagger(&gold, &pred)?.micro.f1)
}

fn check_annotations(data: &[Annotation], what: &str) -> Result<()> {
    for (i, a) in data.iter().enumerate() {
        if a.tokens.len() != a.tags.len() {
            return Err(PieError::Shape(format!(
                "{what} annotation {i}: {} tokens but {} tags",
                a.tokens.len(),
                a.tags.len()
            )));
        }
        if a.tokens.is_empty() {
            return Err(PieError::invalid(format!("{what} annotation {i} has no tokens")));
        }
    }
    Ok(())
}

/// Trains a fresh [`HashedTagger`], keeping the epoch with the best
/// validation micro span-F1 (the last epoch when `valid` is empty).
pub fn train_tagger(
    train: &[Annotation],
    valid: &[Annotation],
    config: HashedTaggerConfig,
    options: &TrainingOptions,
) -> Result<(HashedTagger, TaggerLog)> {
    if train.is_empty() {
        return Err(PieError::invalid("empty training set"));
    }
    check_annotations(train, "training")?;
    check_annotations(valid, "validation")?;
    if options.batch_size == 0 {
        return Err(PieError::invalid("batch_size must be positive"));
    }
    if valid.is_empty() && options.epochs > 0 {
        warn!("no validation annotations; keeping the final epoch");
    }

    let mut model = HashedTagger::new(config)?;
    let mut log = TaggerLog::default();
    let adam_cfg = AdamConfig::default().with_learning_rate(options.learning_rate);
    let n = model.params.len();
    let table = model.table_len();
    let h = config.hidden_dim;
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut t = 0i32;
    let mut grad = vec![0.0; n];
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(options.seed, &format!("tagger/epoch{epoch}"))));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<&Annotation> = chunk.iter().map(|&i| &train[i]).collect();
            let mut touched = BTreeSet::new();
            epoch_loss += model.accumulate(&batch, &mut grad, &mut touched);
            batches += 1;
            t += 1;
            let bc1 = 1.0 - adam_cfg.beta1.powi(t);
            let bc2 = 1.0 - adam_cfg.beta2.powi(t);
            let mut update = |idx: usize, params: &mut [f64], grad: &mut [f64]| {
                let g = grad[idx];
                m[idx] = adam_cfg.beta1 * m[idx] + (1.0 - adam_cfg.beta1) * g;
                v[idx] = adam_cfg.beta2 * v[idx] + (1.0 - adam_cfg.beta2) * g * g;
                params[idx] -= adam_cfg.learning_rate * (m[idx] / bc1)
                    / ((v[idx] / bc2).sqrt() + adam_cfg.epsilon);
                grad[idx] = 0.0;
            };
            for &f in &touched {
                for idx in f * h..(f + 1) * h {
                    update(idx, &mut model.params, &mut grad);
                }
            }
            for idx in table..n {
                update(idx, &mut model.params, &mut grad);
            }
        }
        let train_f1 = span_f1(&model, train)?;
        let valid_f1 = if valid.is_empty() {
            None
        } else {
            Some(span_f1(&model, valid)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            train_f1,
            valid_f1,
        };
        info!(
            "tagger epoch {epoch}: loss {:.4} train F1 {:.3} valid F1 {:?}",
            record.train_loss, record.train_f1, record.valid_f1
        );
        log.epochs.push(record);
        let score = valid_f1.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, model.params.clone(), epoch));
        }
    }
    if let Some((_, params, epoch)) = best {
        model.params = params;
        log.selected_epoch = epoch;
    }
    Ok((model, log))
}
