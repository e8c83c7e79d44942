use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use pie_core::encoder::MANIFEST_FILE;
use pie_core::irl::{
    bio_to_spans, evaluate_tagger, Annotation, EpochRecord, IrlSpan, IrlTagger, Tag, TagSequence, TaggerLog,
    TrainingOptions, TAG_COUNT,
};
use pie_core::rng::{derive_seed, rng_from_seed};
use pie_core::{PieError, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tokenizers::Tokenizer;

use crate::backbone::{Backbone, TransformerSettings, WEIGHTS_FILE};
use crate::be;

pub const TRANSFORMER_TAGGER_BACKEND: &str = "transformer-token-classifier";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaggerManifest {
    backend: String,
    tags: usize,
    #[serde(default)]
    settings: TransformerSettings,
}

/// BERT encoder with a 13-way token classification head. Each word is
/// labelled from the state of its first sub-token.
pub struct TransformerTagger {
    backbone: Backbone,
}

impl TransformerTagger {
    pub fn new_random(config: serde_json::Value, tokenizer: Tokenizer, settings: TransformerSettings, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(config, tokenizer, settings, Some(TAG_COUNT))?;
        backbone.init_seeded(seed)?;
        Ok(Self { backbone })
    }

    /// Starts from encoder weights in `dir` (a transformer checkpoint or a
    /// plain model directory). The head is seeded when the weights lack one.
    pub fn from_pretrained(dir: impl AsRef<Path>, settings: TransformerSettings, seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let (config, tokenizer) = Backbone::read_files(dir)?;
        let backbone = Backbone::build(config, tokenizer, settings, Some(TAG_COUNT))?;
        backbone.init_seeded(seed)?;
        backbone.load_weights(&dir.join(WEIGHTS_FILE), true)?;
        Ok(Self { backbone })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let body = fs::read_to_string(&path).map_err(|e| PieError::io(&path, e))?;
        let manifest: TaggerManifest = serde_json::from_str(&body)?;
        if manifest.backend != TRANSFORMER_TAGGER_BACKEND || manifest.tags != TAG_COUNT {
            return Err(PieError::Checkpoint(format!(
                "{}: expected a {TRANSFORMER_TAGGER_BACKEND} with {TAG_COUNT} tags",
                dir.display()
            )));
        }
        let (config, tokenizer) = Backbone::read_files(dir)?;
        let backbone = Backbone::build(config, tokenizer, manifest.settings, Some(TAG_COUNT))?;
        backbone.load_weights(&dir.join(WEIGHTS_FILE), false)?;
        Ok(Self { backbone })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.backbone.save_files(dir)?;
        let manifest = TaggerManifest {
            backend: TRANSFORMER_TAGGER_BACKEND.into(),
            tags: TAG_COUNT,
            settings: self.backbone.settings,
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| PieError::io(&path, e))
    }

    /// Logits at each word's first sub-token, shape `(kept words, 13)`,
    /// plus the word indices that survived truncation.
    fn word_logits(&self, tokens: &[String]) -> Result<(Tensor, Vec<usize>)> {
        if tokens.is_empty() {
            return Err(PieError::invalid("cannot tag an empty token list"));
        }
        let (ids, first) = self.backbone.encode_words(tokens)?;
        let states = self.backbone.forward(&[ids.as_slice()])?;
        let states = be(states.squeeze(0))?;
        let kept: Vec<usize> = (0..tokens.len()).filter(|&w| first[w].is_some()).collect();
        if kept.is_empty() {
            return Err(PieError::Backend("no word survived tokenisation".into()));
        }
        let positions: Vec<u32> = kept.iter().map(|&w| first[w].expect("kept") as u32).collect();
        let index = be(Tensor::new(positions.as_slice(), &self.backbone.device))?;
        let picked = be(states.index_select(&index, 0))?;
        Ok((self.backbone.head_logits(&picked)?, kept))
    }

    pub fn predict_tags(&self, tokens: &[String]) -> Result<TagSequence> {
        let (logits, kept) = self.word_logits(tokens)?;
        let best = be(be(logits.argmax(D::Minus1))?.to_vec1::<u32>())?;
        let mut tags = vec![Tag::Outside; tokens.len()];
        for (&w, &t) in kept.iter().zip(&best) {
            tags[w] = Tag::from_index(t as usize).expect("head has 13 outputs");
        }
        Ok(TagSequence(tags))
    }

    fn batch_loss(&self, batch: &[&Annotation]) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for a in batch {
            let (logits, kept) = self.word_logits(&a.tokens)?;
            let targets: Vec<u32> = kept.iter().map(|&w| a.tags.as_slice()[w].index() as u32).collect();
            let targets = be(Tensor::new(targets.as_slice(), &self.backbone.device))?;
            let loss = be(candle_nn::loss::cross_entropy(&logits, &targets))?;
            total = Some(match total {
                Some(t) => be(t.add(&loss))?,
                None => loss,
            });
        }
        let total = total.ok_or_else(|| PieError::invalid("empty batch"))?;
        be(total.affine(1.0 / batch.len() as f64, 0.0))
    }
}

impl IrlTagger for TransformerTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<IrlSpan>> {
        Ok(bio_to_spans(&self.predict_tags(tokens)?))
    }
}

fn span_f1(model: &TransformerTagger, data: &[Annotation]) -> Result<f64> {
    let gold: Vec<_> = data.iter().map(Annotation::spans).collect();
    let pred = data.iter().map(|a| model.tag(&a.tokens)).collect::<Result<Vec<_>>>()?;
    Ok(evaluate_tagger(&gold, &pred)?.micro.f1)
}

/// Fine-tunes `model` with per-token cross entropy and AdamW, keeping the
/// epoch with the best validation micro span-F1 (the last epoch when
/// `valid` is empty).
pub fn train_transformer_tagger(
    model: TransformerTagger,
    train: &[Annotation],
    valid: &[Annotation],
    options: &TrainingOptions,
) -> Result<(TransformerTagger, TaggerLog)> {
    if train.is_empty() {
        return Err(PieError::invalid("empty training set"));
    }
    if options.batch_size == 0 {
        return Err(PieError::invalid("batch_size must be positive"));
    }
    for (i, a) in train.iter().chain(valid).enumerate() {
        if a.tokens.is_empty() || a.tokens.len() != a.tags.len() {
            return Err(PieError::Shape(format!("annotation {i}: {} tokens, {} tags", a.tokens.len(), a.tags.len())));
        }
    }
    if valid.is_empty() {
        warn!("no validation annotations; keeping the final epoch");
    }
    let params = ParamsAdamW {
        lr: options.learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = be(AdamW::new(model.backbone.vars(), params))?;
    let mut log = TaggerLog::default();
    let mut best: Option<(f64, std::collections::HashMap<String, Tensor>, usize)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(options.seed, &format!("tagger/epoch{epoch}"))));
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<&Annotation> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = model.batch_loss(&batch)?;
            sum += be(be(loss.to_dtype(DType::F64))?.to_scalar::<f64>())?;
            batches += 1;
            be(opt.backward_step(&loss))?;
        }
        let train_f1 = span_f1(&model, train)?;
        let valid_f1 = if valid.is_empty() { None } else { Some(span_f1(&model, valid)?) };
        let record = EpochRecord {
            epoch,
            train_loss: sum / batches as f64,
            train_f1,
            valid_f1,
        };
        info!("tagger epoch {epoch}: loss {:.4} train F1 {:.3} valid F1 {:?}", record.train_loss, train_f1, valid_f1);
        log.epochs.push(record);
        let score = valid_f1.unwrap_or(epoch as f64);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, model.backbone.snapshot()?, epoch));
        }
    }
    if let Some((_, snapshot, epoch)) = best {
        model.backbone.restore(&snapshot)?;
        log.selected_epoch = epoch;
    }
    Ok((model, log))
}
