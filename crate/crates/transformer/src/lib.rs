//! BERT-family backends for `pie-core`.
//!
//! [`TransformerEncoder`] implements the sentence-encoder traits with mean
//! pooling over final-layer states. [`TransformerTagger`] adds a token
//! classification head for role labelling. Both read and write a plain
//! model directory (`config.json`, `tokenizer.json`, `model.safetensors`)
//! plus a `manifest.json`, so published BERT checkpoints load directly.
//!
//! For desk-scale runs without downloaded weights, [`word_level_tokenizer`]
//! and [`small_bert_config`] build a small randomly initialised model over a
//! corpus vocabulary.
//!
//! ```
//! use pie_core::encoder::SentenceEncoder;
//! use pie_transformer::{small_bert_config, word_level_tokenizer, TransformerEncoder, TransformerSettings};
//!
//! let tokenizer = word_level_tokenizer(&["book a flight", "play some music"]).unwrap();
//! let config = small_bert_config(tokenizer.get_vocab_size(true), 16, 1, 2);
//! let enc = TransformerEncoder::new_random(config, tokenizer, TransformerSettings::default(), 7).unwrap();
//! let v = enc.embed(&["book a flight", "book a flight"]).unwrap();
//! assert_eq!(v[0].dim(), 16);
//! assert_eq!(v[0], v[1]);
//! ```

mod backbone;
mod bert;
mod encoder;
mod tagger;

pub use backbone::{TransformerSettings, CONFIG_FILE, DEFAULT_MAX_LENGTH, TOKENIZER_FILE, WEIGHTS_FILE};
pub use encoder::TransformerEncoder;
pub use tagger::{train_transformer_tagger, TransformerTagger, TRANSFORMER_TAGGER_BACKEND};

use std::collections::BTreeSet;
use std::str::FromStr;

use pie_core::{PieError, Result};
use tokenizers::pre_tokenizers::whitespace::Whitespace;
use tokenizers::{OffsetReferential, OffsetType, PreTokenizedString, PreTokenizer, Tokenizer};

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

pub(crate) fn be<T>(r: candle_core::Result<T>) -> Result<T> {
    r.map_err(|e| PieError::Backend(e.to_string()))
}

/// Lowercased word and punctuation pieces, as the word-level tokenizer
/// splits them.
pub fn word_pieces(text: &str) -> Result<Vec<String>> {
    let mut pts = PreTokenizedString::from(text.to_lowercase().as_str());
    Whitespace {}
        .pre_tokenize(&mut pts)
        .map_err(|e| PieError::Backend(e.to_string()))?;
    Ok(pts
        .get_splits(OffsetReferential::Original, OffsetType::Byte)
        .into_iter()
        .map(|(s, _, _)| s.to_string())
        .collect())
}

/// A lowercasing word-level tokenizer over every piece in `texts`, with
/// `[CLS] … [SEP]` framing. Ids follow [`SPECIAL_TOKENS`], then the pieces
/// in sorted order.
pub fn word_level_tokenizer<S: AsRef<str>>(texts: &[S]) -> Result<Tokenizer> {
    let mut words = BTreeSet::new();
    for t in texts {
        words.extend(word_pieces(t.as_ref())?);
    }
    let vocab: serde_json::Map<String, serde_json::Value> = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(words.into_iter().filter(|w| !SPECIAL_TOKENS.contains(&w.as_str())))
        .enumerate()
        .map(|(i, w)| (w, serde_json::json!(i)))
        .collect();
    let special = |name: &str, id: usize| serde_json::json!({"id": name, "ids": [id], "tokens": [name]});
    let added: Vec<serde_json::Value> = SPECIAL_TOKENS
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({"id": i, "content": s, "single_word": false, "lstrip": false,
                "rstrip": false, "normalized": false, "special": true})
        })
        .collect();
    let spec = serde_json::json!({
        "version": "1.0",
        "truncation": null,
        "padding": null,
        "added_tokens": added,
        "normalizer": {"type": "Lowercase"},
        "pre_tokenizer": {"type": "Whitespace"},
        "post_processor": {
            "type": "TemplateProcessing",
            "single": [
                {"SpecialToken": {"id": "[CLS]", "type_id": 0}},
                {"Sequence": {"id": "A", "type_id": 0}},
                {"SpecialToken": {"id": "[SEP]", "type_id": 0}}
            ],
            "pair": [
                {"SpecialToken": {"id": "[CLS]", "type_id": 0}},
                {"Sequence": {"id": "A", "type_id": 0}},
                {"SpecialToken": {"id": "[SEP]", "type_id": 0}},
                {"Sequence": {"id": "B", "type_id": 1}},
                {"SpecialToken": {"id": "[SEP]", "type_id": 1}}
            ],
            "special_tokens": {"[CLS]": special("[CLS]", 2), "[SEP]": special("[SEP]", 3)}
        },
        "decoder": null,
        "model": {"type": "WordLevel", "vocab": vocab, "unk_token": "[UNK]"}
    });
    Tokenizer::from_str(&spec.to_string()).map_err(|e| PieError::Backend(format!("tokenizer: {e}")))
}

/// A BERT `config.json` body with `layers` layers of width `hidden`.
pub fn small_bert_config(vocab_size: usize, hidden: usize, layers: usize, heads: usize) -> serde_json::Value {
    serde_json::json!({
        "architectures": ["BertModel"],
        "model_type": "bert",
        "vocab_size": vocab_size,
        "hidden_size": hidden,
        "num_hidden_layers": layers,
        "num_attention_heads": heads,
        "intermediate_size": 4 * hidden,
        "hidden_act": "gelu",
        "hidden_dropout_prob": 0.1,
        "attention_probs_dropout_prob": 0.1,
        "max_position_embeddings": 512,
        "type_vocab_size": 2,
        "initializer_range": 0.02,
        "layer_norm_eps": 1e-12,
        "pad_token_id": 0,
        "position_embedding_type": "absolute",
        "use_cache": true,
        "classifier_dropout": null
    })
}
