use std::collections::HashMap;

use pie_core::contrastive::{pretrain, PretrainConfig};
use pie_core::corpus::{IntentName, Utterance};
use pie_core::encoder::{read_manifest, Backend, SentenceEncoder, TrainableEncoder};
use pie_core::irl::{Annotation, IrlSpan, IrlTagger, RoleLabel, TrainingOptions};
use pie_core::optim::AdamConfig;
use pie_core::pseudo::{PseudoIntent, TrainingTriple};
use pie_transformer::*;

const TEXTS: [&str; 6] = [
    "book a flight to paris",
    "play some jazz music",
    "what is my account balance",
    "cancel my gym membership please",
    "set an alarm for seven",
    "i'd like to order a pizza",
];

fn encoder(seed: u64) -> TransformerEncoder {
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    let cfg = small_bert_config(tok.get_vocab_size(true), 16, 2, 2);
    TransformerEncoder::new_random(cfg, tok, TransformerSettings::default(), seed).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn word_level_tokenizer_frames_and_maps_unknowns() {
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    assert_eq!(word_pieces("I'd like").unwrap(), vec!["i", "'", "d", "like"]);
    let enc = tok.encode("Book a ZEPPELIN", true).unwrap();
    let ids = enc.get_ids();
    assert_eq!(ids[0], 2);
    assert_eq!(*ids.last().unwrap(), 3);
    assert_eq!(ids[3], 1, "unknown word maps to [UNK]");
}

#[test]
fn embeddings_are_deterministic_and_batch_independent() {
    let enc = encoder(1);
    let batch = enc.embed(&TEXTS).unwrap();
    assert!(batch.iter().all(|e| e.dim() == 16));
    for (t, e) in TEXTS.iter().zip(&batch) {
        let single = enc.embed_one(t).unwrap();
        for (a, b) in single.as_slice().iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-5, "{t}: {a} vs {b}");
        }
    }
    let twice = enc.embed(&[TEXTS[0], TEXTS[0]]).unwrap();
    assert_eq!(twice[0], twice[1]);
    assert!(enc.embed(&["  "]).is_err());
}

#[test]
fn seeded_init_and_checkpoint_round_trip() {
    let a = encoder(3);
    let b = encoder(3);
    assert_eq!(a.embed(&TEXTS).unwrap(), b.embed(&TEXTS).unwrap());
    assert_ne!(a.embed(&TEXTS).unwrap(), encoder(4).embed(&TEXTS).unwrap());

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.backend, Backend::Transformer);
    assert_eq!(manifest.dim, 16);
    let loaded = TransformerEncoder::load(dir.path()).unwrap();
    assert_eq!(a.embed(&TEXTS).unwrap(), loaded.embed(&TEXTS).unwrap());

    let other = tempfile::tempdir().unwrap();
    b.save(other.path()).unwrap();
    let bytes = |d: &std::path::Path| std::fs::read(d.join(WEIGHTS_FILE)).unwrap();
    assert_eq!(bytes(dir.path()), bytes(other.path()));
}

#[test]
fn prefixed_weight_names_load() {
    let enc = encoder(5);
    let dir = tempfile::tempdir().unwrap();
    enc.save(dir.path()).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let tensors = candle_core::safetensors::load(&path, &candle_core::Device::Cpu).unwrap();
    let renamed: HashMap<String, candle_core::Tensor> = tensors.into_iter().map(|(k, v)| (format!("bert.{k}"), v)).collect();
    candle_core::safetensors::save(&renamed, &path).unwrap();
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
    let loaded = TransformerEncoder::load(dir.path()).unwrap();
    assert_eq!(enc.embed(&TEXTS).unwrap(), loaded.embed(&TEXTS).unwrap());
}

#[test]
fn overlong_text_is_truncated() {
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    let cfg = small_bert_config(tok.get_vocab_size(true), 8, 1, 2);
    let settings = TransformerSettings { max_length: 6 };
    let enc = TransformerEncoder::new_random(cfg, tok, settings, 0).unwrap();
    let long = "book a flight to paris book a flight to paris book a flight";
    let v = enc.embed_one(long).unwrap();
    assert_eq!(v, enc.embed_one("book a flight to paris book").unwrap());
}

#[test]
fn backward_step_follows_the_upstream_gradient() {
    let mut enc = encoder(2);
    let frozen = enc.clone();
    let target: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let score = |e: &TransformerEncoder| dot(e.embed_one(TEXTS[0]).unwrap().as_slice(), &target);
    let before = score(&enc);
    let adam = AdamConfig::default().with_learning_rate(1e-2);
    let down: Vec<f64> = target.iter().map(|t| -t).collect();
    for _ in 0..10 {
        enc.backward_step(&[TEXTS[0]], std::slice::from_ref(&down), &adam).unwrap();
    }
    assert!(score(&enc) > before + 0.5, "{before} -> {}", score(&enc));
    assert_eq!(score(&frozen), before, "clones do not share weights");
    assert!(enc.parameter_count() > 0);
    assert!(enc.backward_step(&[TEXTS[0]], &[vec![0.0; 3]], &adam).is_err());
}

#[test]
fn pretrain_runs_on_the_transformer_backend() {
    let mut enc = encoder(9);
    let intents = ["book_flight", "play_music", "check_balance", "cancel_membership", "set_alarm", "order_pizza"];
    let triples: Vec<TrainingTriple> = TEXTS
        .iter()
        .zip(intents)
        .map(|(t, i)| TrainingTriple {
            utterance: Utterance::labelled(*t, i).unwrap(),
            gold_intent: IntentName::parse(i).unwrap(),
            gold_utterance: Utterance::labelled(*t, i).unwrap(),
            pseudo_intent: PseudoIntent { text: t.split(' ').take(2).collect::<Vec<_>>().join(" ") },
        })
        .collect();
    let cfg = PretrainConfig {
        epochs: 3,
        learning_rate: 1e-3,
        batch_size: 6,
        resample_gold_each_epoch: false,
        ..Default::default()
    };
    let log = pretrain(&mut enc, &triples, &cfg).unwrap();
    assert_eq!(log.steps.len(), 3);
    assert!(log.steps.iter().all(|s| s.loss.total.is_finite()));
    assert!(log.steps[2].loss.total < log.steps[0].loss.total, "{:?}", log.steps);
}

fn annotation(words: &str, spans: &[(RoleLabel, usize, usize)]) -> Annotation {
    let tokens: Vec<String> = words.split(' ').map(String::from).collect();
    let spans: Vec<IrlSpan> = spans.iter().map(|&(l, s, e)| IrlSpan::new(l, s, e)).collect();
    Annotation::from_spans(tokens, &spans).unwrap()
}

#[test]
fn tagger_learns_a_tiny_corpus_and_round_trips() {
    use RoleLabel::*;
    let data = vec![
        annotation("book a flight to paris", &[(Action, 0, 1), (Argument, 2, 3), (Slot, 4, 5)]),
        annotation("play some jazz music", &[(Action, 0, 1), (Argument, 3, 4)]),
        annotation("what is my account balance", &[(Query, 3, 5)]),
        annotation("cancel my gym membership please", &[(Action, 0, 1), (Argument, 2, 4)]),
        annotation("set an alarm for seven", &[(Action, 0, 1), (Argument, 2, 3), (Slot, 4, 5)]),
        annotation("i'd like to order a pizza", &[(Request, 0, 2), (Action, 3, 4), (Argument, 5, 6)]),
    ];
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    let cfg = small_bert_config(tok.get_vocab_size(true), 32, 1, 2);
    let init = TransformerTagger::new_random(cfg, tok, TransformerSettings::default(), 0).unwrap();
    let options = TrainingOptions {
        epochs: 40,
        learning_rate: 3e-3,
        batch_size: 3,
        seed: 0,
    };
    let (model, log) = train_transformer_tagger(init, &data, &[], &options).unwrap();
    assert_eq!(log.selected_epoch, 40);
    assert!(log.epochs.last().unwrap().train_f1 >= 0.9, "{:?}", log.epochs.last());

    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = TransformerTagger::load(dir.path()).unwrap();
    for a in &data {
        assert_eq!(model.tag(&a.tokens).unwrap(), loaded.tag(&a.tokens).unwrap());
    }
    assert!(TransformerEncoder::load(dir.path()).is_err());
}

#[test]
fn tagger_marks_truncated_words_outside() {
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    let cfg = small_bert_config(tok.get_vocab_size(true), 8, 1, 2);
    let model = TransformerTagger::new_random(cfg, tok, TransformerSettings { max_length: 4 }, 0).unwrap();
    let words: Vec<String> = "book a flight to paris".split(' ').map(String::from).collect();
    let tags = model.predict_tags(&words).unwrap();
    assert_eq!(tags.len(), 5);
    assert!(tags.as_slice()[2..].iter().all(|t| *t == pie_core::irl::Tag::Outside));
}

#[test]
fn tagger_starts_from_encoder_weights() {
    let enc = encoder(6);
    let dir = tempfile::tempdir().unwrap();
    enc.save(dir.path()).unwrap();
    let tagger = TransformerTagger::from_pretrained(dir.path(), TransformerSettings::default(), 1).unwrap();
    let words: Vec<String> = TEXTS[1].split(' ').map(String::from).collect();
    assert_eq!(tagger.predict_tags(&words).unwrap().len(), 4);
}

#[test]
fn forward_matches_the_reference_bert_implementation() {
    use candle_core::{DType, Device, Tensor};
    use candle_transformers::models::bert::{BertModel, Config};

    let enc = encoder(11);
    let dir = tempfile::tempdir().unwrap();
    enc.save(dir.path()).unwrap();
    let config: Config = serde_json::from_str(&std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap()).unwrap();
    let weights = candle_core::safetensors::load(dir.path().join(WEIGHTS_FILE), &Device::Cpu).unwrap();
    let vb = candle_nn::VarBuilder::from_tensors(weights, DType::F32, &Device::Cpu);
    let reference = BertModel::load(vb, &config).unwrap();
    let tok = word_level_tokenizer(&TEXTS).unwrap();
    for text in TEXTS {
        let ids = tok.encode(text, true).unwrap().get_ids().to_vec();
        let ids = Tensor::new(ids.as_slice(), &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let states = reference.forward(&ids, &ids.zeros_like().unwrap(), None).unwrap();
        let pooled: Vec<f32> = states.mean(1).unwrap().squeeze(0).unwrap().to_vec1().unwrap();
        let ours = enc.embed_one(text).unwrap();
        for (a, b) in pooled.iter().zip(ours.as_slice()) {
            assert!((f64::from(*a) - b).abs() < 1e-5, "{text}: {a} vs {b}");
        }
    }
}
