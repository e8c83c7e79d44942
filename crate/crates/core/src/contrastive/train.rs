use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{combined_loss, Batch, LossBreakdown, LossConfig};
use crate::corpus::{IntentName, Utterance};
use crate::encoder::TrainableEncoder;
use crate::error::{PieError, Result};
use crate::fingerprint::sha256_hex;
use crate::optim::AdamConfig;
use crate::proto::{zero_shot_accuracy, Metric};
use crate::pseudo::{resample_gold_utterances, TrainingTriple};
use crate::rng::{derive_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(flatten)]
    pub loss: LossConfig,
    pub seed: u64,
    /// Draw fresh same-intent partners before every epoch after the first.
    pub resample_gold_each_epoch: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 1e-6,
            batch_size: 50,
            loss: LossConfig::default(),
            seed: 0,
            resample_gold_each_epoch: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(PieError::invalid("batch_size must be at least 2 for in-batch negatives"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PieError::invalid("learning_rate must be positive"));
        }
        self.loss.validate()
    }

    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig::default().with_learning_rate(self.learning_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
    /// Epoch whose parameters were returned (0 = untouched input).
    pub selected_epoch: usize,
}

impl TrainingLog {
    pub fn first_step_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss.total)
    }
}

/// Held-out utterances scored by zero-shot label-prototype accuracy over
/// every intent in `intents`.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub utterances: Vec<Utterance>,
    pub intents: Vec<IntentName>,
    pub metric: Metric,
}

fn run_epoch<E: TrainableEncoder>(
    model: &mut E,
    triples: &mut [TrainingTriple],
    config: &PretrainConfig,
    epoch: usize,
    log: &mut TrainingLog,
) -> Result<()> {
    if epoch > 1 && config.resample_gold_each_epoch {
        resample_gold_utterances(triples, derive_seed(config.seed, &format!("pretrain/pairs{epoch}")));
    }
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(&mut substream(config.seed, &format!("pretrain/order{epoch}")));
    let optimizer = config.optimizer();
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in order.chunks(config.batch_size) {
        if chunk.len() < 2 {
            warn!("epoch {epoch}: dropping a trailing batch of one triple");
            continue;
        }
        let batch = Batch::from_triples(chunk.iter().map(|&i| &triples[i]));
        let out = combined_loss(&batch, &*model, &config.loss)?;
        let refs: Vec<&str> = out.texts.iter().map(String::as_str).collect();
        model.backward_step(&refs, &out.upstream, &optimizer)?;
        sum += out.breakdown.total;
        count += 1;
        log.steps.push(StepRecord {
            epoch,
            step: log.steps.len(),
            loss: out.breakdown,
        });
    }
    let mean = if count == 0 { f64::NAN } else { sum / count as f64 };
    info!("pretrain epoch {epoch}: {count} steps, mean loss {mean:.5}");
    log.epoch_mean_loss.push(mean);
    Ok(())
}

fn check_inputs(triples: &[TrainingTriple], config: &PretrainConfig) -> Result<()> {
    config.validate()?;
    if triples.is_empty() {
        return Err(PieError::invalid("no training triples"));
    }
    if triples.len() < 2 && config.epochs > 0 {
        return Err(PieError::invalid("at least two triples are needed to form a batch"));
    }
    Ok(())
}

/// Optimises `model` on shuffled mini-batches of `triples` and returns the
/// per-step loss log. The final parameters are kept.
pub fn pretrain<E: TrainableEncoder>(
    model: &mut E,
    triples: &[TrainingTriple],
    config: &PretrainConfig,
) -> Result<TrainingLog> {
    check_inputs(triples, config)?;
    let mut triples = triples.to_vec();
    let mut log = TrainingLog::default();
    for epoch in 1..=config.epochs {
        run_epoch(model, &mut triples, config, epoch, &mut log)?;
    }
    log.selected_epoch = config.epochs;
    Ok(log)
}

/// Like [`pretrain`], but scores the validation set after each epoch and
/// leaves `model` at the best-scoring epoch (earliest on ties).
pub fn pretrain_with_validation<E: TrainableEncoder + Clone>(
    model: &mut E,
    triples: &[TrainingTriple],
    config: &PretrainConfig,
    validation: &ValidationSet,
) -> Result<TrainingLog> {
    check_inputs(triples, config)?;
    let mut triples = triples.to_vec();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, E, usize)> = None;
    for epoch in 1..=config.epochs {
        run_epoch(model, &mut triples, config, epoch, &mut log)?;
        let acc = zero_shot_accuracy(&*model, &validation.utterances, &validation.intents, validation.metric)?;
        info!("pretrain epoch {epoch}: validation accuracy {:.2}%", 100.0 * acc);
        log.validation_accuracy.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, model.clone(), epoch));
        }
    }
    if let Some((_, m, epoch)) = best {
        *model = m;
        log.selected_epoch = epoch;
    }
    Ok(log)
}

/// What a pre-training run records next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub config: PretrainConfig,
    pub optimizer: String,
    pub adam: AdamConfig,
    pub triple_count: usize,
    pub triples_sha256: String,
    pub steps: usize,
    pub first_step_loss: Option<f64>,
    pub final_epoch_mean_loss: Option<f64>,
    pub selected_epoch: usize,
    pub validation_accuracy: Vec<f64>,
}

impl PretrainManifest {
    pub fn new(config: &PretrainConfig, triples: &[TrainingTriple], log: &TrainingLog) -> Self {
        let mut body = String::new();
        for t in triples {
            body.push_str(&t.utterance.text);
            body.push('\t');
            body.push_str(&t.gold_intent.raw);
            body.push('\t');
            body.push_str(&t.gold_utterance.text);
            body.push('\t');
            body.push_str(&t.pseudo_intent.text);
            body.push('\n');
        }
        Self {
            config: *config,
            optimizer: "adam".into(),
            adam: config.optimizer(),
            triple_count: triples.len(),
            triples_sha256: sha256_hex(body.as_bytes()),
            steps: log.steps.len(),
            first_step_loss: log.first_step_loss(),
            final_epoch_mean_loss: log.epoch_mean_loss.last().copied(),
            selected_epoch: log.selected_epoch,
            validation_accuracy: log.validation_accuracy.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ToyEncoder;
    use crate::pseudo::PseudoIntent;

    fn triples() -> Vec<TrainingTriple> {
        let rows = [
            ("book a flight to paris", "book_flight", "book flight"),
            ("i need a plane ticket", "book_flight", "need plane ticket"),
            ("play some jazz", "play_music", "play jazz"),
            ("put on a song", "play_music", "put song"),
            ("what is the weather", "get_weather", "weather"),
            ("will it rain today", "get_weather", "rain"),
        ];
        rows.iter()
            .map(|(t, i, p)| {
                let u = Utterance::labelled(*t, *i).unwrap();
                TrainingTriple {
                    gold_utterance: u.clone(),
                    gold_intent: IntentName::parse(i).unwrap(),
                    utterance: u,
                    pseudo_intent: PseudoIntent { text: p.to_string() },
                }
            })
            .collect()
    }

    fn cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            learning_rate: 0.02,
            batch_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut model = ToyEncoder::new(8, 64, 1).unwrap();
        let before = model.parameters().to_vec();
        let log = pretrain(&mut model, &triples(), &cfg(0)).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(model.parameters(), &before[..]);
    }

    #[test]
    fn loss_decreases_and_is_deterministic() {
        let mut a = ToyEncoder::new(8, 64, 1).unwrap();
        let mut b = a.clone();
        let mut t = triples();
        resample_gold_utterances(&mut t, 0);
        let la = pretrain(&mut a, &t, &cfg(30)).unwrap();
        let lb = pretrain(&mut b, &t, &cfg(30)).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_eq!(la, lb);
        assert!(la.epoch_mean_loss.last().unwrap() < &la.first_step_loss().unwrap());
    }

    #[test]
    fn invalid_batch_size() {
        let mut model = ToyEncoder::new(8, 64, 1).unwrap();
        let bad = PretrainConfig {
            batch_size: 1,
            ..cfg(1)
        };
        assert!(pretrain(&mut model, &triples(), &bad).is_err());
        assert!(pretrain(&mut model, &[], &cfg(1)).is_err());
    }

    #[test]
    fn defaults_and_flat_config() {
        let c: PretrainConfig = serde_json::from_str(r#"{"lambda": 0.5, "seed": 3}"#).unwrap();
        assert_eq!(c.loss.lambda, 0.5);
        assert_eq!(c.seed, 3);
        assert_eq!(c.epochs, 1);
        assert_eq!(c.learning_rate, 1e-6);
        assert_eq!(c.batch_size, 50);
        let m = PretrainManifest::new(&c, &triples(), &TrainingLog::default());
        let json = serde_json::to_value(&m).unwrap();
        assert_eq!(json["config"]["lambda"], 0.5);
        assert_eq!(json["optimizer"], "adam");
        assert_eq!(m.triples_sha256.len(), 64);
    }

    #[test]
    fn validation_selects_an_epoch() {
        let mut model = ToyEncoder::new(8, 64, 1).unwrap();
        let t = triples();
        let val = ValidationSet {
            utterances: t.iter().map(|x| x.utterance.clone()).collect(),
            intents: crate::corpus::intent_set(&t.iter().map(|x| x.utterance.clone()).collect::<Vec<_>>())
                .unwrap(),
            metric: Metric::Cosine,
        };
        let log = pretrain_with_validation(&mut model, &t, &cfg(4), &val).unwrap();
        assert_eq!(log.validation_accuracy.len(), 4);
        let best = log.validation_accuracy.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(log.validation_accuracy[log.selected_epoch - 1], best);
    }
}
