use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{sample_episode, IntentPool};
use crate::corpus::{intent_set, match_intents, ClassSplit, IntentName, Utterance};
use crate::encoder::{embed_unique, SentenceEncoder};
use crate::error::{PieError, Result};
use crate::proto::{classify_embedding, prototypes_from_cache, Metric};
use crate::rng::substream;

pub const EVAL_REPORT_SCHEMA_VERSION: u32 = 1;

/// Episode width: a fixed N, or every test intent of the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WaySpec {
    Fixed(usize),
    All,
}

impl WaySpec {
    pub fn resolve(self, test_intents: usize) -> usize {
        match self {
            WaySpec::Fixed(n) => n,
            WaySpec::All => test_intents,
        }
    }
}

impl fmt::Display for WaySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaySpec::Fixed(n) => write!(f, "{n}"),
            WaySpec::All => f.write_str("all"),
        }
    }
}

impl FromStr for WaySpec {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(WaySpec::All);
        }
        s.parse()
            .map(WaySpec::Fixed)
            .map_err(|_| PieError::invalid(format!("expected a number or `all`, got `{s}`")))
    }
}

impl Serialize for WaySpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WaySpec::Fixed(n) => s.serialize_u64(*n as u64),
            WaySpec::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for WaySpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            N(usize),
            S(String),
        }
        match Repr::deserialize(d)? {
            Repr::N(n) => Ok(WaySpec::Fixed(n)),
            Repr::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset_id: String,
    pub n: WaySpec,
    pub k: usize,
    pub q: usize,
    pub episodes_per_split: usize,
    pub label_support: bool,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset_id: String::new(),
            n: WaySpec::Fixed(5),
            k: 1,
            q: 5,
            episodes_per_split: 600,
            label_support: false,
            metric: Metric::Cosine,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split_id: usize,
    pub n: usize,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

/// Accuracies are percentages; `std` is the population standard deviation
/// (divisor 5) of the five per-split accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset_id: String,
    pub n: WaySpec,
    pub k: usize,
    pub q: usize,
    pub label_support: bool,
    pub metric: Metric,
    pub splits: Vec<SplitResult>,
    pub split_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub std_kind: String,
    pub episodes_per_split: usize,
    pub episode_count: usize,
    pub seed: u64,
}

fn check_config(config: &EvalConfig) -> Result<()> {
    if config.k == 0 && !config.label_support {
        return Err(PieError::invalid("zero-shot evaluation (k = 0) requires label support"));
    }
    if config.q == 0 {
        return Err(PieError::invalid("q must be at least one"));
    }
    if config.episodes_per_split == 0 {
        return Err(PieError::invalid("episodes_per_split must be positive"));
    }
    Ok(())
}

/// Samples `episodes_per_split` episodes over the split's test intents and
/// returns the pooled query accuracy.
pub fn evaluate_split<E: SentenceEncoder + ?Sized>(
    model: &E,
    utterances: &[Utterance],
    split: &ClassSplit,
    config: &EvalConfig,
) -> Result<SplitResult> {
    check_config(config)?;
    let pool = IntentPool::from_utterances(utterances, Some(&split.test_intents))?;
    let n = config.n.resolve(pool.intent_count());
    if n < 2 || n > pool.intent_count() {
        return Err(PieError::Insufficient(format!(
            "split {}: {n}-way evaluation over {} test intents",
            split.split_id,
            pool.intent_count()
        )));
    }
    let short = pool.short_intents(config.k + config.q);
    if !short.is_empty() {
        return Err(PieError::Insufficient(format!(
            "split {}: intents with fewer than k + q = {} utterances: {short:?}",
            split.split_id,
            config.k + config.q
        )));
    }
    let mut texts: Vec<&str> = pool
        .groups()
        .iter()
        .flat_map(|(_, u)| u.iter().map(|x| x.text.as_str()))
        .collect();
    if config.label_support {
        texts.extend(pool.groups().iter().map(|(n, _)| n.display.as_str()));
    }
    let cache = embed_unique(model, texts)?;

    let counts = (0..config.episodes_per_split)
        .into_par_iter()
        .map(|e| {
            let mut rng = substream(config.seed, &format!("eval/split{}/episode{e}", split.split_id));
            let ep = sample_episode(&pool, n, config.k, config.q, &mut rng)?;
            let protos = prototypes_from_cache(&ep.supports, &cache, config.label_support, config.metric)?;
            let mut correct = 0usize;
            for (u, y) in &ep.queries {
                if classify_embedding(&cache[&u.text], &protos)?.index == *y {
                    correct += 1;
                }
            }
            Ok((correct, ep.queries.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, total) = counts.iter().fold((0, 0), |(c, t), (a, b)| (c + a, t + b));
    let accuracy = 100.0 * correct as f64 / total as f64;
    info!("split {}: {n}-way {}-shot accuracy {accuracy:.2}%", split.split_id, config.k);
    Ok(SplitResult {
        split_id: split.split_id,
        n,
        correct,
        total,
        accuracy,
    })
}

/// The full protocol: exactly five class splits, reported as mean and
/// population standard deviation of the per-split accuracies.
pub fn run_eval<E: SentenceEncoder + ?Sized>(
    model: &E,
    utterances: &[Utterance],
    splits: &[ClassSplit],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if splits.len() != 5 {
        return Err(PieError::InvalidSplit(format!("expected 5 class splits, got {}", splits.len())));
    }
    check_config(config)?;
    let results = splits
        .iter()
        .map(|s| {
            s.check_disjoint()?;
            evaluate_split(model, utterances, s, config)
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let std = (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64).sqrt();
    Ok(EvalReport {
        schema_version: EVAL_REPORT_SCHEMA_VERSION,
        dataset_id: config.dataset_id.clone(),
        n: config.n,
        k: config.k,
        q: config.q,
        label_support: config.label_support,
        metric: config.metric,
        splits: results,
        split_accuracies: accs,
        mean,
        std,
        std_kind: "population".into(),
        episodes_per_split: config.episodes_per_split,
        episode_count: config.episodes_per_split * splits.len(),
        seed: config.seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Dataset intents matched by a pre-training intent, as (dataset, pre-training) raw names.
    pub matched: Vec<(String, String)>,
    pub removed: Vec<String>,
    pub dataset_intents: usize,
    pub all: EvalReport,
    pub overlap_removed: EvalReport,
}

/// Evaluates twice: on the splits as given, and with every intent that
/// matches a pre-training intent removed from candidates and queries.
pub fn run_overlap_controlled_eval<E: SentenceEncoder + ?Sized>(
    model: &E,
    utterances: &[Utterance],
    splits: &[ClassSplit],
    pretrain_intents: &[IntentName],
    config: &EvalConfig,
) -> Result<OverlapReport> {
    let dataset_intents = intent_set(utterances)?;
    let pairs = match_intents(&dataset_intents, pretrain_intents);
    let removed: BTreeSet<String> = pairs.iter().map(|(a, _)| a.raw.clone()).collect();
    let reduced: Vec<ClassSplit> = splits.iter().map(|s| s.without(&removed)).collect();
    for s in &reduced {
        if s.test_intents.len() < 2 {
            return Err(PieError::Insufficient(format!(
                "split {}: {} test intents remain after removing overlaps",
                s.split_id,
                s.test_intents.len()
            )));
        }
    }
    let kept: Vec<Utterance> = utterances
        .iter()
        .filter(|u| u.gold_intent.as_ref().is_none_or(|g| !removed.contains(g)))
        .cloned()
        .collect();
    let all = run_eval(model, utterances, splits, config)?;
    let overlap_removed = run_eval(model, &kept, &reduced, config)?;
    Ok(OverlapReport {
        matched: pairs.into_iter().map(|(a, b)| (a.raw, b.raw)).collect(),
        removed: removed.into_iter().collect(),
        dataset_intents: dataset_intents.len(),
        all,
        overlap_removed,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoder::{Embedding, LookupEncoder};

    pub(crate) fn fixture(intents: usize, per: usize) -> (Vec<Utterance>, Vec<ClassSplit>, LookupEncoder) {
        let mut enc = LookupEncoder::new(intents);
        let mut utts = Vec::new();
        for i in 0..intents {
            let mut onehot = vec![0.0; intents];
            onehot[i] = 1.0;
            let name = format!("intent_{i}");
            enc.insert(IntentName::parse(&name).unwrap().display, Embedding::new(onehot.clone()).unwrap())
                .unwrap();
            for j in 0..per {
                let text = format!("example {j} of {i}");
                enc.insert(text.clone(), Embedding::new(onehot.clone()).unwrap()).unwrap();
                utts.push(Utterance::labelled(text, &name).unwrap());
            }
        }
        let names: Vec<String> = (0..intents).map(|i| format!("intent_{i}")).collect();
        let splits = (0..5)
            .map(|s| {
                let test: Vec<&str> = names.iter().map(String::as_str).collect();
                ClassSplit::new(s, &[], &[], &test).unwrap()
            })
            .collect();
        (utts, splits, enc)
    }

    fn cfg(n: WaySpec, k: usize) -> EvalConfig {
        EvalConfig {
            n,
            k,
            episodes_per_split: 20,
            label_support: true,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_is_perfect_and_deterministic() {
        let (utts, splits, enc) = fixture(6, 8);
        for (n, k) in [(WaySpec::Fixed(5), 0), (WaySpec::Fixed(3), 2), (WaySpec::All, 1)] {
            let r = run_eval(&enc, &utts, &splits, &cfg(n, k)).unwrap();
            assert_eq!(r.mean, 100.0);
            assert_eq!(r.std, 0.0);
            assert_eq!(r, run_eval(&enc, &utts, &splits, &cfg(n, k)).unwrap());
        }
    }

    #[test]
    fn protocol_errors() {
        let (utts, splits, enc) = fixture(6, 8);
        let no_label = EvalConfig {
            label_support: false,
            ..cfg(WaySpec::Fixed(5), 0)
        };
        assert!(run_eval(&enc, &utts, &splits, &no_label).is_err());
        assert!(run_eval(&enc, &utts, &splits[..4], &cfg(WaySpec::Fixed(5), 1)).is_err());
        assert!(run_eval(&enc, &utts, &splits, &cfg(WaySpec::Fixed(7), 1)).is_err());
        // k + q = 9 exceeds the 8 utterances per intent
        let err = run_eval(&enc, &utts, &splits, &EvalConfig { q: 8, ..cfg(WaySpec::All, 1) }).unwrap_err();
        assert!(err.to_string().contains("fewer than"), "{err}");
    }

    #[test]
    fn population_std() {
        let accs = [60.0, 70.0, 80.0, 90.0, 100.0];
        let mean: f64 = accs.iter().sum::<f64>() / 5.0;
        let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        assert!((std - 200f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn way_spec_forms() {
        assert_eq!("all".parse::<WaySpec>().unwrap(), WaySpec::All);
        assert_eq!("5".parse::<WaySpec>().unwrap(), WaySpec::Fixed(5));
        assert!("five".parse::<WaySpec>().is_err());
        assert_eq!(serde_json::to_string(&WaySpec::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<WaySpec>("18").unwrap(), WaySpec::Fixed(18));
        assert!(WaySpec::Fixed(100) < WaySpec::All);
    }

    #[test]
    fn overlap_removal() {
        let (utts, splits, enc) = fixture(6, 8);
        let c = cfg(WaySpec::Fixed(3), 1);
        let none = run_overlap_controlled_eval(&enc, &utts, &splits, &[IntentName::parse("unrelated").unwrap()], &c)
            .unwrap();
        assert!(none.removed.is_empty());
        assert_eq!(none.all, none.overlap_removed);

        let some = run_overlap_controlled_eval(
            &enc,
            &utts,
            &splits,
            &[IntentName::parse("0_intents").unwrap(), IntentName::parse("intent_1").unwrap()],
            &c,
        )
        .unwrap();
        assert_eq!(some.removed, vec!["intent_0".to_string(), "intent_1".to_string()]);
        assert_eq!(some.overlap_removed.splits[0].n, 3);

        let everything: Vec<IntentName> = (0..5).map(|i| IntentName::parse(&format!("intent_{i}")).unwrap()).collect();
        assert!(run_overlap_controlled_eval(&enc, &utts, &splits, &everything, &c).is_err());
    }
}
