//! Prototypical classification: one prototype per intent, queries go to
//! the nearest prototype.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::contrastive::cosine_sim;
use crate::corpus::{IntentName, Utterance};
use crate::encoder::{embed_unique, Embedding, SentenceEncoder, TrainableEncoder};
use crate::episodes::Episode;
use crate::error::{PieError, Result};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(PieError::invalid(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    pub intent: IntentName,
    pub examples: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub intents: Vec<IntentName>,
    pub vectors: Vec<Embedding>,
    pub metric: Metric,
    pub label_support: bool,
}

impl PrototypeSet {
    pub fn new(intents: Vec<IntentName>, vectors: Vec<Embedding>, metric: Metric, label_support: bool) -> Result<Self> {
        if intents.len() != vectors.len() {
            return Err(PieError::Shape(format!(
                "{} intents but {} prototype vectors",
                intents.len(),
                vectors.len()
            )));
        }
        if intents.len() < 2 {
            return Err(PieError::Insufficient("a prototype set needs at least two intents".into()));
        }
        let d = vectors[0].dim();
        if vectors.iter().any(|v| v.dim() != d) {
            return Err(PieError::Shape("prototype vectors differ in dimension".into()));
        }
        Ok(Self {
            intents,
            vectors,
            metric,
            label_support,
        })
    }

    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| PieError::io(path, e))
    }
}

/// `(Σ examples + label) / (K + 1)` with a label, `Σ examples / K` without.
/// With no examples the label embedding is returned unchanged.
pub fn prototype_vector(examples: &[&Embedding], label: Option<&Embedding>) -> Result<Embedding> {
    match (examples.is_empty(), label) {
        (true, None) => Err(PieError::Insufficient(
            "zero support examples require label support".into(),
        )),
        (true, Some(l)) => Ok(l.clone()),
        (false, _) => {
            let d = examples[0].dim();
            let mut sum = vec![0.0; d];
            for e in examples.iter().copied().chain(label) {
                if e.dim() != d {
                    return Err(PieError::Shape("support embeddings differ in dimension".into()));
                }
                sum.iter_mut().zip(e.as_slice()).for_each(|(s, x)| *s += x);
            }
            let count = (examples.len() + label.is_some() as usize) as f64;
            Embedding::new(sum.into_iter().map(|s| s / count).collect())
        }
    }
}

pub fn build_prototypes<E: SentenceEncoder + ?Sized>(
    supports: &[SupportSet],
    model: &E,
    label_support: bool,
    metric: Metric,
) -> Result<PrototypeSet> {
    let mut texts: Vec<&str> = supports
        .iter()
        .flat_map(|s| s.examples.iter().map(|u| u.text.as_str()))
        .collect();
    if label_support {
        texts.extend(supports.iter().map(|s| s.intent.display.as_str()));
    }
    let cache = embed_unique(model, texts)?;
    prototypes_from_cache(supports, &cache, label_support, metric)
}

pub(crate) fn prototypes_from_cache(
    supports: &[SupportSet],
    cache: &HashMap<String, Embedding>,
    label_support: bool,
    metric: Metric,
) -> Result<PrototypeSet> {
    let lookup = |t: &str| {
        cache
            .get(t)
            .ok_or_else(|| PieError::invalid(format!("no cached embedding for {t:?}")))
    };
    let mut vectors = Vec::with_capacity(supports.len());
    for s in supports {
        let examples = s
            .examples
            .iter()
            .map(|u| lookup(&u.text))
            .collect::<Result<Vec<_>>>()?;
        let label = if label_support {
            Some(lookup(&s.intent.display)?)
        } else {
            None
        };
        vectors.push(prototype_vector(&examples, label).map_err(|e| match e {
            PieError::Insufficient(_) => PieError::Insufficient(format!(
                "intent {:?} has no support examples and label support is off",
                s.intent.raw
            )),
            other => other,
        })?);
    }
    PrototypeSet::new(
        supports.iter().map(|s| s.intent.clone()).collect(),
        vectors,
        metric,
        label_support,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub index: usize,
    pub intent: IntentName,
    /// Higher is closer: cosine similarity, or negated euclidean distance.
    pub scores: Vec<f64>,
}

pub fn score(query: &[f64], prototype: &[f64], metric: Metric) -> Result<f64> {
    if query.len() != prototype.len() {
        return Err(PieError::Shape(format!(
            "query of dim {} against prototype of dim {}",
            query.len(),
            prototype.len()
        )));
    }
    match metric {
        Metric::Cosine => cosine_sim(query, prototype),
        Metric::Euclidean => Ok(-query
            .iter()
            .zip(prototype)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()),
    }
}

/// Nearest prototype under the set's metric; ties go to the lowest index.
pub fn classify_embedding(query: &Embedding, prototypes: &PrototypeSet) -> Result<Classification> {
    let scores = prototypes
        .vectors
        .iter()
        .map(|p| score(query.as_slice(), p.as_slice(), prototypes.metric))
        .collect::<Result<Vec<_>>>()?;
    let index = argmax(&scores);
    Ok(Classification {
        index,
        intent: prototypes.intents[index].clone(),
        scores,
    })
}

pub(crate) fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn classify<E: SentenceEncoder + ?Sized>(
    query: &Utterance,
    prototypes: &PrototypeSet,
    model: &E,
) -> Result<Classification> {
    classify_embedding(&model.embed_one(&query.text)?, prototypes)
}

/// Fraction of `utterances` whose nearest intent-name embedding (over all
/// of `intents`) is their gold intent.
pub fn zero_shot_accuracy<E: SentenceEncoder + ?Sized>(
    model: &E,
    utterances: &[Utterance],
    intents: &[IntentName],
    metric: Metric,
) -> Result<f64> {
    if utterances.is_empty() {
        return Err(PieError::invalid("no utterances to score"));
    }
    let supports: Vec<SupportSet> = intents
        .iter()
        .map(|i| SupportSet {
            intent: i.clone(),
            examples: Vec::new(),
        })
        .collect();
    let protos = build_prototypes(&supports, model, true, metric)?;
    let index: HashMap<&str, usize> = intents.iter().enumerate().map(|(i, n)| (n.raw.as_str(), i)).collect();
    let cache = embed_unique(model, utterances.iter().map(|u| u.text.as_str()))?;
    let mut correct = 0usize;
    for u in utterances {
        let gold = u
            .gold_intent
            .as_deref()
            .and_then(|g| index.get(g))
            .ok_or_else(|| PieError::invalid(format!("{:?} has no gold intent among the candidates", u.text)))?;
        if classify_embedding(&cache[&u.text], &protos)?.index == *gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / utterances.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub learning_rate: f64,
    pub metric: Metric,
    pub label_support: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            metric: Metric::Euclidean,
            label_support: false,
        }
    }
}

/// Query cross entropy of one episode and its upstream gradients. Logits
/// are negative squared distances (euclidean) or cosine similarities.
pub fn episode_loss<E: SentenceEncoder + ?Sized>(
    episode: &Episode,
    model: &E,
    config: &MetaConfig,
) -> Result<(f64, Vec<String>, Vec<Vec<f64>>)> {
    let n = episode.classes.len();
    if episode.queries.is_empty() {
        return Err(PieError::invalid("episode has no queries"));
    }
    if let Some((u, _)) = episode.queries.iter().find(|(_, y)| *y >= n) {
        return Err(PieError::invalid(format!("query {:?} is labelled outside the episode classes", u.text)));
    }
    // text layout: supports (class-major), optional labels, queries
    let mut texts: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (c, s) in episode.supports.iter().enumerate() {
        for u in &s.examples {
            members[c].push(texts.len());
            texts.push(u.text.clone());
        }
    }
    if config.label_support {
        for (c, s) in episode.supports.iter().enumerate() {
            members[c].push(texts.len());
            texts.push(s.intent.display.clone());
        }
    }
    if members.iter().any(Vec::is_empty) {
        return Err(PieError::Insufficient("a class has neither support examples nor label support".into()));
    }
    let q0 = texts.len();
    texts.extend(episode.queries.iter().map(|(u, _)| u.text.clone()));
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embs = model.embed(&refs)?;
    let d = embs[0].dim();
    let protos: Vec<Vec<f64>> = members
        .iter()
        .map(|m| {
            let mut c = vec![0.0; d];
            for &i in m {
                c.iter_mut().zip(embs[i].as_slice()).for_each(|(a, x)| *a += x);
            }
            c.iter_mut().for_each(|a| *a /= m.len() as f64);
            c
        })
        .collect();

    let nq = episode.queries.len();
    let mut upstream = vec![vec![0.0; d]; texts.len()];
    let mut d_protos = vec![vec![0.0; d]; n];
    let mut loss = 0.0;
    for (qi, (_, y)) in episode.queries.iter().enumerate() {
        let q = embs[q0 + qi].as_slice();
        let logits: Vec<f64> = protos
            .iter()
            .map(|c| match config.metric {
                Metric::Euclidean => Ok(-q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()),
                Metric::Cosine => cosine_sim(q, c),
            })
            .collect::<Result<_>>()?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += max + z.ln() - logits[*y];
        for (c, proto) in protos.iter().enumerate() {
            let g = ((logits[c] - max).exp() / z - if c == *y { 1.0 } else { 0.0 }) / nq as f64;
            match config.metric {
                Metric::Euclidean => {
                    for j in 0..d {
                        let diff = q[j] - proto[j];
                        upstream[q0 + qi][j] -= 2.0 * g * diff;
                        d_protos[c][j] += 2.0 * g * diff;
                    }
                }
                Metric::Cosine => {
                    let (nqv, ncv) = (norm(q), norm(proto));
                    let cos = logits[c];
                    for j in 0..d {
                        upstream[q0 + qi][j] += g * (proto[j] / (nqv * ncv) - cos * q[j] / (nqv * nqv));
                        d_protos[c][j] += g * (q[j] / (nqv * ncv) - cos * proto[j] / (ncv * ncv));
                    }
                }
            }
        }
    }
    for (c, m) in members.iter().enumerate() {
        let share = 1.0 / m.len() as f64;
        for &i in m {
            upstream[i].iter_mut().zip(&d_protos[c]).for_each(|(u, g)| *u += share * g);
        }
    }
    Ok((loss / nq as f64, texts, upstream))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One optimiser step per episode; returns the per-episode losses.
pub fn meta_finetune<E: TrainableEncoder>(
    model: &mut E,
    episodes: &[Episode],
    config: &MetaConfig,
) -> Result<Vec<f64>> {
    let adam = AdamConfig::default().with_learning_rate(config.learning_rate);
    let mut losses = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let (loss, texts, upstream) = episode_loss(ep, &*model, config)?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        model.backward_step(&refs, &upstream, &adam)?;
        if (i + 1) % 100 == 0 {
            info!("meta-finetune episode {}: loss {loss:.4}", i + 1);
        }
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{LookupEncoder, ToyEncoder};
    use proptest::prelude::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn name(s: &str) -> IntentName {
        IntentName::parse(s).unwrap()
    }

    fn basis_set(metric: Metric) -> PrototypeSet {
        PrototypeSet::new(
            vec![name("a"), name("b"), name("c")],
            vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0]), e(&[0.0, 0.0, 1.0])],
            metric,
            false,
        )
        .unwrap()
    }

    #[test]
    fn prototype_examples() {
        let ex = e(&[0.3, -2.0]);
        assert_eq!(prototype_vector(&[&ex], None).unwrap(), ex);
        let two = prototype_vector(&[&e(&[1.0, 0.0])], Some(&e(&[0.0, 1.0]))).unwrap();
        assert_eq!(two.as_slice(), &[0.5, 0.5]);
        let label = e(&[-0.0, 1e-300]);
        assert_eq!(
            prototype_vector(&[], Some(&label)).unwrap().as_slice()[0].to_bits(),
            (-0.0f64).to_bits()
        );
        assert!(prototype_vector(&[], None).is_err());
    }

    #[test]
    fn classify_examples() {
        for metric in [Metric::Euclidean, Metric::Cosine] {
            let set = basis_set(metric);
            assert_eq!(classify_embedding(&e(&[0.9, 0.1, 0.0]), &set).unwrap().index, 0);
            assert_eq!(classify_embedding(&e(&[0.0, 0.0, 1.0]), &set).unwrap().index, 2);
            assert!(classify_embedding(&e(&[1.0, 0.0]), &set).is_err());
        }
        // equidistant query: lowest index wins
        let set = basis_set(Metric::Euclidean);
        assert_eq!(classify_embedding(&e(&[0.0, 1.0, 1.0]), &set).unwrap().index, 1);
    }

    #[test]
    fn build_needs_support_or_labels() {
        let model = ToyEncoder::new(4, 16, 0).unwrap();
        let sup = vec![
            SupportSet { intent: name("play_music"), examples: vec![] },
            SupportSet { intent: name("book_flight"), examples: vec![] },
        ];
        assert!(build_prototypes(&sup, &model, false, Metric::Cosine).is_err());
        let p = build_prototypes(&sup, &model, true, Metric::Cosine).unwrap();
        assert_eq!(p.vectors[0], model.embed_one("play music").unwrap());
    }

    #[test]
    fn zero_shot_is_name_retrieval() {
        let mut enc = LookupEncoder::new(2);
        enc.insert("play music", e(&[1.0, 0.0])).unwrap();
        enc.insert("book flight", e(&[0.0, 1.0])).unwrap();
        enc.insert("put on a song", e(&[0.8, 0.3])).unwrap();
        enc.insert("get me a plane", e(&[0.9, 0.2])).unwrap();
        let utts = vec![
            Utterance::labelled("put on a song", "play_music").unwrap(),
            Utterance::labelled("get me a plane", "book_flight").unwrap(),
        ];
        let intents = vec![name("play_music"), name("book_flight")];
        assert_eq!(zero_shot_accuracy(&enc, &utts, &intents, Metric::Cosine).unwrap(), 0.5);
    }

    fn episode() -> Episode {
        let classes = vec![name("play_music"), name("book_flight")];
        let supports = vec![
            SupportSet { intent: classes[0].clone(), examples: vec![Utterance::labelled("play a song", "play_music").unwrap()] },
            SupportSet { intent: classes[1].clone(), examples: vec![Utterance::labelled("book a flight", "book_flight").unwrap()] },
        ];
        let queries = vec![
            (Utterance::labelled("play jazz", "play_music").unwrap(), 0),
            (Utterance::labelled("book a ticket", "book_flight").unwrap(), 1),
        ];
        Episode { classes, supports, queries, k: 1 }
    }

    #[test]
    fn episode_gradient_matches_finite_differences() {
        let model = ToyEncoder::new(4, 32, 2).unwrap();
        for metric in [Metric::Euclidean, Metric::Cosine] {
            for label_support in [false, true] {
                let cfg = MetaConfig { metric, label_support, ..MetaConfig::default() };
                let (_, texts, upstream) = episode_loss(&episode(), &model, &cfg).unwrap();
                let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                let grad = model.parameter_gradient(&refs, &upstream).unwrap();
                for c in [0usize, 7, 40, 100, grad.len() - 1] {
                    let h = 1e-6;
                    let mut plus = model.clone();
                    plus.parameters_mut()[c] += h;
                    let mut minus = model.clone();
                    minus.parameters_mut()[c] -= h;
                    let fd = (episode_loss(&episode(), &plus, &cfg).unwrap().0
                        - episode_loss(&episode(), &minus, &cfg).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - grad[c]).abs() <= 1e-6 * (1.0 + fd.abs()), "{metric} {c}: {fd} vs {}", grad[c]);
                }
            }
        }
    }

    #[test]
    fn meta_finetune_edges() {
        let mut model = ToyEncoder::new(4, 32, 2).unwrap();
        let before = model.parameters().to_vec();
        assert!(meta_finetune(&mut model, &[], &MetaConfig::default()).unwrap().is_empty());
        assert_eq!(model.parameters(), &before[..]);
        let losses = meta_finetune(&mut model, &[episode()], &MetaConfig::default()).unwrap();
        assert_eq!(losses.len(), 1);
        let mut bad = episode();
        bad.queries[0].1 = 5;
        assert!(meta_finetune(&mut model, &[bad], &MetaConfig::default()).is_err());
    }

    fn vecs(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), k)
    }

    proptest! {
        #[test]
        fn support_order_does_not_matter(v in vecs(5, 3), shift in 1usize..5) {
            let embs: Vec<Embedding> = v.iter().map(|x| Embedding::new(x.clone()).unwrap()).collect();
            let refs: Vec<&Embedding> = embs.iter().collect();
            let mut rotated = refs.clone();
            rotated.rotate_left(shift);
            let a = prototype_vector(&refs, None).unwrap();
            let b = prototype_vector(&rotated, None).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn euclidean_translation_and_cosine_scaling(q in vecs(1, 3), p in vecs(3, 3), t in vecs(1, 3), c in 0.1f64..10.0) {
            prop_assume!(p.iter().chain(&q).all(|v| norm(v) > 1e-3));
            let make = |f: &dyn Fn(&[f64]) -> Vec<f64>, metric| {
                PrototypeSet::new(
                    vec![name("a"), name("b"), name("c")],
                    p.iter().map(|v| Embedding::new(f(v)).unwrap()).collect(),
                    metric,
                    false,
                ).unwrap()
            };
            let shift = |v: &[f64]| v.iter().zip(&t[0]).map(|(a, b)| a + b).collect::<Vec<_>>();
            let scale = |v: &[f64]| v.iter().map(|a| a * c).collect::<Vec<_>>();
            let same = |v: &[f64]| v.to_vec();
            let q0 = Embedding::new(q[0].clone()).unwrap();
            let base = classify_embedding(&q0, &make(&same, Metric::Euclidean)).unwrap();
            let moved = classify_embedding(&Embedding::new(shift(&q[0])).unwrap(), &make(&shift, Metric::Euclidean)).unwrap();
            prop_assert!(base.index == moved.index || (base.scores[base.index] - base.scores[moved.index]).abs() < 1e-9);
            let cos = classify_embedding(&q0, &make(&same, Metric::Cosine)).unwrap();
            let scaled = classify_embedding(&Embedding::new(scale(&q[0])).unwrap(), &make(&scale, Metric::Cosine)).unwrap();
            prop_assert!(cos.index == scaled.index || (cos.scores[cos.index] - cos.scores[scaled.index]).abs() < 1e-9);
        }
    }
}
