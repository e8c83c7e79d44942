//! The three-term intent-aware contrastive objective and the pre-training
//! loop built on it.
//!
//! Every term is InfoNCE with in-batch negatives: anchor `i` is the
//! embedded utterance, its positive is the `i`-th entry of the counterpart
//! list (gold intent name, a same-intent utterance, or the pseudo intent),
//! and every other entry of that list is a negative.

mod train;

pub use train::{
    pretrain, pretrain_with_validation, PretrainConfig, PretrainManifest, StepRecord, TrainingLog,
    ValidationSet,
};

use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, SentenceEncoder};
use crate::error::{PieError, Result};
use crate::pseudo::TrainingTriple;

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(PieError::Shape(format!("cosine of dims {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(PieError::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// InfoNCE value and its gradients with respect to every input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub d_anchors: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<f64>>,
}

fn check_pairs(anchors: &[&[f64]], positives: &[&[f64]]) -> Result<usize> {
    if anchors.len() != positives.len() {
        return Err(PieError::Shape(format!(
            "{} anchors but {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if anchors.is_empty() {
        return Err(PieError::invalid("InfoNCE over an empty batch"));
    }
    let d = anchors[0].len();
    for v in anchors.iter().chain(positives) {
        if v.len() != d {
            return Err(PieError::Shape(format!("vector of dim {} in a dim {d} batch", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PieError::NonFinite("non-finite embedding in InfoNCE batch".into()));
        }
    }
    Ok(d)
}

/// `−(1/N) Σᵢ log softmax_k(sim(aᵢ, p_k)/τ)[i]`.
pub fn info_nce(anchors: &[Embedding], positives: &[Embedding], temperature: f64) -> Result<f64> {
    let a: Vec<&[f64]> = anchors.iter().map(Embedding::as_slice).collect();
    let p: Vec<&[f64]> = positives.iter().map(Embedding::as_slice).collect();
    Ok(info_nce_grad(&a, &p, temperature, None)?.loss)
}

/// InfoNCE with gradients. When `groups` is given, a column `k ≠ i` whose
/// group equals row `i`'s group is left out of row `i`'s denominator.
pub fn info_nce_grad(
    anchors: &[&[f64]],
    positives: &[&[f64]],
    temperature: f64,
    groups: Option<&[usize]>,
) -> Result<InfoNceOutput> {
    let d = check_pairs(anchors, positives)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PieError::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let n = anchors.len();
    if let Some(g) = groups {
        if g.len() != n {
            return Err(PieError::Shape("group list length differs from batch".into()));
        }
    }
    let an: Vec<f64> = anchors.iter().map(|a| norm(a)).collect();
    let pn: Vec<f64> = positives.iter().map(|p| norm(p)).collect();
    if an.iter().chain(&pn).any(|&x| x == 0.0) {
        return Err(PieError::invalid("zero vector in InfoNCE batch"));
    }
    let included = |i: usize, k: usize| match groups {
        Some(g) => k == i || g[k] != g[i],
        None => true,
    };

    let mut cos = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            cos[i][k] = dot(anchors[i], positives[k]) / (an[i] * pn[k]);
        }
    }
    let mut loss = 0.0;
    let mut d_anchors = vec![vec![0.0; d]; n];
    let mut d_positives = vec![vec![0.0; d]; n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|k| if included(i, k) { cos[i][k] / temperature } else { f64::NEG_INFINITY })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += max + z.ln() - logits[i];
        for k in 0..n {
            if !included(i, k) {
                continue;
            }
            let prob = (logits[k] - max).exp() / z;
            // upstream w.r.t. sim(aᵢ, p_k)
            let g = (prob - if k == i { 1.0 } else { 0.0 }) / (n as f64 * temperature);
            if g == 0.0 {
                continue;
            }
            let c = cos[i][k];
            let inv = 1.0 / (an[i] * pn[k]);
            for j in 0..d {
                d_anchors[i][j] +=
                    g * (positives[k][j] * inv - c * anchors[i][j] / (an[i] * an[i]));
                d_positives[k][j] +=
                    g * (anchors[i][j] * inv - c * positives[k][j] / (pn[k] * pn[k]));
            }
        }
    }
    Ok(InfoNceOutput {
        loss: loss / n as f64,
        d_anchors,
        d_positives,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub enable_gold_intent: bool,
    pub enable_gold_utterance: bool,
    pub enable_pseudo: bool,
    /// Drop same-intent off-diagonal pairs from the negatives.
    pub mask_same_intent: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            temperature: 1.0,
            enable_gold_intent: true,
            enable_gold_utterance: true,
            enable_pseudo: true,
            mask_same_intent: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PieError::invalid("temperature must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(PieError::invalid("lambda must be non-negative"));
        }
        if !(self.enable_gold_intent || self.enable_gold_utterance || self.enable_pseudo) {
            return Err(PieError::invalid("every loss term is disabled"));
        }
        Ok(())
    }

    /// Only the given term enabled; the others keep their defaults.
    pub fn only(term: LossTerm) -> Self {
        Self {
            enable_gold_intent: term == LossTerm::GoldIntent,
            enable_gold_utterance: term == LossTerm::GoldUtterance,
            enable_pseudo: term == LossTerm::Pseudo,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    GoldIntent,
    GoldUtterance,
    Pseudo,
}

/// Parallel text lists for one mini-batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub anchors: Vec<String>,
    pub gold_intents: Vec<String>,
    pub gold_utterances: Vec<String>,
    pub pseudo_intents: Vec<String>,
}

impl Batch {
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a TrainingTriple>) -> Self {
        let mut b = Batch::default();
        for t in triples {
            b.anchors.push(t.utterance.text.clone());
            b.gold_intents.push(t.gold_intent.display.clone());
            b.gold_utterances.push(t.gold_utterance.text.clone());
            b.pseudo_intents.push(t.pseudo_intent.text.clone());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        if n == 0 {
            return Err(PieError::invalid("empty batch"));
        }
        if self.gold_intents.len() != n || self.gold_utterances.len() != n || self.pseudo_intents.len() != n {
            return Err(PieError::Shape("batch lists differ in length".into()));
        }
        Ok(())
    }

    fn intent_groups(&self) -> Vec<usize> {
        let mut ids: Vec<&str> = Vec::new();
        self.gold_intents
            .iter()
            .map(|g| match ids.iter().position(|x| x == g) {
                Some(p) => p,
                None => {
                    ids.push(g);
                    ids.len() - 1
                }
            })
            .collect()
    }
}

/// Per-term InfoNCE values; a disabled term is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub gold_intent: Option<f64>,
    pub gold_utterance: Option<f64>,
    pub pseudo: Option<f64>,
}

/// Loss value plus, for each embedded text, the gradient of the total
/// loss with respect to that text's embedding.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub texts: Vec<String>,
    pub upstream: Vec<Vec<f64>>,
}

/// Computes the combined loss on precomputed embeddings. `anchors` is
/// required; the counterpart lists are consulted only for enabled terms.
pub fn combined_loss_from_embeddings(
    anchors: &[&[f64]],
    gold_intents: &[&[f64]],
    gold_utterances: &[&[f64]],
    pseudo_intents: &[&[f64]],
    groups: &[usize],
    config: &LossConfig,
) -> Result<(LossBreakdown, [Vec<Vec<f64>>; 4])> {
    config.validate()?;
    let n = anchors.len();
    let groups = config.mask_same_intent.then_some(groups);
    let mut grads: [Vec<Vec<f64>>; 4] = Default::default();
    let d = anchors.first().map_or(0, |a| a.len());
    grads[0] = vec![vec![0.0; d]; n];
    let mut total = 0.0;
    let mut run = |enabled: bool, positives: &[&[f64]], weight: f64, slot: usize| -> Result<Option<f64>> {
        if !enabled {
            return Ok(None);
        }
        let out = info_nce_grad(anchors, positives, config.temperature, groups)?;
        total += weight * out.loss;
        for (acc, g) in grads[0].iter_mut().zip(&out.d_anchors) {
            acc.iter_mut().zip(g).for_each(|(a, x)| *a += weight * x);
        }
        grads[slot] = out
            .d_positives
            .into_iter()
            .map(|g| g.into_iter().map(|x| weight * x).collect())
            .collect();
        Ok(Some(out.loss))
    };
    let gold_intent = run(config.enable_gold_intent, gold_intents, 1.0, 1)?;
    let gold_utterance = run(config.enable_gold_utterance, gold_utterances, 1.0, 2)?;
    let pseudo = run(config.enable_pseudo, pseudo_intents, config.lambda, 3)?;
    Ok((
        LossBreakdown {
            total,
            gold_intent,
            gold_utterance,
            pseudo,
        },
        grads,
    ))
}

/// Embeds the batch with `model` and evaluates the combined loss
/// `L_gold_intent + L_gold_utterance + λ·L_pseudo`.
pub fn combined_loss<E: SentenceEncoder + ?Sized>(
    batch: &Batch,
    model: &E,
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    batch.validate()?;
    let lists: [(bool, &Vec<String>); 4] = [
        (true, &batch.anchors),
        (config.enable_gold_intent, &batch.gold_intents),
        (config.enable_gold_utterance, &batch.gold_utterances),
        (config.enable_pseudo, &batch.pseudo_intents),
    ];
    let mut texts: Vec<String> = Vec::new();
    for (on, list) in &lists {
        if *on {
            texts.extend(list.iter().cloned());
        }
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let embs = model.embed(&refs)?;
    let n = batch.len();
    let mut views: [Vec<&[f64]>; 4] = Default::default();
    let mut offset = 0;
    for (slot, (on, _)) in lists.iter().enumerate() {
        if *on {
            views[slot] = embs[offset..offset + n].iter().map(Embedding::as_slice).collect();
            offset += n;
        }
    }
    let (breakdown, grads) = combined_loss_from_embeddings(
        &views[0],
        &views[1],
        &views[2],
        &views[3],
        &batch.intent_groups(),
        config,
    )?;
    let upstream = grads
        .into_iter()
        .zip(lists.iter())
        .filter(|(_, (on, _))| *on)
        .flat_map(|(g, _)| g)
        .collect();
    Ok(LossOutput {
        breakdown,
        texts,
        upstream,
    })
}
