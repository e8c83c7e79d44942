//! Pseudo intent names built from tagged spans, and the training triples
//! that feed contrastive pre-training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{IntentName, Utterance};
use crate::error::{PieError, Result};
use crate::irl::{validate_spans, IrlSpan, IrlTagger, RoleLabel};
use crate::rng::substream;
use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudoIntent {
    pub text: String,
}

/// Keeps an utterance only when it carries an Action, Argument or Query span.
pub fn passes_filter(spans: &[IrlSpan]) -> bool {
    spans
        .iter()
        .any(|s| matches!(s.label, RoleLabel::Action | RoleLabel::Argument | RoleLabel::Query))
}

/// Joins the tokens of every span, in utterance order, with single spaces.
/// Returns `None` when the spans fail [`passes_filter`].
///
/// ```
/// use pie_core::irl::{IrlSpan, RoleLabel};
/// use pie_core::pseudo::generate_pseudo_intent;
/// use pie_core::text::tokenize;
///
/// let tokens = tokenize("i'd like to open a savings account please");
/// let spans = [
///     IrlSpan::new(RoleLabel::Action, 3, 4),
///     IrlSpan::new(RoleLabel::Slot, 5, 6),
///     IrlSpan::new(RoleLabel::Argument, 6, 7),
/// ];
/// let p = generate_pseudo_intent(&tokens, &spans).unwrap().unwrap();
/// assert_eq!(p.text, "open savings account");
/// ```
pub fn generate_pseudo_intent(tokens: &[String], spans: &[IrlSpan]) -> Result<Option<PseudoIntent>> {
    let sorted = validate_spans(tokens.len(), spans)?;
    if !passes_filter(&sorted) {
        return Ok(None);
    }
    let text = sorted
        .iter()
        .flat_map(|s| tokens[s.start..s.end].iter().map(String::as_str))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Some(PseudoIntent { text }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub utterance: Utterance,
    pub gold_intent: IntentName,
    pub gold_utterance: Utterance,
    pub pseudo_intent: PseudoIntent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleSummary {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub gold_intents: usize,
    pub pseudo_intents: usize,
    /// Intents with a single survivor, paired with themselves.
    pub self_paired: usize,
}

/// Tags each utterance, drops those failing the filter, and pairs every
/// survivor with another survivor of the same gold intent.
pub fn build_triples<T: IrlTagger>(
    utterances: &[Utterance],
    tagger: &T,
    seed: u64,
) -> Result<(Vec<TrainingTriple>, TripleSummary)> {
    for (i, u) in utterances.iter().enumerate() {
        if u.gold_intent.is_none() {
            return Err(PieError::invalid(format!("utterance {i} ({:?}) has no gold intent", u.text)));
        }
    }
    let tagged: Vec<Option<PseudoIntent>> = utterances
        .par_iter()
        .map(|u| {
            let tokens = tokenize(&u.text);
            let spans = tagger.tag(&tokens)?;
            generate_pseudo_intent(&tokens, &spans)
        })
        .collect::<Result<_>>()?;

    let mut triples = Vec::new();
    for (u, pseudo) in utterances.iter().zip(tagged) {
        if let Some(pseudo_intent) = pseudo {
            triples.push(TrainingTriple {
                gold_intent: IntentName::parse(u.gold_intent.as_deref().expect("checked above"))?,
                gold_utterance: u.clone(),
                utterance: u.clone(),
                pseudo_intent,
            });
        }
    }
    let self_paired = resample_gold_utterances(&mut triples, seed);
    let summary = TripleSummary {
        input: utterances.len(),
        kept: triples.len(),
        dropped: utterances.len() - triples.len(),
        gold_intents: triples.iter().map(|t| &t.gold_intent.raw).collect::<BTreeSet<_>>().len(),
        pseudo_intents: triples.iter().map(|t| &t.pseudo_intent).collect::<BTreeSet<_>>().len(),
        self_paired,
    };
    Ok((triples, summary))
}

impl PartialOrd for PseudoIntent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PseudoIntent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.text.cmp(&other.text)
    }
}

/// Re-draws every triple's gold utterance uniformly from the other triples
/// with the same gold intent. Returns how many intents had to pair a
/// lone utterance with itself.
pub fn resample_gold_utterances(triples: &mut [TrainingTriple], seed: u64) -> usize {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, t) in triples.iter().enumerate() {
        groups.entry(t.gold_intent.raw.clone()).or_default().push(i);
    }
    let mut rng = substream(seed, "pseudo/gold-utterance");
    let mut lonely = 0;
    for (intent, members) in &groups {
        if members.len() == 1 {
            warn!("intent {intent:?} has one surviving utterance; pairing it with itself");
            lonely += 1;
            let i = members[0];
            triples[i].gold_utterance = triples[i].utterance.clone();
            continue;
        }
        for (pos, &i) in members.iter().enumerate() {
            let mut r = rng.gen_range(0..members.len() - 1);
            if r >= pos {
                r += 1;
            }
            triples[i].gold_utterance = triples[members[r]].utterance.clone();
        }
    }
    lonely
}

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    utterance: String,
    gold_intent: String,
    gold_utterance: String,
    pseudo_intent: String,
}

pub fn write_triples_jsonl(path: impl AsRef<Path>, triples: &[TrainingTriple]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PieError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in triples {
        let rec = TripleRecord {
            utterance: t.utterance.text.clone(),
            gold_intent: t.gold_intent.raw.clone(),
            gold_utterance: t.gold_utterance.text.clone(),
            pseudo_intent: t.pseudo_intent.text.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| PieError::io(path, e))?;
    }
    w.flush().map_err(|e| PieError::io(path, e))
}

pub fn read_triples_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrainingTriple>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PieError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PieError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |m: String| PieError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m,
        };
        let rec: TripleRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if rec.pseudo_intent.trim().is_empty() {
            return Err(parse("empty pseudo_intent".into()));
        }
        out.push(TrainingTriple {
            utterance: Utterance::labelled(rec.utterance, &rec.gold_intent).map_err(|e| parse(e.to_string()))?,
            gold_utterance: Utterance::labelled(rec.gold_utterance, &rec.gold_intent)
                .map_err(|e| parse(e.to_string()))?,
            gold_intent: IntentName::parse(&rec.gold_intent).map_err(|e| parse(e.to_string()))?,
            pseudo_intent: PseudoIntent { text: rec.pseudo_intent },
        });
    }
    Ok(out)
}
