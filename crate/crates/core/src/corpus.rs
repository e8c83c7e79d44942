//! Corpus ingestion and the preprocessing rules applied before tagging:
//! first-turn selection, per-intent capping, intent-name normalisation,
//! class splits and stem-and-sort intent overlap matching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::rng::rng_from_seed;

/// One utterance, optionally carrying its gold intent and dialogue position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "intent")]
    pub gold_intent: Option<String>,
    #[serde(default)]
    pub dataset_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "turn")]
    pub turn_index: Option<usize>,
}

impl Utterance {
    /// Builds an utterance, rejecting texts that are empty after trimming.
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(PieError::invalid("utterance text is empty"));
        }
        Ok(Self {
            text,
            gold_intent: None,
            dataset_id: String::new(),
            dialogue_id: None,
            turn_index: None,
        })
    }

    pub fn with_intent(mut self, intent: impl Into<String>) -> Self {
        self.gold_intent = Some(intent.into());
        self
    }

    pub fn with_dataset(mut self, dataset_id: impl Into<String>) -> Self {
        self.dataset_id = dataset_id.into();
        self
    }

    pub fn with_turn(mut self, dialogue_id: impl Into<String>, turn_index: usize) -> Self {
        self.dialogue_id = Some(dialogue_id.into());
        self.turn_index = Some(turn_index);
        self
    }

    /// Convenience for the common labelled case.
    pub fn labelled(text: impl Into<String>, intent: impl Into<String>) -> Result<Self> {
        Ok(Self::new(text)?.with_intent(intent))
    }
}

/// An intent label together with the text form fed to encoders.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntentName {
    pub raw: String,
    pub display: String,
}

impl IntentName {
    pub fn parse(raw: &str) -> Result<Self> {
        normalize_intent_name(raw)
    }
}

impl fmt::Display for IntentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display)
    }
}

/// Lowercases `raw` and turns `_`, `-` and camelCase boundaries into single spaces.
///
/// ```
/// use pie_core::corpus::normalize_intent_name;
/// assert_eq!(normalize_intent_name("play_music").unwrap().display, "play music");
/// assert_eq!(normalize_intent_name("BookFlight").unwrap().display, "book flight");
/// ```
pub fn normalize_intent_name(raw: &str) -> Result<IntentName> {
    if raw.trim().is_empty() {
        return Err(PieError::invalid("intent name is empty"));
    }
    let chars: Vec<char> = raw.chars().collect();
    let mut spaced = String::with_capacity(raw.len() + 8);
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == '-' {
            spaced.push(' ');
            continue;
        }
        if c.is_uppercase() && i > 0 {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            // "bookFlight" / "top2Up" boundary, and the end of an acronym as in "HTTPServer".
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower)
            {
                spaced.push(' ');
            }
        }
        spaced.push(c);
    }
    let display = spaced
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    Ok(IntentName {
        raw: raw.to_string(),
        display,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
    DialogueJson,
}

impl FromStr for CorpusFormat {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            "dialogue-json" | "dialogue_json" => Ok(CorpusFormat::DialogueJson),
            other => Err(PieError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    #[serde(default)]
    intent: Option<String>,
    #[serde(default)]
    dataset_id: Option<String>,
    #[serde(default)]
    dialogue_id: Option<serde_json::Value>,
    #[serde(default)]
    turn: Option<usize>,
}

#[derive(Deserialize)]
struct TurnRecord {
    text: String,
    #[serde(default)]
    intent: Option<String>,
}

fn id_string(v: serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    }
}

fn dataset_id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a corpus file. The dataset id defaults to the file stem.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let dataset_id = dataset_id_from_path(path);
    let file = File::open(path).map_err(|e| PieError::io(path, e))?;
    match format {
        CorpusFormat::Jsonl => load_jsonl(path, BufReader::new(file), &dataset_id),
        CorpusFormat::Csv => load_csv(path, file, &dataset_id),
        CorpusFormat::DialogueJson => load_dialogue_json(path, BufReader::new(file), &dataset_id),
    }
}

fn checked_text(path: &Path, line: usize, text: String) -> Result<String> {
    if text.trim().is_empty() {
        return Err(PieError::Parse {
            path: path.to_path_buf(),
            line,
            message: "empty utterance text".into(),
        });
    }
    Ok(text)
}

fn load_jsonl(path: &Path, reader: impl BufRead, dataset_id: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PieError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| PieError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Utterance {
            text: checked_text(path, i + 1, rec.text)?,
            gold_intent: rec.intent,
            dataset_id: rec.dataset_id.unwrap_or_else(|| dataset_id.to_string()),
            dialogue_id: rec.dialogue_id.map(id_string),
            turn_index: rec.turn,
        });
    }
    Ok(out)
}

fn load_csv(path: &Path, file: File, dataset_id: &str) -> Result<Vec<Utterance>> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let text_col = col("text").ok_or_else(|| PieError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing `text` column".into(),
    })?;
    let intent_col = col("intent");
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| PieError::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        let text = record.get(text_col).unwrap_or_default().to_string();
        let intent = intent_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string);
        out.push(Utterance {
            text: checked_text(path, line, text)?,
            gold_intent: intent,
            dataset_id: dataset_id.to_string(),
            dialogue_id: None,
            turn_index: None,
        });
    }
    Ok(out)
}

fn load_dialogue_json(path: &Path, reader: impl BufRead, dataset_id: &str) -> Result<Vec<Utterance>> {
    let dialogues: Vec<Vec<TurnRecord>> =
        serde_json::from_reader(reader).map_err(|e| PieError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (d, turns) in dialogues.into_iter().enumerate() {
        for (t, turn) in turns.into_iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(PieError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!("dialogue {d} turn {t}: empty utterance text"),
                });
            }
            out.push(Utterance {
                text: turn.text,
                gold_intent: turn.intent,
                dataset_id: dataset_id.to_string(),
                dialogue_id: Some(format!("{dataset_id}:{d}")),
                turn_index: Some(t),
            });
        }
    }
    Ok(out)
}

/// Writes utterances as JSONL in the same schema [`load_corpus`] reads.
pub fn write_corpus_jsonl(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PieError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(|e| PieError::io(path, e))?;
    }
    w.flush().map_err(|e| PieError::io(path, e))
}

/// Keeps exactly one utterance per dialogue: the one with the smallest turn index.
/// Dialogues keep the order in which they first appear.
pub fn select_first_turns(utterances: &[Utterance]) -> Result<Vec<Utterance>> {
    let mut order: Vec<&str> = Vec::new();
    let mut best: HashMap<&str, &Utterance> = HashMap::new();
    for u in utterances {
        let (Some(dialogue), Some(turn)) = (u.dialogue_id.as_deref(), u.turn_index) else {
            return Err(PieError::invalid(format!(
                "utterance {:?} lacks dialogue_id/turn metadata",
                u.text
            )));
        };
        match best.get(dialogue) {
            None => {
                order.push(dialogue);
                best.insert(dialogue, u);
            }
            Some(current) if turn < current.turn_index.unwrap_or(usize::MAX) => {
                best.insert(dialogue, u);
            }
            Some(_) => {}
        }
    }
    Ok(order.into_iter().map(|d| best[d].clone()).collect())
}

/// Caps every intent at `max_per_intent` utterances. Over-cap intents keep a
/// uniform random subset drawn under `rng_seed`; input order is preserved.
pub fn cap_per_intent(
    utterances: &[Utterance],
    max_per_intent: usize,
    rng_seed: u64,
) -> Result<Vec<Utterance>> {
    if max_per_intent < 1 {
        return Err(PieError::invalid("max_per_intent must be at least 1"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in utterances.iter().enumerate() {
        let intent = u.gold_intent.as_deref().ok_or_else(|| {
            PieError::invalid(format!("utterance {:?} has no gold intent", u.text))
        })?;
        groups.entry(intent).or_default().push(i);
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut keep = vec![false; utterances.len()];
    for members in groups.values() {
        if members.len() <= max_per_intent {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in sample(&mut rng, members.len(), max_per_intent) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(utterances
        .iter()
        .zip(keep)
        .filter(|&(_u, k)| k).map(|(u, _k)| u.clone())
        .collect())
}

/// Distinct intents of a corpus, sorted by raw name.
pub fn intent_set(utterances: &[Utterance]) -> Result<Vec<IntentName>> {
    let raws: BTreeSet<&str> = utterances
        .iter()
        .filter_map(|u| u.gold_intent.as_deref())
        .collect();
    raws.into_iter().map(normalize_intent_name).collect()
}

/// Stem-and-sort canonical form: Porter-stem every token of the display
/// string and sort the stems alphabetically.
pub fn canonical_intent_key(name: &IntentName) -> String {
    let mut stems: Vec<String> = name
        .display
        .split_whitespace()
        .map(porter_stemmer::stem)
        .collect();
    stems.sort();
    stems.join(" ")
}

/// Pairs `(a, b)` whose canonical keys coincide, in `set_a` then `set_b` order.
pub fn match_intents(set_a: &[IntentName], set_b: &[IntentName]) -> Vec<(IntentName, IntentName)> {
    let mut by_key: HashMap<String, Vec<&IntentName>> = HashMap::new();
    for b in set_b {
        by_key.entry(canonical_intent_key(b)).or_default().push(b);
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for a in set_a {
        if let Some(bs) = by_key.get(&canonical_intent_key(a)) {
            for &b in bs {
                if seen.insert((a.clone(), b.clone())) {
                    pairs.push((a.clone(), b.clone()));
                }
            }
        }
    }
    pairs
}

/// A train/valid/test partition of a dataset's intents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub split_id: usize,
    pub train_intents: Vec<IntentName>,
    pub valid_intents: Vec<IntentName>,
    pub test_intents: Vec<IntentName>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassSplitFile {
    split_id: usize,
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
}

/// Train/valid/test intent counts for the four downstream benchmarks.
pub const KNOWN_SPLIT_SIZES: &[(&str, [usize; 3])] = &[
    ("banking77", [25, 25, 27]),
    ("hwu64", [23, 16, 25]),
    ("liu54", [18, 18, 18]),
    ("clinc150", [50, 50, 50]),
];

pub fn known_split_sizes(dataset_id: &str) -> Option<[usize; 3]> {
    let key: String = dataset_id
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    KNOWN_SPLIT_SIZES
        .iter()
        .find(|(name, _)| *name == key)
        .map(|(_, sizes)| *sizes)
}

impl ClassSplit {
    pub fn new(
        split_id: usize,
        train: &[&str],
        valid: &[&str],
        test: &[&str],
    ) -> Result<Self> {
        let conv = |xs: &[&str]| xs.iter().map(|s| normalize_intent_name(s)).collect::<Result<Vec<_>>>();
        let split = Self {
            split_id,
            train_intents: conv(train)?,
            valid_intents: conv(valid)?,
            test_intents: conv(test)?,
        };
        split.check_disjoint()?;
        Ok(split)
    }

    /// The three sets must not share a raw intent name.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (part, names) in [
            ("train", &self.train_intents),
            ("valid", &self.valid_intents),
            ("test", &self.test_intents),
        ] {
            for n in names.iter() {
                if let Some(prev) = seen.insert(&n.raw, part) {
                    return Err(PieError::InvalidSplit(format!(
                        "split {}: intent {:?} appears in both {prev} and {part}",
                        self.split_id, n.raw
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks coverage against the dataset's intents and, for the four known
    /// benchmarks, the expected set sizes.
    pub fn validate_against(&self, dataset_id: &str, dataset_intents: &[IntentName]) -> Result<()> {
        self.check_disjoint()?;
        let union: BTreeSet<&str> = self
            .train_intents
            .iter()
            .chain(&self.valid_intents)
            .chain(&self.test_intents)
            .map(|n| n.raw.as_str())
            .collect();
        let full: BTreeSet<&str> = dataset_intents.iter().map(|n| n.raw.as_str()).collect();
        if union != full {
            let missing: Vec<_> = full.difference(&union).take(5).collect();
            let extra: Vec<_> = union.difference(&full).take(5).collect();
            return Err(PieError::InvalidSplit(format!(
                "split {}: intent union differs from dataset (missing {missing:?}, unknown {extra:?})",
                self.split_id
            )));
        }
        if let Some(expected) = known_split_sizes(dataset_id) {
            let got = [
                self.train_intents.len(),
                self.valid_intents.len(),
                self.test_intents.len(),
            ];
            if got != expected {
                return Err(PieError::InvalidSplit(format!(
                    "split {} of {dataset_id}: sizes {got:?}, expected {expected:?}",
                    self.split_id
                )));
            }
        }
        Ok(())
    }

    /// Drops the given raw intent names from every part of the split.
    pub fn without(&self, removed: &BTreeSet<String>) -> Self {
        let keep = |xs: &[IntentName]| {
            xs.iter()
                .filter(|n| !removed.contains(&n.raw))
                .cloned()
                .collect::<Vec<_>>()
        };
        Self {
            split_id: self.split_id,
            train_intents: keep(&self.train_intents),
            valid_intents: keep(&self.valid_intents),
            test_intents: keep(&self.test_intents),
        }
    }

    fn from_file(f: ClassSplitFile) -> Result<Self> {
        fn as_refs(v: &[String]) -> Vec<&str> {
            v.iter().map(String::as_str).collect()
        }
        Self::new(f.split_id, &as_refs(&f.train), &as_refs(&f.valid), &as_refs(&f.test))
    }

    fn to_file(&self) -> ClassSplitFile {
        let raws = |v: &[IntentName]| v.iter().map(|n| n.raw.clone()).collect();
        ClassSplitFile {
            split_id: self.split_id,
            train: raws(&self.train_intents),
            valid: raws(&self.valid_intents),
            test: raws(&self.test_intents),
        }
    }
}

/// Reads class splits from a JSON array, a single JSON object, or JSONL.
pub fn load_class_splits(path: impl AsRef<Path>) -> Result<Vec<ClassSplit>> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path).map_err(|e| PieError::io(path, e))?;
    let trimmed = body.trim_start();
    let files: Vec<ClassSplitFile> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed)?
    } else {
        let mut items = Vec::new();
        for (i, line) in body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line) {
                Ok(item) => items.push(item),
                Err(_) if i == 0 => {
                    // Possibly a pretty-printed single object.
                    items = vec![serde_json::from_str(&body)?];
                    break;
                }
                Err(e) => {
                    return Err(PieError::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
        items
    };
    files.into_iter().map(ClassSplit::from_file).collect()
}

pub fn write_class_splits(path: impl AsRef<Path>, splits: &[ClassSplit]) -> Result<()> {
    let path = path.as_ref();
    let files: Vec<_> = splits.iter().map(ClassSplit::to_file).collect();
    let body = serde_json::to_string_pretty(&files)?;
    std::fs::write(path, body).map_err(|e| PieError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _IoWrite;

    fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn turn(text: &str, dialogue: &str, t: usize) -> Utterance {
        Utterance::new(text).unwrap().with_turn(dialogue, t)
    }

    #[test]
    fn jsonl_line_maps_fields() {
        let f = write_tmp("{\"text\":\"book a flight\",\"intent\":\"book_flight\"}\n\n", ".jsonl");
        let us = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(us.len(), 1);
        assert_eq!(us[0].text, "book a flight");
        assert_eq!(us[0].gold_intent.as_deref(), Some("book_flight"));
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write_tmp("", ".jsonl");
        assert!(load_corpus(f.path(), CorpusFormat::Jsonl).unwrap().is_empty());
    }

    #[test]
    fn parse_error_names_line() {
        let f = write_tmp("{\"text\":\"ok\"}\n{oops\n", ".jsonl");
        let err = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap_err();
        match err {
            PieError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_format_is_error() {
        assert!(matches!(
            "xml".parse::<CorpusFormat>(),
            Err(PieError::UnknownFormat(_))
        ));
    }

    #[test]
    fn csv_with_header() {
        let f = write_tmp("text,intent\n\"hello, there\",greet\nbye,\n", ".csv");
        let us = load_corpus(f.path(), CorpusFormat::Csv).unwrap();
        assert_eq!(us.len(), 2);
        assert_eq!(us[0].text, "hello, there");
        assert_eq!(us[0].gold_intent.as_deref(), Some("greet"));
        assert_eq!(us[1].gold_intent, None);
    }

    #[test]
    fn dialogue_json_enumerates_turns() {
        let f = write_tmp(
            r#"[[{"text":"hi","intent":"greet"},{"text":"find music"},{"text":"thanks"}]]"#,
            ".json",
        );
        let us = load_corpus(f.path(), CorpusFormat::DialogueJson).unwrap();
        let turns: Vec<_> = us.iter().map(|u| u.turn_index.unwrap()).collect();
        assert_eq!(turns, vec![0, 1, 2]);
        assert!(us.iter().all(|u| u.dialogue_id == us[0].dialogue_id));
    }

    #[test]
    fn first_turns_per_dialogue() {
        let us = vec![turn("a1", "A", 1), turn("a0", "A", 0), turn("b0", "B", 0)];
        let got = select_first_turns(&us).unwrap();
        let texts: Vec<_> = got.iter().map(|u| u.text.as_str()).collect();
        assert_eq!(texts, vec!["a0", "b0"]);
        assert_eq!(select_first_turns(&got).unwrap(), got);
    }

    #[test]
    fn first_turn_rule_is_positional() {
        let us = vec![
            turn("Can you suggest something else?", "sgd-1", 0),
            turn("I want to hear some jazz", "sgd-1", 1),
        ];
        let got = select_first_turns(&us).unwrap();
        assert_eq!(got[0].text, "Can you suggest something else?");
    }

    #[test]
    fn first_turns_require_metadata() {
        let us = vec![Utterance::new("x").unwrap()];
        assert!(select_first_turns(&us).is_err());
    }

    fn many(intent: &str, n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance::labelled(format!("{intent} {i}"), intent).unwrap())
            .collect()
    }

    #[test]
    fn cap_binding_and_not_binding() {
        let mut us = many("big", 1500);
        us.extend(many("small", 40));
        let capped = cap_per_intent(&us, 1000, 3).unwrap();
        let count = |name: &str| capped.iter().filter(|u| u.gold_intent.as_deref() == Some(name)).count();
        assert_eq!(count("big"), 1000);
        assert_eq!(count("small"), 40);
        let small_cap = cap_per_intent(&many("small", 40), 100, 3).unwrap();
        assert_eq!(small_cap.len(), 40);
    }

    #[test]
    fn cap_is_deterministic_and_zero_rejected() {
        let us = many("x", 50);
        assert_eq!(cap_per_intent(&us, 10, 7).unwrap(), cap_per_intent(&us, 10, 7).unwrap());
        assert_ne!(cap_per_intent(&us, 10, 7).unwrap(), cap_per_intent(&us, 10, 8).unwrap());
        assert!(cap_per_intent(&us, 0, 7).is_err());
    }

    #[test]
    fn normalisation_examples() {
        assert_eq!(normalize_intent_name("play_music").unwrap().display, "play music");
        assert_eq!(normalize_intent_name("BookFlight").unwrap().display, "book flight");
        assert_eq!(
            normalize_intent_name("remove from playlist music").unwrap().display,
            "remove from playlist music"
        );
        assert_eq!(normalize_intent_name("GET_WEATHER").unwrap().display, "get weather");
        assert_eq!(normalize_intent_name("lost-or-stolen_card").unwrap().display, "lost or stolen card");
        assert_eq!(normalize_intent_name("HTTPServer").unwrap().display, "http server");
        assert!(normalize_intent_name("  ").is_err());
    }

    /// Stems computed with NLTK's `PorterStemmer(mode=ORIGINAL_ALGORITHM)`.
    #[test]
    fn porter_stems_match_reference() {
        let reference = [
            ("restaurant", "restaur"),
            ("reservation", "reserv"),
            ("reserve", "reserv"),
            ("booking", "book"),
            ("flights", "flight"),
            ("checking", "check"),
            ("playing", "plai"),
            ("play", "plai"),
            ("balance", "balanc"),
            ("cards", "card"),
            ("topping", "top"),
            ("limits", "limit"),
            ("pending", "pend"),
            ("verify", "verifi"),
            ("verification", "verif"),
            ("alarms", "alarm"),
            ("setting", "set"),
        ];
        for (word, stem) in reference {
            assert_eq!(porter_stemmer::stem(word), stem, "{word}");
        }
    }

    fn names(xs: &[&str]) -> Vec<IntentName> {
        xs.iter().map(|s| normalize_intent_name(s).unwrap()).collect()
    }

    #[test]
    fn overlap_matching_examples() {
        let a = names(&["restaurant reservation", "open account", "BookFlight"]);
        let b = names(&["reserve restaurant", "open checking account", "book flight"]);
        let pairs = match_intents(&a, &b);
        let got: Vec<_> = pairs.iter().map(|(x, y)| (x.raw.as_str(), y.raw.as_str())).collect();
        assert_eq!(
            got,
            vec![("restaurant reservation", "reserve restaurant"), ("BookFlight", "book flight")]
        );
        assert_eq!(canonical_intent_key(&a[0]), "reserv restaur");
    }

    #[test]
    fn split_disjointness_and_coverage() {
        assert!(ClassSplit::new(0, &["a"], &["a"], &["b"]).is_err());
        let split = ClassSplit::new(0, &["a"], &["b"], &["c", "d"]).unwrap();
        split.validate_against("toy", &names(&["a", "b", "c", "d"])).unwrap();
        assert!(split.validate_against("toy", &names(&["a", "b", "c"])).is_err());
    }

    #[test]
    fn known_benchmark_sizes_enforced() {
        assert_eq!(known_split_sizes("Banking77"), Some([25, 25, 27]));
        assert_eq!(known_split_sizes("hwu64"), Some([23, 16, 25]));
        assert_eq!(known_split_sizes("liu_54"), Some([18, 18, 18]));
        assert_eq!(known_split_sizes("clinc150"), Some([50, 50, 50]));
        let split = ClassSplit::new(0, &["a"], &["b"], &["c"]).unwrap();
        assert!(split.validate_against("banking77", &names(&["a", "b", "c"])).is_err());
    }

    #[test]
    fn split_file_round_trip_formats() {
        let s = ClassSplit::new(0, &["a", "b"], &["c"], &["d"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.json");
        write_class_splits(&p, std::slice::from_ref(&s)).unwrap();
        assert_eq!(load_class_splits(&p).unwrap(), vec![s.clone()]);
        let one = write_tmp(r#"{"split_id": 0, "train": ["a","b"], "valid": ["c"], "test": ["d"]}"#, ".json");
        assert_eq!(load_class_splits(one.path()).unwrap(), vec![s]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn word() -> impl Strategy<Value = String> {
            prop::sample::select(vec![
                "book", "booking", "flight", "flights", "restaurant", "reservation", "reserve",
                "open", "account", "card", "cards", "top", "up", "play", "music",
            ])
            .prop_map(str::to_string)
        }

        fn intent() -> impl Strategy<Value = IntentName> {
            prop::collection::vec(word(), 1..4)
                .prop_map(|ws| normalize_intent_name(&ws.join("_")).unwrap())
        }

        proptest! {
            #[test]
            fn matching_is_symmetric(a in prop::collection::vec(intent(), 0..12),
                                     b in prop::collection::vec(intent(), 0..12)) {
                let ab: BTreeSet<_> = match_intents(&a, &b).into_iter().collect();
                let ba: BTreeSet<_> = match_intents(&b, &a).into_iter().map(|(x, y)| (y, x)).collect();
                prop_assert_eq!(ab, ba);
            }

            #[test]
            fn matching_is_reflexive(a in prop::collection::vec(intent(), 1..12)) {
                let pairs = match_intents(&a, &a);
                for n in &a {
                    prop_assert!(pairs.iter().any(|(x, y)| x == n && y == n));
                }
            }

            #[test]
            fn cap_output_is_sub_multiset(sizes in prop::collection::vec(1usize..30, 1..6),
                                          cap in 1usize..20, seed in any::<u64>()) {
                let mut us = Vec::new();
                for (i, n) in sizes.iter().enumerate() {
                    us.extend(many(&format!("i{i}"), *n));
                }
                let capped = cap_per_intent(&us, cap, seed).unwrap();
                let mut counts: HashMap<&str, usize> = HashMap::new();
                for u in &capped {
                    prop_assert!(us.contains(u));
                    *counts.entry(u.gold_intent.as_deref().unwrap()).or_default() += 1;
                }
                for (i, n) in sizes.iter().enumerate() {
                    let got = counts.get(format!("i{i}").as_str()).copied().unwrap_or(0);
                    prop_assert_eq!(got, (*n).min(cap));
                }
            }
        }
    }
}
