#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

const VERBS: [&str; 4] = ["book", "cancel", "check", "change"];
const NOUNS: [&str; 5] = ["flight", "hotel", "table", "car", "ticket"];
const OPENERS: [&str; 4] = ["please", "i want to", "can you", "help me"];
const TAILS: [&str; 4] = ["today", "for tomorrow", "right now", "soon"];

fn all_intents() -> Vec<(&'static str, &'static str)> {
    VERBS
        .iter()
        .flat_map(|v| NOUNS.iter().map(move |n| (*v, *n)))
        .collect()
}

fn utterance(i: usize, verb: &str, noun: &str) -> (Vec<String>, usize, usize) {
    let mut words: Vec<String> = OPENERS[i % 4].split(' ').map(String::from).collect();
    let v = words.len();
    words.push(verb.into());
    words.push(if i.is_multiple_of(2) { "a".into() } else { "my".into() });
    let n = words.len();
    words.push(noun.into());
    words.extend(TAILS[(i / 2) % 4].split(' ').map(String::from));
    (words, v, n)
}

/// Paths of a tiny but complete set of pipeline inputs.
pub struct Fixture {
    pub dir: PathBuf,
    pub corpus_a: PathBuf,
    pub corpus_b: PathBuf,
    pub annotations: PathBuf,
    pub annotations_valid: PathBuf,
    pub dataset: PathBuf,
    pub splits: PathBuf,
}

/// Pre-training corpora over the first 12 verb/noun intents (split into
/// two corpora), IRL annotations marking each verb as Action and noun as
/// Argument, and a 10-intent downstream dataset with five class splits of seven
/// test intents each.
pub fn write_fixture(dir: &Path) -> Fixture {
    fs::create_dir_all(dir).unwrap();
    let intents = all_intents();
    let (pre, down) = intents.split_at(12);

    let mut a = String::new();
    let mut b = String::new();
    for (j, (v, n)) in pre.iter().enumerate() {
        for i in 0..6 {
            let (words, _, _) = utterance(i + j, v, n);
            let line = serde_json::json!({"text": words.join(" "), "intent": format!("{v}_{n}")})
                .to_string();
            let target = if j % 2 == 0 { &mut a } else { &mut b };
            writeln!(target, "{line}").unwrap();
        }
    }
    let corpus_a = dir.join("alpha.jsonl");
    let corpus_b = dir.join("beta.jsonl");
    fs::write(&corpus_a, a).unwrap();
    fs::write(&corpus_b, b).unwrap();

    let mut ann = String::new();
    let mut ann_valid = String::new();
    for (j, (v, n)) in intents.iter().enumerate() {
        for i in 0..3 {
            let (words, vi, ni) = utterance(i * 3 + j, v, n);
            let mut tags = vec!["O".to_string(); words.len()];
            tags[vi] = "B-Action".into();
            tags[ni] = "B-Argument".into();
            let line = serde_json::json!({"tokens": words, "tags": tags}).to_string();
            let target = if i == 2 { &mut ann_valid } else { &mut ann };
            writeln!(target, "{line}").unwrap();
        }
    }
    let annotations = dir.join("irl_train.jsonl");
    let annotations_valid = dir.join("irl_valid.jsonl");
    fs::write(&annotations, ann).unwrap();
    fs::write(&annotations_valid, ann_valid).unwrap();

    let mut ds = String::new();
    let names: Vec<String> = down
        .iter()
        .chain(&pre[..2])
        .map(|(v, n)| format!("{v}_{n}"))
        .collect();
    for (j, name) in names.iter().enumerate() {
        let (v, n) = name.split_once('_').unwrap();
        for i in 0..8 {
            let (words, _, _) = utterance(i + 7 * j, v, n);
            writeln!(
                ds,
                "{}",
                serde_json::json!({"text": words.join(" "), "intent": name})
            )
            .unwrap();
        }
    }
    let dataset = dir.join("downstream.jsonl");
    fs::write(&dataset, ds).unwrap();

    let splits: Vec<_> = (0..5)
        .map(|s| {
            let rot: Vec<&String> = names.iter().cycle().skip(2 * s).take(names.len()).collect();
            serde_json::json!({"split_id": s, "train": rot[7..9], "valid": rot[9..], "test": rot[..7]})
        })
        .collect();
    let splits_path = dir.join("splits.json");
    fs::write(&splits_path, serde_json::to_string_pretty(&splits).unwrap()).unwrap();

    Fixture {
        dir: dir.to_path_buf(),
        corpus_a,
        corpus_b,
        annotations,
        annotations_valid,
        dataset,
        splits: splits_path,
    }
}

/// A pipeline config over `fx` running `stages`. `inputs` adds keys to the
/// `[inputs]` table and `extra` appends whole tables.
pub fn pipeline_toml(
    fx: &Fixture,
    out: &Path,
    stages: &[&str],
    inputs: &str,
    extra: &str,
) -> String {
    let quoted: Vec<String> = stages.iter().map(|s| format!("\"{s}\"")).collect();
    format!(
        r#"seed = 7
out_dir = "{out}"
stages = [{stages}]

[inputs]
annotations = "{ann}"
annotations_valid = "{ann_valid}"
{inputs}

[[inputs.corpora]]
name = "alpha"
path = "{a}"

[[inputs.corpora]]
name = "beta"
path = "{b}"
cap = 5

[[inputs.datasets]]
id = "downstream"
path = "{ds}"
splits = "{splits}"

[irl]
epochs = 8
learning_rate = 0.05
batch_size = 4
hidden_dim = 16
hash_bins = 512

[encoder]
backend = "toy"
dim = 16
hash_bins = 512

[pretrain]
epochs = 2
learning_rate = 0.02
batch_size = 8

[eval]
n = 5
k = 1
q = 5
episodes_per_split = 10
label_support = true

[sweep]
axis = "k"
values = [0, 1, 2]

{extra}
"#,
        out = out.display(),
        stages = quoted.join(", "),
        a = fx.corpus_a.display(),
        b = fx.corpus_b.display(),
        ds = fx.dataset.display(),
        splits = fx.splits.display(),
        ann = fx.annotations.display(),
        ann_valid = fx.annotations_valid.display(),
    )
}
