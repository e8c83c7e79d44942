//! File helpers shared by the CLI and the pipeline.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pie_core::corpus::{load_corpus, CorpusFormat, Utterance};
use pie_core::encoder::Embedding;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Guesses the corpus format from the extension: `.csv`, `.json`
/// (dialogues), anything else JSONL.
pub fn infer_format(path: &Path) -> CorpusFormat {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("csv") => CorpusFormat::Csv,
        Some("json") => CorpusFormat::DialogueJson,
        _ => CorpusFormat::Jsonl,
    }
}

pub fn read_corpus(path: &Path, format: Option<CorpusFormat>) -> Result<Vec<Utterance>> {
    let format = format.unwrap_or_else(|| infer_format(path));
    load_corpus(path, format).with_context(|| format!("loading corpus {}", path.display()))
}

/// Reads a JSON or TOML file, chosen by extension.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    } else {
        serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    }
}

/// One text or token list per input line: JSONL objects with `text` or
/// `tokens`, or plain lines for any other extension than `.jsonl`.
pub enum InputLine {
    Text(String),
    Tokens(Vec<String>),
}

pub fn read_input_lines(path: &Path) -> Result<Vec<InputLine>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let jsonl = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if !jsonl {
            out.push(InputLine::Text(line));
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if let Some(tokens) = v.get("tokens") {
            out.push(InputLine::Tokens(serde_json::from_value(tokens.clone())?));
        } else if let Some(text) = v.get("text").and_then(|t| t.as_str()) {
            out.push(InputLine::Text(text.to_string()));
        } else {
            bail!(
                "{}:{}: expected a `text` or `tokens` field",
                path.display(),
                i + 1
            );
        }
    }
    Ok(out)
}

/// Shape sidecar written next to a vector blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixShape {
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub byte_order: String,
    pub layout: String,
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

/// Writes `vectors` as little-endian f32, row-major, plus `<path>.json`.
pub fn write_matrix(path: &Path, vectors: &[Embedding]) -> Result<MatrixShape> {
    let cols = vectors.first().map_or(0, Embedding::dim);
    let mut bytes = Vec::with_capacity(vectors.len() * cols * 4);
    for v in vectors {
        if v.dim() != cols {
            bail!("rows differ in width");
        }
        for x in v.as_slice() {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let shape = MatrixShape {
        rows: vectors.len(),
        cols,
        dtype: "float32".into(),
        byte_order: "little".into(),
        layout: "row-major".into(),
    };
    write_json(&sidecar_path(path), &shape)?;
    Ok(shape)
}

pub fn read_matrix(path: &Path) -> Result<(MatrixShape, Vec<f32>)> {
    let shape: MatrixShape = read_config(&sidecar_path(path))?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != shape.rows * shape.cols * 4 {
        return Err(anyhow!(
            "{}: {} bytes do not match shape {}x{}",
            path.display(),
            bytes.len(),
            shape.rows,
            shape.cols
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((shape, values))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
