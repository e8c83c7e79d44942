use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Annotation, IrlSpan, TagSequence};
use crate::error::{PieError, Result};

#[derive(Deserialize)]
struct AnnotationRecord {
    tokens: Vec<String>,
    tags: Vec<String>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> PieError {
    PieError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads annotations from JSONL (`{"tokens": [...], "tags": [...]}`) or
/// CoNLL-style TSV (`token<TAB>tag`, blank line between utterances). The
/// format is sniffed from the first non-blank line.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PieError::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| PieError::io(path, e))?;
    let is_json = lines
        .iter()
        .find(|l| !l.trim().is_empty())
        .is_some_and(|l| l.trim_start().starts_with('{'));
    if is_json {
        parse_jsonl(path, &lines)
    } else {
        parse_conll(path, &lines)
    }
}

fn parse_jsonl(path: &Path, lines: &[String]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let tags = TagSequence::parse(&rec.tags).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        out.push(
            Annotation::new(rec.tokens, tags).map_err(|e| parse_err(path, i + 1, e.to_string()))?,
        );
    }
    Ok(out)
}

fn parse_conll(path: &Path, lines: &[String]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, line: usize| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let seq = TagSequence::parse(tags).map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push(Annotation::new(std::mem::take(tokens), seq)?);
        tags.clear();
        Ok(())
    };
    for (i, line) in lines.iter().enumerate() {
        let trimmed = line.trim_end();
        if trimmed.trim().is_empty() {
            flush(&mut tokens, &mut tags, i + 1)?;
            continue;
        }
        let (token, tag) = trimmed
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i + 1, "expected `token<TAB>tag`"))?;
        tokens.push(token.to_string());
        tags.push(tag.trim().to_string());
    }
    flush(&mut tokens, &mut tags, lines.len())?;
    Ok(out)
}

pub fn write_annotations_jsonl(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PieError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in annotations {
        let rec = serde_json::json!({ "tokens": a.tokens, "tags": a.tags.to_strings() });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| PieError::io(path, e))?;
    }
    w.flush().map_err(|e| PieError::io(path, e))
}

/// Tagger output for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub tokens: Vec<String>,
    pub spans: Vec<IrlSpan>,
}

pub fn write_spans_jsonl(path: impl AsRef<Path>, records: &[SpanRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| PieError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| PieError::io(path, e))?;
    }
    w.flush().map_err(|e| PieError::io(path, e))
}

pub fn read_spans_jsonl(path: impl AsRef<Path>) -> Result<Vec<SpanRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| PieError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PieError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::irl::RoleLabel;

    #[test]
    fn jsonl_and_conll_agree() {
        let dir = tempfile::tempdir().unwrap();
        let j = dir.path().join("a.jsonl");
        std::fs::write(
            &j,
            "{\"tokens\":[\"book\",\"a\",\"flight\"],\"tags\":[\"B-Action\",\"O\",\"B-Argument\"]}\n",
        )
        .unwrap();
        let c = dir.path().join("a.tsv");
        std::fs::write(&c, "book\tB-Action\na\tO\nflight\tB-Argument\n\n").unwrap();
        let a = load_annotations(&j).unwrap();
        assert_eq!(a, load_annotations(&c).unwrap());
        assert_eq!(a[0].spans()[1], IrlSpan::new(RoleLabel::Argument, 2, 3));

        let out = dir.path().join("b.jsonl");
        write_annotations_jsonl(&out, &a).unwrap();
        assert_eq!(load_annotations(&out).unwrap(), a);
    }

    #[test]
    fn misaligned_and_unknown_tags_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"tokens\":[\"a\",\"b\"],\"tags\":[\"O\"]}\n").unwrap();
        assert!(load_annotations(&p).is_err());
        std::fs::write(&p, "a\tB-Foo\n").unwrap();
        assert!(load_annotations(&p).is_err());
    }
}
