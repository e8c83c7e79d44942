//! Intent role labelling: six role labels encoded as 13 BIO tags, a
//! trainable tagger, and exact-match span scoring.

mod eval;
mod io;
mod tagger;

pub use eval::{evaluate_tagger, LabelScore, TaggerReport};
pub use io::{load_annotations, read_spans_jsonl, write_annotations_jsonl, write_spans_jsonl, SpanRecord};
pub use tagger::{
    tagger_backend, train_tagger, EpochRecord, HashedTagger, HashedTaggerConfig, TaggerLog,
    TrainingOptions, TAGGER_BACKEND,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RoleLabel {
    Action,
    Argument,
    Request,
    Query,
    Slot,
    Problem,
}

impl RoleLabel {
    pub const ALL: [RoleLabel; 6] = [
        RoleLabel::Action,
        RoleLabel::Argument,
        RoleLabel::Request,
        RoleLabel::Query,
        RoleLabel::Slot,
        RoleLabel::Problem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleLabel::Action => "Action",
            RoleLabel::Argument => "Argument",
            RoleLabel::Request => "Request",
            RoleLabel::Query => "Query",
            RoleLabel::Slot => "Slot",
            RoleLabel::Problem => "Problem",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RoleLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleLabel {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        RoleLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| PieError::UnknownTag(s.to_string()))
    }
}

/// One BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Begin(RoleLabel),
    Inside(RoleLabel),
}

pub const TAG_COUNT: usize = 1 + 2 * RoleLabel::ALL.len();

impl Tag {
    /// Dense index: `O` is 0, `B-X` is `1 + 2i`, `I-X` is `2 + 2i`.
    pub fn index(self) -> usize {
        match self {
            Tag::Outside => 0,
            Tag::Begin(l) => 1 + 2 * l.index(),
            Tag::Inside(l) => 2 + 2 * l.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        match i {
            0 => Some(Tag::Outside),
            i if i < TAG_COUNT => {
                let label = RoleLabel::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 {
                    Tag::Begin(label)
                } else {
                    Tag::Inside(label)
                })
            }
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Tag> {
        (0..TAG_COUNT).filter_map(Tag::from_index)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Begin(l) => write!(f, "B-{l}"),
            Tag::Inside(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for Tag {
    type Err = PieError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let unknown = || PieError::UnknownTag(s.to_string());
        let (prefix, label) = s.split_once('-').ok_or_else(unknown)?;
        let label: RoleLabel = label.parse().map_err(|_| unknown())?;
        match prefix {
            "B" => Ok(Tag::Begin(label)),
            "I" => Ok(Tag::Inside(label)),
            _ => Err(unknown()),
        }
    }
}

impl Serialize for Tag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A labelled half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IrlSpan {
    pub label: RoleLabel,
    pub start: usize,
    pub end: usize,
}

impl IrlSpan {
    pub fn new(label: RoleLabel, start: usize, end: usize) -> Self {
        Self { label, start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks ranges and overlap; returns the spans sorted by start.
pub fn validate_spans(token_count: usize, spans: &[IrlSpan]) -> Result<Vec<IrlSpan>> {
    let mut sorted = spans.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start >= s.end || s.end > token_count {
            return Err(PieError::InvalidSpan(format!(
                "{}({}, {}) outside 0..{token_count} or empty",
                s.label, s.start, s.end
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(PieError::InvalidSpan(format!(
                "{}({}, {}) overlaps {}({}, {})",
                w[0].label, w[0].start, w[0].end, w[1].label, w[1].start, w[1].end
            )));
        }
    }
    Ok(sorted)
}

/// A tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSequence(pub Vec<Tag>);

impl TagSequence {
    pub fn parse<S: AsRef<str>>(tags: &[S]) -> Result<Self> {
        tags.iter()
            .map(|t| t.as_ref().parse())
            .collect::<Result<Vec<_>>>()
            .map(TagSequence)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Tag] {
        &self.0
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.0.iter().map(Tag::to_string).collect()
    }
}

/// Encodes spans as BIO: `B-X` on each span's first token, `I-X` on the rest, `O` elsewhere.
///
/// ```
/// use pie_core::irl::{spans_to_bio, IrlSpan, RoleLabel};
/// let tags = spans_to_bio(6, &[
///     IrlSpan::new(RoleLabel::Action, 3, 4),
///     IrlSpan::new(RoleLabel::Argument, 5, 6),
/// ]).unwrap();
/// assert_eq!(tags.to_strings(), ["O", "O", "O", "B-Action", "O", "B-Argument"]);
/// ```
pub fn spans_to_bio(token_count: usize, spans: &[IrlSpan]) -> Result<TagSequence> {
    let spans = validate_spans(token_count, spans)?;
    let mut tags = vec![Tag::Outside; token_count];
    for s in spans {
        tags[s.start] = Tag::Begin(s.label);
        for t in &mut tags[s.start + 1..s.end] {
            *t = Tag::Inside(s.label);
        }
    }
    Ok(TagSequence(tags))
}

/// Decodes maximal `B-X (I-X)*` runs. A stray `I-X` (after `O` or after a
/// different label) opens a new span, so decoding is total.
pub fn bio_to_spans(tags: &TagSequence) -> Vec<IrlSpan> {
    let mut spans = Vec::new();
    let mut open: Option<IrlSpan> = None;
    for (i, tag) in tags.0.iter().enumerate() {
        match *tag {
            Tag::Outside => {
                spans.extend(open.take());
            }
            Tag::Begin(label) => {
                spans.extend(open.take());
                open = Some(IrlSpan::new(label, i, i + 1));
            }
            Tag::Inside(label) => match open.as_mut() {
                Some(s) if s.label == label => s.end = i + 1,
                _ => {
                    spans.extend(open.take());
                    open = Some(IrlSpan::new(label, i, i + 1));
                }
            },
        }
    }
    spans.extend(open);
    spans
}

/// String-level decoding; errors only on tags outside the 13-tag alphabet.
pub fn bio_strings_to_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<IrlSpan>> {
    Ok(bio_to_spans(&TagSequence::parse(tags)?))
}

/// Anything that can produce role spans for a tokenised utterance.
pub trait IrlTagger: Sync {
    fn tag(&self, tokens: &[String]) -> Result<Vec<IrlSpan>>;
}

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub tokens: Vec<String>,
    pub tags: TagSequence,
}

impl Annotation {
    pub fn new(tokens: Vec<String>, tags: TagSequence) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(PieError::Shape(format!(
                "{} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Self { tokens, tags })
    }

    pub fn from_spans(tokens: Vec<String>, spans: &[IrlSpan]) -> Result<Self> {
        let tags = spans_to_bio(tokens.len(), spans)?;
        Ok(Self { tokens, tags })
    }

    pub fn spans(&self) -> Vec<IrlSpan> {
        bio_to_spans(&self.tags)
    }
}
