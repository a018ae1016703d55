//! Column-format tagged corpora and BIO tag handling.
//!
//! A corpus file holds one token per line, a blank line between sentences.
//! Each line is either `<token>` or `<token> ... <tag>`; when more than two
//! columns are present only the first (token) and last (tag) are used, so
//! four-column CoNLL-2003 files load unmodified. Lines starting with
//! `-DOCSTART-` are skipped.
//!
//! Tags follow the BIO scheme: `O`, or `B-<LABEL>` / `I-<LABEL>` where the
//! label comes from a [`TagScheme`]. [`extract_spans`] converts a valid tag
//! sequence into entity spans and [`spans_to_tags`] inverts it.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token: its surface form and, when the corpus is tagged, its gold tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub gold_tag: Option<String>,
}

/// A non-empty token sequence, the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::data("empty sentence"));
        }
        for tok in &tokens {
            if tok.surface.is_empty() || tok.surface.chars().any(char::is_whitespace) {
                return Err(Error::data(format!(
                    "token surface {:?} is empty or contains whitespace",
                    tok.surface
                )));
            }
        }
        Ok(Sentence { tokens })
    }

    /// Build an untagged sentence from plain surfaces.
    pub fn from_surfaces<S: Into<String>>(surfaces: impl IntoIterator<Item = S>) -> Result<Self> {
        Sentence::new(
            surfaces
                .into_iter()
                .map(|s| Token { surface: s.into(), gold_tag: None })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.surface.as_str())
    }

    /// Gold tags of every token; `None` if any token is untagged.
    pub fn gold_tags(&self) -> Option<Vec<String>> {
        self.tokens.iter().map(|t| t.gold_tag.clone()).collect()
    }
}

/// The label inventory and the derived tag set `{O} ∪ {B-L, I-L}`.
///
/// Tag indices are stable: `O` is 0 and label `k` (0-based, in declaration
/// order) owns `B = 1 + 2k` and `I = 2 + 2k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    labels: Vec<String>,
}

/// A tag decomposed into its structural role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagRole {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl TagScheme {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::config("tag scheme needs at least one label"));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_uppercase()) {
                return Err(Error::config(format!(
                    "label {label:?} must be non-empty uppercase ASCII"
                )));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::config(format!("duplicate label {label:?}")));
            }
        }
        Ok(TagScheme { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Number of distinct tags: `1 + 2 * labels`.
    pub fn tag_count(&self) -> usize {
        1 + 2 * self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Stable index of a tag string, or an error naming the tag.
    pub fn tag_index(&self, tag: &str) -> Result<usize> {
        match self.parse_tag(tag)? {
            TagRole::Outside => Ok(0),
            TagRole::Begin(k) => Ok(1 + 2 * k),
            TagRole::Inside(k) => Ok(2 + 2 * k),
        }
    }

    /// Tag string for a stable index.
    pub fn tag_name(&self, index: usize) -> Result<String> {
        if index == 0 {
            return Ok("O".to_string());
        }
        let k = (index - 1) / 2;
        let label = self
            .labels
            .get(k)
            .ok_or_else(|| Error::data(format!("tag index {index} out of range")))?;
        if index % 2 == 1 {
            Ok(format!("B-{label}"))
        } else {
            Ok(format!("I-{label}"))
        }
    }

    /// Parse a tag string into its role, checking the label is known.
    pub fn parse_tag(&self, tag: &str) -> Result<TagRole> {
        if tag == "O" {
            return Ok(TagRole::Outside);
        }
        let err = || Error::data(format!("tag {tag:?} is not in the tag scheme"));
        let (prefix, label) = tag.split_once('-').ok_or_else(err)?;
        let k = self.label_index(label).ok_or_else(err)?;
        match prefix {
            "B" => Ok(TagRole::Begin(k)),
            "I" => Ok(TagRole::Inside(k)),
            _ => Err(err()),
        }
    }
}

/// A typed entity occupying tokens `start..end`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// Sentences plus the tag scheme their gold tags belong to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub scheme: TagScheme,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, scheme: TagScheme) -> Result<Self> {
        for sentence in &sentences {
            for token in &sentence.tokens {
                if let Some(tag) = &token.gold_tag {
                    scheme.parse_tag(tag)?;
                }
            }
        }
        Ok(Dataset { sentences, scheme })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// Read a column-format corpus.
///
/// The tag column must be consistently present or consistently absent across
/// the whole stream. A missing final blank line is tolerated.
pub fn read_conll<R: BufRead>(reader: R, scheme: &TagScheme) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    // None until the first token line fixes whether the file is tagged.
    let mut tagged: Option<bool> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !current.is_empty() {
                sentences.push(Sentence::new(std::mem::take(&mut current))?);
            }
            continue;
        }
        if trimmed.starts_with("-DOCSTART-") {
            continue;
        }
        let columns: Vec<&str> = trimmed.split_whitespace().collect();
        let has_tag = columns.len() >= 2;
        match tagged {
            None => tagged = Some(has_tag),
            Some(t) if t != has_tag => {
                return Err(Error::data(format!(
                    "line {line_no}: mixed tagged and untagged lines in one file"
                )));
            }
            _ => {}
        }
        let surface = columns[0].to_string();
        let gold_tag = if has_tag {
            let tag = *columns.last().expect("non-empty columns");
            scheme
                .parse_tag(tag)
                .map_err(|e| Error::data(format!("line {line_no}: {e}")))?;
            Some(tag.to_string())
        } else {
            None
        };
        current.push(Token { surface, gold_tag });
    }
    if !current.is_empty() {
        sentences.push(Sentence::new(current)?);
    }
    Dataset::new(sentences, scheme.clone())
}

/// Write a corpus in the column format accepted by [`read_conll`].
///
/// Reading the output back reproduces the dataset exactly.
pub fn write_conll<W: Write>(dataset: &Dataset, mut writer: W) -> Result<()> {
    for sentence in &dataset.sentences {
        for token in &sentence.tokens {
            match &token.gold_tag {
                Some(tag) => writeln!(writer, "{} {}", token.surface, tag)?,
                None => writeln!(writer, "{}", token.surface)?,
            }
        }
        writeln!(writer)?;
    }
    Ok(())
}

/// Check (and optionally repair) the BIO structure of a tag sequence.
///
/// A violation is an `I-X` that follows start-of-sentence, `O`, or a tag of
/// a different label. With `repair` each violating `I-X` is rewritten to
/// `B-X`; otherwise the tags are returned unchanged. The returned list holds
/// the violating positions.
pub fn validate_bio(
    tags: &[String],
    scheme: &TagScheme,
    repair: bool,
) -> Result<(Vec<String>, Vec<usize>)> {
    let mut roles = Vec::with_capacity(tags.len());
    for tag in tags {
        roles.push(scheme.parse_tag(tag)?);
    }
    let mut out = tags.to_vec();
    let mut violations = Vec::new();
    for i in 0..roles.len() {
        if let TagRole::Inside(label) = roles[i] {
            let continues = i > 0
                && matches!(roles[i - 1],
                    TagRole::Begin(prev) | TagRole::Inside(prev) if prev == label);
            if !continues {
                violations.push(i);
                if repair {
                    out[i] = format!("B-{}", scheme.labels()[label]);
                    roles[i] = TagRole::Begin(label);
                }
            }
        }
    }
    Ok((out, violations))
}

fn check_tag_shape(tag: &str) -> Result<()> {
    // Structural check only: the label is taken at face value.
    if tag == "O" {
        return Ok(());
    }
    match tag.split_once('-') {
        Some(("B" | "I", label)) if !label.is_empty() => Ok(()),
        _ => Err(Error::data(format!("malformed tag {tag:?}"))),
    }
}

/// Convert a strictly valid BIO sequence into entity spans.
///
/// Each maximal `B-X (I-X)*` run becomes one span. Invalid BIO (an `I-X`
/// not continuing a run of the same label) is an error; repair first with
/// [`validate_bio`].
pub fn extract_spans(tags: &[String]) -> Result<Vec<EntitySpan>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, tag) in tags.iter().enumerate() {
        check_tag_shape(tag)?;
        if let Some(rest) = tag.strip_prefix("B-") {
            if let Some((start, label)) = open.take() {
                spans.push(EntitySpan { start, end: i, label: label.to_string() });
            }
            open = Some((i, rest));
        } else if let Some(rest) = tag.strip_prefix("I-") {
            match open {
                Some((_, label)) if label == rest => {}
                _ => {
                    return Err(Error::data(format!(
                        "invalid BIO: I-{rest} at position {i} does not continue an entity"
                    )));
                }
            }
        } else {
            if let Some((start, label)) = open.take() {
                spans.push(EntitySpan { start, end: i, label: label.to_string() });
            }
        }
    }
    if let Some((start, label)) = open {
        spans.push(EntitySpan { start, end: tags.len(), label: label.to_string() });
    }
    Ok(spans)
}

/// Inverse of [`extract_spans`]: render spans as a BIO tag sequence.
///
/// Spans must be in order, non-overlapping, and within `len`.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); len];
    let mut prev_end = 0;
    for span in spans {
        if span.start >= span.end || span.end > len || span.start < prev_end {
            return Err(Error::data(format!(
                "span {}..{} ({}) is out of order or out of range",
                span.start, span.end, span.label
            )));
        }
        tags[span.start] = format!("B-{}", span.label);
        for tag in tags.iter_mut().take(span.end).skip(span.start + 1) {
            *tag = format!("I-{}", span.label);
        }
        prev_end = span.end;
    }
    Ok(tags)
}

/// Split raw text into an untagged sentence.
///
/// Splits on whitespace, then peels ASCII punctuation off token edges into
/// separate tokens: leading characters left to right, trailing characters
/// emitted in text order after the core. A token made entirely of
/// punctuation yields one token per character.
pub fn tokenize_raw(text: &str) -> Result<Sentence> {
    let mut surfaces: Vec<String> = Vec::new();
    for word in text.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        while lo < hi && chars[lo].is_ascii_punctuation() {
            leading.push(chars[lo].to_string());
            lo += 1;
        }
        while hi > lo && chars[hi - 1].is_ascii_punctuation() {
            trailing.push(chars[hi - 1].to_string());
            hi -= 1;
        }
        trailing.reverse();
        surfaces.extend(leading);
        if lo < hi {
            surfaces.push(chars[lo..hi].iter().collect());
        }
        surfaces.extend(trailing);
    }
    if surfaces.is_empty() {
        return Err(Error::data("empty sentence"));
    }
    Sentence::from_surfaces(surfaces)
}
