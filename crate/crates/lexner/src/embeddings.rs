//! Pretrained vectors, vocabularies, and embedding-table construction.
//!
//! Word lookup is two-step: try the surface form exactly, then lowercased,
//! then fall back to `<unk>`. Tables built here are deterministic functions
//! of their inputs and the seed.

use std::collections::HashMap;
use std::io::BufRead;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::lexicon::Lexicon;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// A keyed embedding matrix: one row per key, all rows the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    pub matrix: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            keys: Vec::new(),
            index: HashMap::new(),
            matrix: Array2::zeros((0, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    /// Row index of a key, exact match only.
    pub fn row(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    /// Exact lookup, then lowercased lookup.
    pub fn lookup(&self, key: &str) -> Option<&[f64]> {
        let row = self
            .row(key)
            .or_else(|| self.row(&key.to_lowercase()))?;
        self.matrix.row(row).to_slice()
    }

    /// Append a row; the first insert of a key wins.
    pub fn push(&mut self, key: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::data(format!(
                "vector for {key:?} has dimension {} (expected {})",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(key) {
            return Ok(());
        }
        self.index.insert(key.to_string(), self.keys.len());
        self.keys.push(key.to_string());
        let mut matrix = Array2::zeros((self.keys.len(), self.dim));
        matrix
            .slice_mut(ndarray::s![..self.keys.len() - 1, ..])
            .assign(&self.matrix);
        for (slot, &v) in matrix.row_mut(self.keys.len() - 1).iter_mut().zip(vector) {
            *slot = v;
        }
        self.matrix = matrix;
        Ok(())
    }
}

/// Word-to-index map with reserved entries: index 0 is `<pad>`, index 1 is
/// `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn with_reserved(reserved: &[&str]) -> Self {
        let mut vocab = Vocab { words: Vec::new(), index: HashMap::new() };
        for word in reserved {
            vocab.add(word);
        }
        vocab
    }

    pub fn new() -> Self {
        Vocab::with_reserved(&[PAD, UNK])
    }

    /// Rebuild the lookup map after deserialization.
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    fn add(&mut self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) => i,
            None => {
                let i = self.words.len();
                self.index.insert(word.to_string(), i);
                self.words.push(word.to_string());
                i
            }
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Exact, then lowercase, then `<unk>`.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.get(word)
            .or_else(|| self.get(&word.to_lowercase()))
            .unwrap_or(1)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Character inventory: index 0 `<pad>`, 1 `<unk>`, 2 the word-boundary
/// marker, then every character of the training corpus in code-point order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;
pub const CHAR_BOUNDARY: usize = 2;

impl CharVocab {
    pub fn build(dataset: &Dataset) -> Self {
        let mut seen: Vec<char> = dataset
            .sentences
            .iter()
            .flat_map(|s| s.surfaces())
            .flat_map(|w| w.chars())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        CharVocab::from_chars(seen)
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 3))
            .collect();
        CharVocab { chars, index }
    }

    /// Total index space including the three reserved slots.
    pub fn len(&self) -> usize {
        self.chars.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id_or_unk(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(CHAR_UNK)
    }
}

/// The capped output vocabulary of the language-model heads: the most
/// frequent training words plus a trailing `<unk>` class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmVocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LmVocab {
    /// Rank training words by descending frequency (ties by word) and keep
    /// at most `cap` of them.
    pub fn build(dataset: &Dataset, cap: usize) -> Self {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for sentence in &dataset.sentences {
            for surface in sentence.surfaces() {
                *counts.entry(surface).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = ranked
            .into_iter()
            .take(cap)
            .map(|(w, _)| w.to_string())
            .collect();
        LmVocab::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        LmVocab { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Number of output classes: kept words plus `<unk>`.
    pub fn class_count(&self) -> usize {
        self.words.len() + 1
    }

    pub fn unk_class(&self) -> usize {
        self.words.len()
    }

    pub fn class_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or_else(|| self.unk_class())
    }
}

/// Parse a pretrained vector file: one `<word> <v1> ... <vD>` entry per
/// line. Duplicate words keep the first entry.
pub fn load_pretrained<R: BufRead>(reader: R, expected_dim: usize) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new(expected_dim);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line");
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::data(format!("line {line_no}: unparsable number {p:?}"))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != expected_dim {
            return Err(Error::data(format!(
                "line {line_no}: entry for {word:?} has dimension {} (expected {expected_dim})",
                values.len()
            )));
        }
        table.push(word, &values)?;
    }
    Ok(table)
}

fn uniform_row<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let bound = (3.0 / dim as f64).sqrt();
    (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Build the word vocabulary and its trainable embedding matrix.
///
/// The vocabulary is every training word plus any word of the other splits
/// that the pretrained table covers. Covered words copy their pretrained
/// vector; the rest (and `<unk>`) draw uniformly from ±sqrt(3/dim).
pub fn build_vocab(
    train: &Dataset,
    other_splits: &[&Dataset],
    pretrained: &EmbeddingTable,
    seed: u64,
) -> Result<(Vocab, EmbeddingTable)> {
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let dim = pretrained.dim();
    let mut vocab = Vocab::new();
    for sentence in &train.sentences {
        for surface in sentence.surfaces() {
            vocab.add(surface);
        }
    }
    for split in other_splits {
        for sentence in &split.sentences {
            for surface in sentence.surfaces() {
                if pretrained.lookup(surface).is_some() {
                    vocab.add(surface);
                }
            }
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::new(dim);
    for word in vocab.words() {
        if word == PAD {
            table.push(word, &vec![0.0; dim])?;
        } else if word == UNK {
            let row = uniform_row(&mut rng, dim);
            table.push(word, &row)?;
        } else {
            match pretrained.lookup(word) {
                Some(vector) => table.push(word, &vector.to_vec())?,
                None => {
                    let row = uniform_row(&mut rng, dim);
                    table.push(word, &row)?;
                }
            }
        }
    }
    Ok((vocab, table))
}

/// Initialize the phrase embedding table for a lexicon.
///
/// Each phrase row is the mean of its constituent word vectors truncated
/// to the first `phrase_dim` components; constituents missing from the
/// word table use the `<unk>` vector. The trailing `NONE` row draws
/// uniformly from ±sqrt(3/phrase_dim).
pub fn init_phrase_embeddings(
    lexicon: &Lexicon,
    word_table: &EmbeddingTable,
    phrase_dim: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    if phrase_dim == 0 || phrase_dim > word_table.dim() {
        return Err(Error::config(format!(
            "phrase dimension {phrase_dim} must be in 1..={}",
            word_table.dim()
        )));
    }
    let unk = word_table
        .lookup(UNK)
        .ok_or_else(|| Error::config("word table has no <unk> row"))?
        .to_vec();
    let mut table = EmbeddingTable::new(phrase_dim);
    for id in 0..lexicon.phrase_count() {
        let tokens = lexicon.phrase(id);
        let mut mean = vec![0.0; phrase_dim];
        for token in tokens {
            let vector = word_table.lookup(token).unwrap_or(&unk);
            for (m, &v) in mean.iter_mut().zip(vector.iter().take(phrase_dim)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= tokens.len() as f64;
        }
        table.push(&lexicon.phrase_text(id), &mean)?;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    table.push("NONE", &uniform_row(&mut rng, phrase_dim))?;
    Ok(table)
}
