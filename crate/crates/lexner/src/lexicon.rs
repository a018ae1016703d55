//! Domain dictionary matching and frequency-weighted word-set vectors.
//!
//! For every token of a sentence the dictionary yields four word sets:
//! the phrases the token Begins, is in the Middle of, Ends, or constitutes
//! as a Single word. An empty set carries the `NONE` sentinel. The four
//! sets are compressed into one vector per token by weighting each phrase
//! embedding with its smoothed occurrence count `z(w) + c` and normalizing
//! by the total mass `Z` of all entries across the four sets, so phrases
//! compete with each other across sets:
//!
//! ```text
//! block(S) = (1/Z) Σ_{w ∈ S} (z(w) + c) · e(w)
//! Z        = Σ over every entry of B, M, E, S of (z(w) + c)
//! ```
//!
//! Occurrence counts obey the covered rule: a match lying strictly inside
//! another match in the same sentence is not counted. The smoothing
//! constant `c` is the smallest integer such that at least 10% of the
//! training word types occur fewer than `c` times.

use std::collections::HashMap;
use std::io::BufRead;

use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// Identifier of a phrase inside a [`Lexicon`]; indices are assigned in
/// first-seen load order.
pub type PhraseId = usize;

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: HashMap<String, usize>,
    terminal: Option<PhraseId>,
}

/// A domain dictionary: unique lowercase phrases and a token-level trie
/// over them. Matching is case-insensitive via lowercase normalization.
#[derive(Debug, Clone)]
pub struct Lexicon {
    phrases: Vec<Vec<String>>,
    nodes: Vec<TrieNode>,
}

impl Lexicon {
    /// Build a lexicon from phrases, each a whitespace-separated token
    /// sequence. Phrases are lowercased and deduplicated.
    pub fn from_phrases<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut lex = Lexicon { phrases: Vec::new(), nodes: vec![TrieNode::default()] };
        for phrase in phrases {
            let tokens: Vec<String> = phrase
                .as_ref()
                .split_whitespace()
                .map(|t| t.to_lowercase())
                .collect();
            if tokens.is_empty() {
                continue;
            }
            lex.insert(tokens);
        }
        if lex.phrases.is_empty() {
            return Err(Error::data("empty lexicon"));
        }
        Ok(lex)
    }

    fn insert(&mut self, tokens: Vec<String>) {
        let mut node = 0;
        for token in &tokens {
            node = match self.nodes[node].children.get(token) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(token.clone(), next);
                    next
                }
            };
        }
        if self.nodes[node].terminal.is_none() {
            let id = self.phrases.len();
            self.nodes[node].terminal = Some(id);
            self.phrases.push(tokens);
        }
    }

    pub fn phrase_count(&self) -> usize {
        self.phrases.len()
    }

    /// Token sequence of a phrase.
    pub fn phrase(&self, id: PhraseId) -> &[String] {
        &self.phrases[id]
    }

    /// Phrase rendered with single spaces between tokens.
    pub fn phrase_text(&self, id: PhraseId) -> String {
        self.phrases[id].join(" ")
    }

    pub fn phrase_texts(&self) -> Vec<String> {
        (0..self.phrases.len()).map(|i| self.phrase_text(i)).collect()
    }

    /// All dictionary matches in a lowercased token sequence, as
    /// `(start, end, phrase)` with `end` exclusive.
    pub fn matches(&self, lowered: &[String]) -> Vec<(usize, usize, PhraseId)> {
        let mut found = Vec::new();
        for start in 0..lowered.len() {
            let mut node = 0;
            for (offset, token) in lowered[start..].iter().enumerate() {
                match self.nodes[node].children.get(token) {
                    Some(&next) => {
                        node = next;
                        if let Some(id) = self.nodes[node].terminal {
                            found.push((start, start + offset + 1, id));
                        }
                    }
                    None => break,
                }
            }
        }
        found
    }
}

/// Load a lexicon file: one phrase per line, tokens space-separated,
/// `#` comments and blank lines ignored.
pub fn load_lexicon<R: BufRead>(reader: R) -> Result<Lexicon> {
    let mut phrases = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        phrases.push(trimmed.to_string());
    }
    Lexicon::from_phrases(phrases)
}

/// The four word sets of one token. Phrase ids within a set are sorted and
/// deduplicated; an empty set stands for the `NONE` sentinel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BmesWordSets {
    pub b_set: Vec<PhraseId>,
    pub m_set: Vec<PhraseId>,
    pub e_set: Vec<PhraseId>,
    pub s_set: Vec<PhraseId>,
}

impl BmesWordSets {
    pub fn sets(&self) -> [&[PhraseId]; 4] {
        [&self.b_set, &self.m_set, &self.e_set, &self.s_set]
    }

    fn normalize(&mut self) {
        for set in [&mut self.b_set, &mut self.m_set, &mut self.e_set, &mut self.s_set] {
            set.sort_unstable();
            set.dedup();
        }
    }
}

/// The 5 binary dictionary flags (B, M, E, S, O) of one token. `O` is set
/// exactly when the other four are clear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExSoftwordFlags {
    pub flags: [u8; 5],
}

/// Dimensioning of the weighted set vector. The union over a token's four
/// sets is always treated as a multiset: a phrase appearing in several
/// sets contributes to the shared normalizer once per appearance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SetVectorConfig {
    /// Dimension of each phrase embedding; the set vector is 4× this.
    pub phrase_dim: usize,
}

impl SetVectorConfig {
    pub fn new(phrase_dim: usize) -> Result<Self> {
        if phrase_dim == 0 {
            return Err(Error::config("phrase dimension must be positive"));
        }
        Ok(SetVectorConfig { phrase_dim })
    }

    pub fn output_dim(&self) -> usize {
        4 * self.phrase_dim
    }
}

impl Default for SetVectorConfig {
    fn default() -> Self {
        SetVectorConfig { phrase_dim: 50 }
    }
}

/// Per-phrase occurrence counts and the smoothing constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LexiconStats {
    /// `z[id]` is the occurrence count of phrase `id` in the statistics
    /// corpus, covered occurrences excluded.
    pub z: Vec<u64>,
    /// Smoothing constant, at least 1.
    pub c: u64,
}

impl LexiconStats {
    pub fn new(z: Vec<u64>, c: u64) -> Result<Self> {
        if c == 0 {
            return Err(Error::config("smoothing constant must be at least 1"));
        }
        Ok(LexiconStats { z, c })
    }
}

fn lowered_surfaces(sentence: &Sentence) -> Vec<String> {
    sentence.surfaces().map(|s| s.to_lowercase()).collect()
}

/// Compute the BMES word sets for every token of a sentence.
///
/// A phrase of length `L >= 2` matched at `[i, i+L)` enters `b_set(i)`,
/// `m_set(i+1) .. m_set(i+L-2)`, and `e_set(i+L-1)`; a single-token phrase
/// enters `s_set` of its position. All overlapping matches are retained.
pub fn match_bmes(sentence: &Sentence, lexicon: &Lexicon) -> Vec<BmesWordSets> {
    let lowered = lowered_surfaces(sentence);
    let mut sets = vec![BmesWordSets::default(); lowered.len()];
    for (start, end, id) in lexicon.matches(&lowered) {
        if end - start == 1 {
            sets[start].s_set.push(id);
        } else {
            sets[start].b_set.push(id);
            for token_sets in sets.iter_mut().take(end - 1).skip(start + 1) {
                token_sets.m_set.push(id);
            }
            sets[end - 1].e_set.push(id);
        }
    }
    for token_sets in &mut sets {
        token_sets.normalize();
    }
    sets
}

/// Count phrase occurrences over a statistics corpus, skipping occurrences
/// properly contained in another match of the same sentence.
pub fn count_frequencies(statistics_corpus: &[Sentence], lexicon: &Lexicon) -> Vec<u64> {
    let mut counts = vec![0u64; lexicon.phrase_count()];
    for sentence in statistics_corpus {
        let lowered = lowered_surfaces(sentence);
        let occurrences = lexicon.matches(&lowered);
        for &(i, j, id) in &occurrences {
            let covered = occurrences
                .iter()
                .any(|&(i2, j2, _)| i2 <= i && j <= j2 && (i2, j2) != (i, j));
            if !covered {
                counts[id] += 1;
            }
        }
    }
    counts
}

/// Smallest `c >= 1` such that at least 10% of the word types in the count
/// map occur fewer than `c` times.
pub fn smoothing_constant(training_word_counts: &HashMap<String, u64>) -> Result<u64> {
    let total = training_word_counts.len();
    if total == 0 {
        return Err(Error::data("smoothing constant needs at least one word type"));
    }
    let max = training_word_counts.values().copied().max().unwrap_or(0);
    for c in 1..=max + 1 {
        let rare = training_word_counts.values().filter(|&&n| n < c).count();
        // rare / total >= 0.10, kept in integers
        if rare * 10 >= total {
            return Ok(c);
        }
    }
    unreachable!("c = max + 1 always satisfies the threshold");
}

/// Count occurrences and derive the smoothing constant in one pass over a
/// statistics corpus (word types are counted case-insensitively, matching
/// the lexicon's own normalization).
pub fn build_stats(statistics_corpus: &[Sentence], lexicon: &Lexicon) -> Result<LexiconStats> {
    let z = count_frequencies(statistics_corpus, lexicon);
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for sentence in statistics_corpus {
        for surface in sentence.surfaces() {
            *word_counts.entry(surface.to_lowercase()).or_insert(0) += 1;
        }
    }
    let c = smoothing_constant(&word_counts)?;
    LexiconStats::new(z, c)
}

/// Index of the `NONE` row in a phrase embedding table built for `lexicon`.
pub fn none_row(lexicon: &Lexicon) -> usize {
    lexicon.phrase_count()
}

/// Expand one token's word sets into per-set weighted phrase-table rows.
///
/// Each entry of each set contributes `z(w) + c` to the shared mass `Z`
/// (the `NONE` sentinel counts with `z = 0`), and the returned weights are
/// `(z(w) + c) / Z`.
pub fn weighted_entries(
    sets: &BmesWordSets,
    stats: &LexiconStats,
    none_row: usize,
) -> [Vec<(usize, f64)>; 4] {
    let c = stats.c as f64;
    let mut mass = 0.0;
    let raw: Vec<Vec<(usize, f64)>> = sets
        .sets()
        .iter()
        .map(|set| {
            if set.is_empty() {
                mass += c;
                vec![(none_row, c)]
            } else {
                set.iter()
                    .map(|&id| {
                        let w = stats.z[id] as f64 + c;
                        mass += w;
                        (id, w)
                    })
                    .collect()
            }
        })
        .collect();
    let mut out: [Vec<(usize, f64)>; 4] = Default::default();
    for (slot, entries) in out.iter_mut().zip(raw) {
        *slot = entries.into_iter().map(|(row, w)| (row, w / mass)).collect();
    }
    out
}

/// Compress one token's word sets into the concatenated `B‖M‖E‖S` vector.
///
/// `phrase_embeddings` maps phrase-table rows (lexicon order plus the
/// trailing `NONE` row) to vectors of equal dimension; the output has four
/// times that dimension.
pub fn set_vector(
    sets: &BmesWordSets,
    stats: &LexiconStats,
    phrase_embeddings: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if phrase_embeddings.is_empty() {
        return Err(Error::config("phrase embedding table is empty"));
    }
    let dim = phrase_embeddings[0].len();
    if phrase_embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::config("phrase embeddings have mixed dimensions"));
    }
    let none = phrase_embeddings.len() - 1;
    let entries = weighted_entries(sets, stats, none);
    let mut out = vec![0.0; 4 * dim];
    for (block, set_entries) in entries.iter().enumerate() {
        for &(row, weight) in set_entries {
            let embedding = phrase_embeddings
                .get(row)
                .ok_or_else(|| Error::config(format!("phrase row {row} out of range")))?;
            for (o, &e) in out[block * dim..(block + 1) * dim].iter_mut().zip(embedding) {
                *o += weight * e;
            }
        }
    }
    Ok(out)
}

/// Reduce one token's word sets to the 5 binary flags of the weaker
/// dictionary encoding.
pub fn exsoftword_flags(sentence: &Sentence, lexicon: &Lexicon) -> Vec<ExSoftwordFlags> {
    match_bmes(sentence, lexicon)
        .iter()
        .map(flags_from_sets)
        .collect()
}

/// Flags derived from already-computed word sets.
pub fn flags_from_sets(sets: &BmesWordSets) -> ExSoftwordFlags {
    let mut flags = [0u8; 5];
    for (i, set) in sets.sets().iter().enumerate() {
        if !set.is_empty() {
            flags[i] = 1;
        }
    }
    if flags[..4].iter().all(|&f| f == 0) {
        flags[4] = 1;
    }
    ExSoftwordFlags { flags }
}

/// Text report over a lexicon and a statistics corpus: phrase count,
/// counted occurrences, the smoothing constant, and the most frequent
/// phrases.
pub fn stats_report(lexicon: &Lexicon, stats: &LexiconStats, top: usize) -> String {
    let matched: u64 = stats.z.iter().sum();
    let mut ranked: Vec<(PhraseId, u64)> = stats
        .z
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, n)| n > 0)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::new();
    out.push_str(&format!("phrases: {}\n", lexicon.phrase_count()));
    out.push_str(&format!("matched occurrences: {matched}\n"));
    out.push_str(&format!("smoothing constant c: {}\n", stats.c));
    out.push_str(&format!("top phrases (of {}):\n", ranked.len()));
    for (id, count) in ranked.into_iter().take(top) {
        out.push_str(&format!("  {:>8}  {}\n", count, lexicon.phrase_text(id)));
    }
    out
}
