//! The neural encoder: a character-level BiLSTM feeding highway layers
//! and language-model heads, then a word-level BiLSTM over
//! `[word embedding ‖ char feature ‖ lexicon vector]` producing per-token
//! emission scores for the CRF.
//!
//! The character stream interleaves word-boundary markers with each
//! word's characters: `⟨m₀⟩ c(w₀) ⟨m₁⟩ c(w₁) … ⟨mₙ⟩`. Word `j` reads its
//! character feature from the forward state at marker `j+1` and the
//! backward state at marker `j`, so both directions have consumed the
//! whole word. Language-model heads sit on the interior markers only:
//! the forward head at marker `j` predicts word `j`, the backward head
//! predicts word `j−1`; a one-word sentence therefore has no
//! language-model positions.

pub mod highway;
pub mod lstm;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TagScheme};
use crate::crf::{crf_nll, crf_nll_backward, CrfParams};
use crate::embeddings::{CharVocab, LmVocab, Vocab, CHAR_BOUNDARY};
use crate::error::{Error, Result};
use crate::lexicon::{
    exsoftword_flags, match_bmes, none_row, weighted_entries, Lexicon, LexiconStats,
};
use highway::{highway_backward, highway_batch, Highway, HighwayTrace};
use lstm::{glorot, lstm_backward, lstm_forward, LstmParams, LstmTrace};

/// How dictionary matches are encoded into the token representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LexiconMode {
    /// No lexicon feature.
    None,
    /// Five binary flags (B, M, E, S, O).
    ExSoftword,
    /// Frequency-weighted set vectors over the four BMES sets.
    SoftLexicon,
}

impl FromStr for LexiconMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LexiconMode::None),
            "exsoftword" => Ok(LexiconMode::ExSoftword),
            "softlexicon" => Ok(LexiconMode::SoftLexicon),
            other => Err(Error::config(format!(
                "unknown lexicon mode {other:?} (expected none, exsoftword, or softlexicon)"
            ))),
        }
    }
}

impl fmt::Display for LexiconMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LexiconMode::None => "none",
            LexiconMode::ExSoftword => "exsoftword",
            LexiconMode::SoftLexicon => "softlexicon",
        })
    }
}

/// Dimensions and switches of the model. The vocabulary sizes are fixed
/// when the tables are built and travel with the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Hidden size per LSTM direction, shared by both levels.
    pub hidden: usize,
    pub highway_depth: usize,
    pub dropout: f64,
    /// Dimension of one phrase embedding; the set vector is 4× this.
    pub phrase_dim: usize,
    pub lexicon_mode: LexiconMode,
    pub lm_vocab_cap: usize,
    pub tag_count: usize,
    pub word_vocab: usize,
    pub char_vocab: usize,
    /// Rows of the phrase table including the NONE row; 0 unless
    /// softlexicon.
    pub phrase_rows: usize,
    /// Output classes of each language-model head (capped words + <unk>).
    pub lm_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("hidden", self.hidden),
            ("highway_depth", self.highway_depth),
            ("tag_count", self.tag_count),
            ("lm_vocab_cap", self.lm_vocab_cap),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.word_vocab < 2 || self.char_vocab < 3 {
            return Err(Error::config("vocabulary is missing its reserved entries"));
        }
        if self.lm_classes < 1 {
            return Err(Error::config("language-model head needs at least one class"));
        }
        match self.lexicon_mode {
            LexiconMode::SoftLexicon => {
                if self.phrase_dim == 0 {
                    return Err(Error::config("phrase_dim must be positive"));
                }
                if self.phrase_rows < 2 {
                    return Err(Error::config(
                        "softlexicon needs a phrase table (phrases + NONE row)",
                    ));
                }
            }
            _ => {
                if self.phrase_rows != 0 {
                    return Err(Error::config(
                        "phrase table is only meaningful in softlexicon mode",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Width of the lexicon part of the token input.
    pub fn lex_dim(&self) -> usize {
        match self.lexicon_mode {
            LexiconMode::None => 0,
            LexiconMode::ExSoftword => 5,
            LexiconMode::SoftLexicon => 4 * self.phrase_dim,
        }
    }

    /// Width of the full token input to the word-level BiLSTM.
    pub fn token_dim(&self) -> usize {
        self.word_dim + 2 * self.hidden + self.lex_dim()
    }
}

/// A linear projection `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn zeros(out: usize, input: usize) -> Self {
        Linear { w: Array2::zeros((out, input)), b: Array1::zeros(out) }
    }

    pub fn init<R: Rng>(&mut self, rng: &mut R) {
        glorot(&mut self.w, rng);
        self.b.fill(0.0);
    }

    pub fn forward(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        xs.dot(&self.w.t()) + &self.b
    }

    pub fn backward(
        &self,
        xs: ArrayView2<f64>,
        d_out: ArrayView2<f64>,
        grads: &mut Linear,
    ) -> Array2<f64> {
        grads.w += &d_out.t().dot(&xs);
        grads.b += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.w)
    }
}

/// Every trainable tensor of the model. Field order is the initialization
/// order, the visitor order, and the checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub char_emb: Array2<f64>,
    pub char_fwd: LstmParams,
    pub char_bwd: LstmParams,
    pub highway_tag: Highway,
    pub highway_lm_fwd: Highway,
    pub highway_lm_bwd: Highway,
    pub lm_fwd: Linear,
    pub lm_bwd: Linear,
    pub word_emb: Array2<f64>,
    pub phrase_emb: Option<Array2<f64>>,
    pub word_fwd: LstmParams,
    pub word_bwd: LstmParams,
    pub emission: Linear,
    pub crf: CrfParams,
}

macro_rules! model_tensors {
    ($self:ident, $out:ident, $iter:ident, $as_slice:ident, $push:ident) => {{
        $push!($out, "char_emb", $self.char_emb);
        $push!($out, "char_fwd.w_ih", $self.char_fwd.w_ih);
        $push!($out, "char_fwd.w_hh", $self.char_fwd.w_hh);
        $push!($out, "char_fwd.b", $self.char_fwd.b);
        $push!($out, "char_bwd.w_ih", $self.char_bwd.w_ih);
        $push!($out, "char_bwd.w_hh", $self.char_bwd.w_hh);
        $push!($out, "char_bwd.b", $self.char_bwd.b);
        for (i, layer) in $self.highway_tag.layers.$iter().enumerate() {
            $push!($out, format!("highway_tag.{i}.w_t"), layer.w_t);
            $push!($out, format!("highway_tag.{i}.b_t"), layer.b_t);
            $push!($out, format!("highway_tag.{i}.w_h"), layer.w_h);
            $push!($out, format!("highway_tag.{i}.b_h"), layer.b_h);
        }
        for (i, layer) in $self.highway_lm_fwd.layers.$iter().enumerate() {
            $push!($out, format!("highway_lm_fwd.{i}.w_t"), layer.w_t);
            $push!($out, format!("highway_lm_fwd.{i}.b_t"), layer.b_t);
            $push!($out, format!("highway_lm_fwd.{i}.w_h"), layer.w_h);
            $push!($out, format!("highway_lm_fwd.{i}.b_h"), layer.b_h);
        }
        for (i, layer) in $self.highway_lm_bwd.layers.$iter().enumerate() {
            $push!($out, format!("highway_lm_bwd.{i}.w_t"), layer.w_t);
            $push!($out, format!("highway_lm_bwd.{i}.b_t"), layer.b_t);
            $push!($out, format!("highway_lm_bwd.{i}.w_h"), layer.w_h);
            $push!($out, format!("highway_lm_bwd.{i}.b_h"), layer.b_h);
        }
        $push!($out, "lm_fwd.w", $self.lm_fwd.w);
        $push!($out, "lm_fwd.b", $self.lm_fwd.b);
        $push!($out, "lm_bwd.w", $self.lm_bwd.w);
        $push!($out, "lm_bwd.b", $self.lm_bwd.b);
        $push!($out, "word_emb", $self.word_emb);
        if let Some(phrase_emb) = $self.phrase_emb.$as_slice() {
            $push!($out, "phrase_emb", *phrase_emb);
        }
        $push!($out, "word_fwd.w_ih", $self.word_fwd.w_ih);
        $push!($out, "word_fwd.w_hh", $self.word_fwd.w_hh);
        $push!($out, "word_fwd.b", $self.word_fwd.b);
        $push!($out, "word_bwd.w_ih", $self.word_bwd.w_ih);
        $push!($out, "word_bwd.w_hh", $self.word_bwd.w_hh);
        $push!($out, "word_bwd.b", $self.word_bwd.b);
        $push!($out, "emission.w", $self.emission.w);
        $push!($out, "emission.b", $self.emission.b);
        $push!($out, "crf.transitions", $self.crf.transitions);
    }};
}

impl ModelParams {
    /// Allocate all tensors at the shapes the config dictates, zeroed
    /// (the CRF mask included — use [`init_params`] for a trainable
    /// starting point).
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        ModelParams {
            char_emb: Array2::zeros((config.char_vocab, config.char_dim)),
            char_fwd: LstmParams::zeros(config.char_dim, h),
            char_bwd: LstmParams::zeros(config.char_dim, h),
            highway_tag: Highway::zeros(2 * h, config.highway_depth),
            highway_lm_fwd: Highway::zeros(h, config.highway_depth),
            highway_lm_bwd: Highway::zeros(h, config.highway_depth),
            lm_fwd: Linear::zeros(config.lm_classes, h),
            lm_bwd: Linear::zeros(config.lm_classes, h),
            word_emb: Array2::zeros((config.word_vocab, config.word_dim)),
            phrase_emb: match config.lexicon_mode {
                LexiconMode::SoftLexicon => {
                    Some(Array2::zeros((config.phrase_rows, config.phrase_dim)))
                }
                _ => None,
            },
            word_fwd: LstmParams::zeros(config.token_dim(), h),
            word_bwd: LstmParams::zeros(config.token_dim(), h),
            emission: Linear::zeros(config.tag_count, 2 * h),
            crf: CrfParams::new(config.tag_count),
        }
    }

    /// A same-shaped parameter set with every tensor zeroed, for gradient
    /// and velocity buffers.
    pub fn zeros_like(&self) -> Self {
        let mut copy = self.clone();
        for (_, tensor) in copy.tensors_mut() {
            for v in tensor {
                *v = 0.0;
            }
        }
        copy
    }

    /// All tensors as named flat slices, in a fixed documented order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        macro_rules! push {
            ($out:ident, $name:expr, $field:expr) => {
                $out.push((
                    $name.to_string(),
                    $field.as_slice().expect("model tensors use standard layout"),
                ))
            };
        }
        let mut out = Vec::new();
        model_tensors!(self, out, iter, as_ref, push);
        out
    }

    /// Mutable variant of [`ModelParams::tensors`]; identical names and
    /// order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        macro_rules! push {
            ($out:ident, $name:expr, $field:expr) => {
                $out.push((
                    $name.to_string(),
                    $field
                        .as_slice_mut()
                        .expect("model tensors use standard layout"),
                ))
            };
        }
        let mut out = Vec::new();
        model_tensors!(self, out, iter_mut, as_mut, push);
        out
    }

    /// True when every tensor entry is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Deterministic parameter initialization: Glorot-uniform weight
/// matrices, embedding tables uniform in ±sqrt(3/dim), LSTM forget-gate
/// biases 1, all other biases 0, CRF transitions 0 (masked entries
/// excepted).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    embedding_init(&mut params.char_emb, &mut rng);
    params.char_fwd.init(&mut rng);
    params.char_bwd.init(&mut rng);
    params.highway_tag.init(&mut rng);
    params.highway_lm_fwd.init(&mut rng);
    params.highway_lm_bwd.init(&mut rng);
    params.lm_fwd.init(&mut rng);
    params.lm_bwd.init(&mut rng);
    embedding_init(&mut params.word_emb, &mut rng);
    if let Some(phrase_emb) = &mut params.phrase_emb {
        embedding_init(phrase_emb, &mut rng);
    }
    params.word_fwd.init(&mut rng);
    params.word_bwd.init(&mut rng);
    params.emission.init(&mut rng);
    Ok(params)
}

fn embedding_init<R: Rng>(table: &mut Array2<f64>, rng: &mut R) {
    let bound = (3.0 / table.ncols() as f64).sqrt();
    for v in table.iter_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// A lexicon together with its occurrence statistics — everything the
/// feature builder needs beyond the raw dictionary.
#[derive(Debug, Clone)]
pub struct LexiconArtifacts {
    pub lexicon: Lexicon,
    pub stats: LexiconStats,
}

/// Per-token lexicon features in the form the encoder consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum LexFeatures {
    None,
    /// One `[B, M, E, S, O]` flag row per token.
    Flags(Vec<[u8; 5]>),
    /// Per token, per BMES block: `(phrase-table row, weight)` pairs.
    Weighted(Vec<[Vec<(usize, f64)>; 4]>),
}

/// Everything about one sentence the encoder needs, resolved to indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceFeatures {
    pub word_ids: Vec<usize>,
    /// Character ids with a boundary marker before, between, and after
    /// the words.
    pub char_stream: Vec<usize>,
    /// Positions of the `n + 1` boundary markers within `char_stream`.
    pub markers: Vec<usize>,
    /// Forward LM classes: at interior marker `j`, word `j` (length n−1).
    pub lm_fwd_targets: Vec<usize>,
    /// Backward LM classes: at interior marker `j`, word `j−1`.
    pub lm_bwd_targets: Vec<usize>,
    pub gold: Option<Vec<usize>>,
    pub lex: LexFeatures,
}

impl SentenceFeatures {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

/// Resolve a sentence to model inputs: word/char/LM indices, gold tag
/// indices when present, and the lexicon feature for the given mode.
pub fn build_features(
    sentence: &Sentence,
    scheme: &TagScheme,
    vocab: &Vocab,
    chars: &CharVocab,
    lm: &LmVocab,
    mode: LexiconMode,
    lex: Option<&LexiconArtifacts>,
) -> Result<SentenceFeatures> {
    let surfaces: Vec<&str> = sentence.surfaces().collect();
    let n = surfaces.len();
    let word_ids = surfaces.iter().map(|w| vocab.id_or_unk(w)).collect();

    let mut char_stream = vec![CHAR_BOUNDARY];
    let mut markers = vec![0];
    for surface in &surfaces {
        char_stream.extend(surface.chars().map(|c| chars.id_or_unk(c)));
        markers.push(char_stream.len());
        char_stream.push(CHAR_BOUNDARY);
    }

    let lm_fwd_targets = (1..n).map(|j| lm.class_of(surfaces[j])).collect();
    let lm_bwd_targets = (1..n).map(|j| lm.class_of(surfaces[j - 1])).collect();

    let gold = match sentence.gold_tags() {
        Some(tags) => Some(
            tags.iter()
                .map(|t| scheme.tag_index(t))
                .collect::<Result<Vec<usize>>>()?,
        ),
        None => None,
    };

    let lex = match mode {
        LexiconMode::None => LexFeatures::None,
        LexiconMode::ExSoftword => {
            let artifacts = lex.ok_or_else(|| {
                Error::config("exsoftword mode requires lexicon artifacts")
            })?;
            LexFeatures::Flags(
                exsoftword_flags(sentence, &artifacts.lexicon)
                    .into_iter()
                    .map(|f| f.flags)
                    .collect(),
            )
        }
        LexiconMode::SoftLexicon => {
            let artifacts = lex.ok_or_else(|| {
                Error::config("softlexicon mode requires lexicon artifacts")
            })?;
            let none = none_row(&artifacts.lexicon);
            LexFeatures::Weighted(
                match_bmes(sentence, &artifacts.lexicon)
                    .iter()
                    .map(|sets| weighted_entries(sets, &artifacts.stats, none))
                    .collect(),
            )
        }
    };

    Ok(SentenceFeatures {
        word_ids,
        char_stream,
        markers,
        lm_fwd_targets,
        lm_bwd_targets,
        gold,
        lex,
    })
}

/// The encoder's outputs for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    /// `n × token_dim`, after dropout in train mode.
    pub token_inputs: Array2<f64>,
    /// `n × tag_count`.
    pub emissions: Array2<f64>,
    /// `(n−1) × lm_classes`; empty for one-word sentences.
    pub lm_fwd_logits: Array2<f64>,
    pub lm_bwd_logits: Array2<f64>,
}

/// Intermediate state retained by [`encode_with_trace`] for the backward
/// pass.
pub struct EncodeTrace {
    char_x: Array2<f64>,
    char_fwd: LstmTrace,
    /// Trace of the backward char LSTM, which runs over the reversed
    /// stream; its row `r` corresponds to stream position `C−1−r`.
    char_bwd: LstmTrace,
    hw_tag: HighwayTrace,
    mask_in: Option<Array2<f64>>,
    token_in: Array2<f64>,
    word_fwd: LstmTrace,
    word_bwd: LstmTrace,
    mask_out: Option<Array2<f64>>,
    word_out: Array2<f64>,
    hw_lm_f: HighwayTrace,
    hw_lm_b: HighwayTrace,
    lm_hw_f_out: Array2<f64>,
    lm_hw_b_out: Array2<f64>,
}

fn reverse_rows(a: ArrayView2<f64>) -> Array2<f64> {
    a.slice(s![..;-1, ..]).to_owned()
}

fn dropout_mask(rng: &mut ChaCha20Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 - p;
    let mut mask = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            mask[[r, c]] = if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep };
        }
    }
    mask
}

fn check_features(
    features: &SentenceFeatures,
    config: &ModelConfig,
) -> Result<()> {
    if features.is_empty() {
        return Err(Error::data("cannot encode an empty sentence"));
    }
    let n = features.len();
    if features.markers.len() != n + 1 {
        return Err(Error::data("marker count must be word count + 1"));
    }
    let ascending = features.markers.windows(2).all(|w| w[0] < w[1]);
    if features.markers[0] != 0
        || !ascending
        || features.markers[n] + 1 != features.char_stream.len()
    {
        return Err(Error::data("marker positions are inconsistent with the stream"));
    }
    if features.word_ids.iter().any(|&w| w >= config.word_vocab) {
        return Err(Error::data("word id out of vocabulary range"));
    }
    if features.char_stream.iter().any(|&c| c >= config.char_vocab) {
        return Err(Error::data("character id out of vocabulary range"));
    }
    let mode_matches = matches!(
        (&features.lex, config.lexicon_mode),
        (LexFeatures::None, LexiconMode::None)
            | (LexFeatures::Flags(_), LexiconMode::ExSoftword)
            | (LexFeatures::Weighted(_), LexiconMode::SoftLexicon)
    );
    if !mode_matches {
        return Err(Error::data(
            "lexicon feature kind does not match the configured lexicon mode",
        ));
    }
    match &features.lex {
        LexFeatures::None => {}
        LexFeatures::Flags(rows) => {
            if rows.len() != n {
                return Err(Error::data("flag rows must match the word count"));
            }
        }
        LexFeatures::Weighted(rows) => {
            if rows.len() != n {
                return Err(Error::data("set-vector rows must match the word count"));
            }
            for blocks in rows {
                for block in blocks {
                    if block.iter().any(|&(row, _)| row >= config.phrase_rows) {
                        return Err(Error::data("phrase row out of table range"));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Forward pass keeping the intermediate state needed for backprop.
pub fn encode_with_trace(
    features: &SentenceFeatures,
    params: &ModelParams,
    config: &ModelConfig,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(EncodedSentence, EncodeTrace)> {
    check_features(features, config)?;
    let n = features.len();
    let c_len = features.char_stream.len();
    let h = config.hidden;

    // Character embeddings over the marker-interleaved stream.
    let mut char_x = Array2::zeros((c_len, config.char_dim));
    for (p, &cid) in features.char_stream.iter().enumerate() {
        char_x.row_mut(p).assign(&params.char_emb.row(cid));
    }
    let char_fwd = lstm_forward(&params.char_fwd, char_x.view());
    let char_x_rev = reverse_rows(char_x.view());
    let char_bwd = lstm_forward(&params.char_bwd, char_x_rev.view());

    // Word j's raw character feature: forward state at marker j+1,
    // backward state at marker j.
    let mut char_feat = Array2::zeros((n, 2 * h));
    for j in 0..n {
        let fwd_pos = features.markers[j + 1];
        let bwd_pos = c_len - 1 - features.markers[j];
        char_feat
            .slice_mut(s![j, 0..h])
            .assign(&char_fwd.hs.row(fwd_pos));
        char_feat
            .slice_mut(s![j, h..2 * h])
            .assign(&char_bwd.hs.row(bwd_pos));
    }
    let (hw_tag_out, hw_tag) = highway_batch(&params.highway_tag, char_feat.view());

    // Token input: [word embedding ‖ char feature ‖ lexicon vector].
    let token_dim = config.token_dim();
    let lex_off = config.word_dim + 2 * h;
    let mut token_raw = Array2::zeros((n, token_dim));
    for (j, &wid) in features.word_ids.iter().enumerate() {
        token_raw
            .slice_mut(s![j, 0..config.word_dim])
            .assign(&params.word_emb.row(wid));
    }
    token_raw
        .slice_mut(s![.., config.word_dim..lex_off])
        .assign(&hw_tag_out);
    match &features.lex {
        LexFeatures::None => {}
        LexFeatures::Flags(rows) => {
            for (j, flags) in rows.iter().enumerate() {
                for (k, &flag) in flags.iter().enumerate() {
                    token_raw[[j, lex_off + k]] = flag as f64;
                }
            }
        }
        LexFeatures::Weighted(rows) => {
            let phrase_emb = params
                .phrase_emb
                .as_ref()
                .ok_or_else(|| Error::config("softlexicon mode without a phrase table"))?;
            let pd = config.phrase_dim;
            for (j, blocks) in rows.iter().enumerate() {
                for (b, block) in blocks.iter().enumerate() {
                    let start = lex_off + b * pd;
                    let mut slot = token_raw.slice_mut(s![j, start..start + pd]);
                    for &(row, weight) in block {
                        slot.scaled_add(weight, &phrase_emb.row(row));
                    }
                }
            }
        }
    }

    // Dropout site 1: token inputs. Mask sampling order is fixed: this
    // mask first, the word-LSTM output mask second, each row-major.
    let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
    let dropping = train_mode && config.dropout > 0.0;
    let mask_in = dropping.then(|| dropout_mask(&mut rng, n, token_dim, config.dropout));
    let token_in = match &mask_in {
        Some(mask) => &token_raw * mask,
        None => token_raw,
    };

    let word_fwd = lstm_forward(&params.word_fwd, token_in.view());
    let token_in_rev = reverse_rows(token_in.view());
    let word_bwd = lstm_forward(&params.word_bwd, token_in_rev.view());

    let mut word_out_raw = Array2::zeros((n, 2 * h));
    for j in 0..n {
        word_out_raw
            .slice_mut(s![j, 0..h])
            .assign(&word_fwd.hs.row(j));
        word_out_raw
            .slice_mut(s![j, h..2 * h])
            .assign(&word_bwd.hs.row(n - 1 - j));
    }

    // Dropout site 2: word-BiLSTM outputs.
    let mask_out = dropping.then(|| dropout_mask(&mut rng, n, 2 * h, config.dropout));
    let word_out = match &mask_out {
        Some(mask) => &word_out_raw * mask,
        None => word_out_raw,
    };

    let emissions = params.emission.forward(word_out.view());

    // Language-model paths at the interior markers.
    let mut lm_in_f = Array2::zeros((n - 1, h));
    let mut lm_in_b = Array2::zeros((n - 1, h));
    for j in 1..n {
        let pos = features.markers[j];
        lm_in_f.row_mut(j - 1).assign(&char_fwd.hs.row(pos));
        lm_in_b
            .row_mut(j - 1)
            .assign(&char_bwd.hs.row(c_len - 1 - pos));
    }
    let (lm_hw_f_out, hw_lm_f) = highway_batch(&params.highway_lm_fwd, lm_in_f.view());
    let (lm_hw_b_out, hw_lm_b) = highway_batch(&params.highway_lm_bwd, lm_in_b.view());
    let lm_fwd_logits = params.lm_fwd.forward(lm_hw_f_out.view());
    let lm_bwd_logits = params.lm_bwd.forward(lm_hw_b_out.view());

    let encoded = EncodedSentence {
        token_inputs: token_in.clone(),
        emissions,
        lm_fwd_logits,
        lm_bwd_logits,
    };
    let trace = EncodeTrace {
        char_x,
        char_fwd,
        char_bwd,
        hw_tag,
        mask_in,
        token_in,
        word_fwd,
        word_bwd,
        mask_out,
        word_out,
        hw_lm_f,
        hw_lm_b,
        lm_hw_f_out,
        lm_hw_b_out,
    };
    Ok((encoded, trace))
}

/// Forward-only encoding (see [`encode_with_trace`]).
pub fn encode_sentence(
    features: &SentenceFeatures,
    params: &ModelParams,
    config: &ModelConfig,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<EncodedSentence> {
    Ok(encode_with_trace(features, params, config, train_mode, dropout_seed)?.0)
}

/// Backpropagate loss gradients on the emissions and LM logits through
/// the whole encoder, accumulating into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn encode_backward(
    features: &SentenceFeatures,
    params: &ModelParams,
    config: &ModelConfig,
    trace: &EncodeTrace,
    d_emissions: ArrayView2<f64>,
    d_lm_fwd_logits: ArrayView2<f64>,
    d_lm_bwd_logits: ArrayView2<f64>,
    grads: &mut ModelParams,
) {
    let n = features.len();
    let c_len = features.char_stream.len();
    let h = config.hidden;
    let lex_off = config.word_dim + 2 * h;

    // Emission head back to the word-BiLSTM outputs.
    let d_word_out = params
        .emission
        .backward(trace.word_out.view(), d_emissions, &mut grads.emission);
    let d_word_out_raw = match &trace.mask_out {
        Some(mask) => &d_word_out * mask,
        None => d_word_out,
    };

    // Split the two word-LSTM directions and push through each.
    let mut d_wf = Array2::zeros((n, h));
    let mut d_wb_rev = Array2::zeros((n, h));
    for j in 0..n {
        d_wf.row_mut(j).assign(&d_word_out_raw.slice(s![j, 0..h]));
        d_wb_rev
            .row_mut(n - 1 - j)
            .assign(&d_word_out_raw.slice(s![j, h..2 * h]));
    }
    let d_tok_fwd = lstm_backward(
        &params.word_fwd,
        trace.token_in.view(),
        &trace.word_fwd,
        d_wf.view(),
        &mut grads.word_fwd,
    );
    let token_in_rev = reverse_rows(trace.token_in.view());
    let d_tok_bwd_rev = lstm_backward(
        &params.word_bwd,
        token_in_rev.view(),
        &trace.word_bwd,
        d_wb_rev.view(),
        &mut grads.word_bwd,
    );
    let d_token_in = d_tok_fwd + reverse_rows(d_tok_bwd_rev.view());
    let d_token_raw = match &trace.mask_in {
        Some(mask) => d_token_in * mask,
        None => d_token_in,
    };

    // Word embeddings.
    for (j, &wid) in features.word_ids.iter().enumerate() {
        grads
            .word_emb
            .row_mut(wid)
            .scaled_add(1.0, &d_token_raw.slice(s![j, 0..config.word_dim]));
    }

    // Lexicon block.
    if let LexFeatures::Weighted(rows) = &features.lex {
        let phrase_grads = grads
            .phrase_emb
            .as_mut()
            .expect("softlexicon gradients need a phrase table");
        let pd = config.phrase_dim;
        for (j, blocks) in rows.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let start = lex_off + b * pd;
                let d_block = d_token_raw.slice(s![j, start..start + pd]);
                for &(row, weight) in block {
                    phrase_grads.row_mut(row).scaled_add(weight, &d_block);
                }
            }
        }
    }

    // Tagging highway back to the raw character features.
    let d_hw_out = d_token_raw.slice(s![.., config.word_dim..lex_off]);
    let d_char_feat = highway_backward(
        &params.highway_tag,
        &trace.hw_tag,
        d_hw_out,
        &mut grads.highway_tag,
    );

    // Language-model heads back to the character hidden states.
    let d_lm_hw_f_out = params.lm_fwd.backward(
        trace.lm_hw_f_out.view(),
        d_lm_fwd_logits,
        &mut grads.lm_fwd,
    );
    let d_lm_in_f = highway_backward(
        &params.highway_lm_fwd,
        &trace.hw_lm_f,
        d_lm_hw_f_out.view(),
        &mut grads.highway_lm_fwd,
    );
    let d_lm_hw_b_out = params.lm_bwd.backward(
        trace.lm_hw_b_out.view(),
        d_lm_bwd_logits,
        &mut grads.lm_bwd,
    );
    let d_lm_in_b = highway_backward(
        &params.highway_lm_bwd,
        &trace.hw_lm_b,
        d_lm_hw_b_out.view(),
        &mut grads.highway_lm_bwd,
    );

    // Collect every gradient landing on the character hidden streams.
    let mut d_hf = Array2::zeros((c_len, h));
    let mut d_hb_rev = Array2::zeros((c_len, h));
    for j in 0..n {
        let fwd_pos = features.markers[j + 1];
        let bwd_pos = c_len - 1 - features.markers[j];
        d_hf.row_mut(fwd_pos)
            .scaled_add(1.0, &d_char_feat.slice(s![j, 0..h]));
        d_hb_rev
            .row_mut(bwd_pos)
            .scaled_add(1.0, &d_char_feat.slice(s![j, h..2 * h]));
    }
    for j in 1..n {
        let pos = features.markers[j];
        d_hf.row_mut(pos).scaled_add(1.0, &d_lm_in_f.row(j - 1));
        d_hb_rev
            .row_mut(c_len - 1 - pos)
            .scaled_add(1.0, &d_lm_in_b.row(j - 1));
    }

    let d_char_x_fwd = lstm_backward(
        &params.char_fwd,
        trace.char_x.view(),
        &trace.char_fwd,
        d_hf.view(),
        &mut grads.char_fwd,
    );
    let char_x_rev = reverse_rows(trace.char_x.view());
    let d_char_x_bwd_rev = lstm_backward(
        &params.char_bwd,
        char_x_rev.view(),
        &trace.char_bwd,
        d_hb_rev.view(),
        &mut grads.char_bwd,
    );
    let d_char_x = d_char_x_fwd + reverse_rows(d_char_x_bwd_rev.view());
    for (p, &cid) in features.char_stream.iter().enumerate() {
        grads.char_emb.row_mut(cid).scaled_add(1.0, &d_char_x.row(p));
    }
}

fn row_log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.mapv(|v| (v - max).exp()).sum().ln()
}

fn direction_ce(logits: ArrayView2<f64>, targets: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), targets.len(), "LM target count mismatch");
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(p, &t)| row_log_sum_exp(logits.row(p)) - logits[[p, t]])
        .sum();
    total / targets.len() as f64
}

/// Language-model loss: mean cross-entropy over predicted positions per
/// direction, summed over the two directions. One-word sentences have no
/// positions and contribute zero.
pub fn lm_loss(
    fwd_logits: ArrayView2<f64>,
    fwd_targets: &[usize],
    bwd_logits: ArrayView2<f64>,
    bwd_targets: &[usize],
) -> f64 {
    direction_ce(fwd_logits, fwd_targets) + direction_ce(bwd_logits, bwd_targets)
}

/// Gradient of `scale ·` one direction's mean cross-entropy with respect
/// to its logits.
pub fn lm_loss_backward(
    logits: ArrayView2<f64>,
    targets: &[usize],
    scale: f64,
) -> Array2<f64> {
    let mut d = Array2::zeros(logits.dim());
    if targets.is_empty() {
        return d;
    }
    let per_position = scale / targets.len() as f64;
    for (p, &t) in targets.iter().enumerate() {
        let row = logits.row(p);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exp = row.mapv(|v| (v - max).exp());
        let total = exp.sum();
        let mut d_row = d.row_mut(p);
        d_row.assign(&exp.mapv(|e| per_position * e / total));
        d_row[t] -= per_position;
    }
    d
}

/// Per-sentence losses before any scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub crf: f64,
    pub lm: f64,
}

impl LossBreakdown {
    pub fn joint(&self, lm_weight: f64) -> f64 {
        self.crf + lm_weight * self.lm
    }
}

/// Forward-only joint loss of one sentence (no dropout).
pub fn sentence_loss(
    features: &SentenceFeatures,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<LossBreakdown> {
    let gold = features
        .gold
        .as_ref()
        .ok_or_else(|| Error::data("sentence has no gold tags"))?;
    let encoded = encode_sentence(features, params, config, false, 0)?;
    let crf = crf_nll(encoded.emissions.view(), &params.crf, gold)?;
    let lm = lm_loss(
        encoded.lm_fwd_logits.view(),
        &features.lm_fwd_targets,
        encoded.lm_bwd_logits.view(),
        &features.lm_bwd_targets,
    );
    Ok(LossBreakdown { crf, lm })
}

/// Compute one sentence's joint loss and accumulate the gradient of
/// `scale · (crf_nll + lm_weight · lm_loss)` into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn sentence_loss_and_grads(
    features: &SentenceFeatures,
    params: &ModelParams,
    config: &ModelConfig,
    train_mode: bool,
    dropout_seed: u64,
    lm_weight: f64,
    scale: f64,
    grads: &mut ModelParams,
) -> Result<LossBreakdown> {
    let gold = features
        .gold
        .as_ref()
        .ok_or_else(|| Error::data("sentence has no gold tags"))?;
    let (encoded, trace) =
        encode_with_trace(features, params, config, train_mode, dropout_seed)?;
    let crf = crf_nll(encoded.emissions.view(), &params.crf, gold)?;
    let (d_emissions, d_transitions) =
        crf_nll_backward(encoded.emissions.view(), &params.crf, gold, scale)?;
    grads.crf.transitions += &d_transitions;
    let lm = lm_loss(
        encoded.lm_fwd_logits.view(),
        &features.lm_fwd_targets,
        encoded.lm_bwd_logits.view(),
        &features.lm_bwd_targets,
    );
    let d_lm_f = lm_loss_backward(
        encoded.lm_fwd_logits.view(),
        &features.lm_fwd_targets,
        scale * lm_weight,
    );
    let d_lm_b = lm_loss_backward(
        encoded.lm_bwd_logits.view(),
        &features.lm_bwd_targets,
        scale * lm_weight,
    );
    encode_backward(
        features,
        params,
        config,
        &trace,
        d_emissions.view(),
        d_lm_f.view(),
        d_lm_b.view(),
        grads,
    );
    Ok(LossBreakdown { crf, lm })
}
