//! Entity-level precision/recall/F1 with exact-match semantics: a
//! predicted entity counts only when its start, end, and label all agree
//! with a gold entity.

use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::corpus::{extract_spans, validate_bio, Dataset, EntitySpan, Sentence, TagScheme};
use crate::crf::viterbi_decode;
use crate::error::{Error, Result};
use crate::nn::{build_features, encode_sentence, LexiconArtifacts};

/// Gold/predicted/correct entity counts for one label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub gold: u64,
    pub pred: u64,
    pub correct: u64,
}

/// Percentages for one row of counts, with the zero-denominator
/// convention: a precision (or recall) with nothing predicted (or no gold
/// entities) is 0, and F1 is 0 whenever P + R is.
pub fn precision_recall_f1(counts: LabelCounts) -> (f64, f64, f64) {
    let p = if counts.pred == 0 {
        0.0
    } else {
        100.0 * counts.correct as f64 / counts.pred as f64
    };
    let r = if counts.gold == 0 {
        0.0
    } else {
        100.0 * counts.correct as f64 / counts.gold as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Per-label and micro-averaged entity metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// One entry per label, in scheme order.
    labels: Vec<(String, LabelCounts)>,
}

impl EvalReport {
    pub fn label_counts(&self) -> &[(String, LabelCounts)] {
        &self.labels
    }

    /// Micro-averaged counts over all labels.
    pub fn overall_counts(&self) -> LabelCounts {
        let mut total = LabelCounts::default();
        for (_, c) in &self.labels {
            total.gold += c.gold;
            total.pred += c.pred;
            total.correct += c.correct;
        }
        total
    }

    pub fn overall(&self) -> (f64, f64, f64) {
        precision_recall_f1(self.overall_counts())
    }

    pub fn overall_f1(&self) -> f64 {
        self.overall().2
    }

    pub fn label_f1(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .find(|(name, _)| name == label)
            .map(|&(_, counts)| precision_recall_f1(counts).2)
    }

    /// Aligned text table, percentages to two decimals.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .labels
            .iter()
            .map(|(l, _)| l.len())
            .chain(["OVERALL".len()].into_iter())
            .max()
            .unwrap_or(7);
        let _ = writeln!(
            out,
            "{:width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>7}",
            "label", "precision", "recall", "f1", "gold", "pred", "correct"
        );
        for (label, counts) in &self.labels {
            let (p, r, f1) = precision_recall_f1(*counts);
            let _ = writeln!(
                out,
                "{label:width$}  {p:>9.2}  {r:>9.2}  {f1:>9.2}  {:>6}  {:>6}  {:>7}",
                counts.gold, counts.pred, counts.correct
            );
        }
        let total = self.overall_counts();
        let (p, r, f1) = self.overall();
        let _ = writeln!(
            out,
            "{:width$}  {p:>9.2}  {r:>9.2}  {f1:>9.2}  {:>6}  {:>6}  {:>7}",
            "OVERALL", total.gold, total.pred, total.correct
        );
        out
    }

    /// CSV rendering: `label,precision,recall,f1,gold,pred,correct` rows
    /// then an `OVERALL` row.
    pub fn csv(&self) -> String {
        let mut out = String::from("label,precision,recall,f1,gold,pred,correct\n");
        for (label, counts) in &self.labels {
            let (p, r, f1) = precision_recall_f1(*counts);
            let _ = writeln!(
                out,
                "{label},{p:.2},{r:.2},{f1:.2},{},{},{}",
                counts.gold, counts.pred, counts.correct
            );
        }
        let total = self.overall_counts();
        let (p, r, f1) = self.overall();
        let _ = writeln!(
            out,
            "OVERALL,{p:.2},{r:.2},{f1:.2},{},{},{}",
            total.gold, total.pred, total.correct
        );
        out
    }
}

fn count_spans(
    spans: &[EntitySpan],
    other: &[EntitySpan],
    index: &std::collections::HashMap<&str, usize>,
    pick_gold: bool,
    labels: &mut [(String, LabelCounts)],
) {
    for span in spans {
        let slot = index[span.label.as_str()];
        if pick_gold {
            labels[slot].1.gold += 1;
        } else {
            labels[slot].1.pred += 1;
            if other.contains(span) {
                labels[slot].1.correct += 1;
            }
        }
    }
}

/// Score predicted tag sequences against gold. Predictions are repaired
/// to valid BIO first; gold must already be valid.
pub fn entity_f1(
    gold: &[Vec<String>],
    pred: &[Vec<String>],
    scheme: &TagScheme,
) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::data(format!(
            "gold has {} sentences but predictions have {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut labels: Vec<(String, LabelCounts)> = scheme
        .labels()
        .iter()
        .map(|l| (l.clone(), LabelCounts::default()))
        .collect();
    let index: std::collections::HashMap<&str, usize> = scheme
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();

    for (s, (gold_tags, pred_tags)) in gold.iter().zip(pred.iter()).enumerate() {
        if gold_tags.len() != pred_tags.len() {
            return Err(Error::data(format!(
                "sentence {s}: gold has {} tokens but prediction has {}",
                gold_tags.len(),
                pred_tags.len()
            )));
        }
        let gold_spans = extract_spans(gold_tags)
            .map_err(|e| Error::data(format!("sentence {s}: {e}")))?;
        let (repaired, _) = validate_bio(pred_tags, scheme, true)
            .map_err(|e| Error::data(format!("sentence {s}: {e}")))?;
        let pred_spans = extract_spans(&repaired)
            .map_err(|e| Error::data(format!("sentence {s}: {e}")))?;

        count_spans(&gold_spans, &pred_spans, &index, true, &mut labels);
        count_spans(&pred_spans, &gold_spans, &index, false, &mut labels);
    }
    Ok(EvalReport { labels })
}

/// Decode one sentence with a trained model (no dropout).
pub fn predict_sentence(ckpt: &Checkpoint, sentence: &Sentence) -> Result<Vec<String>> {
    let artifacts = ckpt.artifacts()?;
    predict_with_artifacts(ckpt, artifacts.as_ref(), sentence)
}

/// Decoding inner loop for callers that already rebuilt the artifacts.
pub fn predict_with_artifacts(
    ckpt: &Checkpoint,
    artifacts: Option<&LexiconArtifacts>,
    sentence: &Sentence,
) -> Result<Vec<String>> {
    let features = build_features(
        sentence,
        &ckpt.scheme,
        &ckpt.vocab,
        &ckpt.chars,
        &ckpt.lm,
        ckpt.config.lexicon_mode,
        artifacts,
    )?;
    let encoded = encode_sentence(&features, &ckpt.params, &ckpt.config, false, 0)?;
    let path = viterbi_decode(encoded.emissions.view(), &ckpt.params.crf);
    path.tags
        .iter()
        .map(|&t| ckpt.scheme.tag_name(t))
        .collect()
}

/// Evaluate a checkpoint over a tagged dataset: Viterbi decoding per
/// sentence, then [`entity_f1`] against the gold annotation.
pub fn evaluate_model(ckpt: &Checkpoint, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    if dataset.scheme.labels() != ckpt.scheme.labels() {
        return Err(Error::data(format!(
            "dataset labels {:?} do not match the checkpoint's {:?}",
            dataset.scheme.labels(),
            ckpt.scheme.labels()
        )));
    }
    let artifacts = ckpt.artifacts()?;
    let mut gold = Vec::with_capacity(dataset.sentences.len());
    let mut pred = Vec::with_capacity(dataset.sentences.len());
    for sentence in &dataset.sentences {
        let tags = sentence
            .gold_tags()
            .ok_or_else(|| Error::data("evaluation dataset has untagged sentences"))?;
        pred.push(predict_with_artifacts(ckpt, artifacts.as_ref(), sentence)?);
        gold.push(tags);
    }
    entity_f1(&gold, &pred, &ckpt.scheme)
}
