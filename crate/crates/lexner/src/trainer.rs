//! Mini-batch SGD with momentum: the training loop, the learning-rate
//! schedule, gradient clipping, and assembly of a fresh model from a
//! corpus and an optional lexicon.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::Dataset;
use crate::embeddings::{build_vocab, init_phrase_embeddings, CharVocab, EmbeddingTable, LmVocab};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::lexicon::{Lexicon, LexiconStats};
use crate::nn::{
    build_features, init_params, LexiconMode, ModelConfig, ModelParams, SentenceFeatures,
};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Initial learning rate η₀.
    pub eta0: f64,
    /// Decay ratio ρ of the schedule η₀ / (1 + ρ·t).
    pub rho: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Global-norm gradient clipping threshold.
    pub clip_threshold: f64,
    pub epochs: usize,
    /// Weight λ of the language-model loss in the joint objective.
    pub lm_weight: f64,
    pub seed: u64,
    pub lexicon_mode: LexiconMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 0.01,
            rho: 0.05,
            batch_size: 10,
            momentum: 0.9,
            clip_threshold: 5.0,
            epochs: 50,
            lm_weight: 1.0,
            seed: 1,
            lexicon_mode: LexiconMode::SoftLexicon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eta0", self.eta0),
            ("rho", self.rho),
            ("clip_threshold", self.clip_threshold),
            ("lm_weight", self.lm_weight),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {value}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Network shape and feature switches, before any data-derived sizes are
/// known. [`build_model`] combines these with a corpus into a full
/// [`ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub word_dim: usize,
    pub char_dim: usize,
    pub hidden: usize,
    pub highway_depth: usize,
    pub dropout: f64,
    pub phrase_dim: usize,
    pub lm_vocab_cap: usize,
    pub lexicon_mode: LexiconMode,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            word_dim: 100,
            char_dim: 30,
            hidden: 300,
            highway_depth: 1,
            dropout: 0.5,
            phrase_dim: 50,
            lm_vocab_cap: 5000,
            lexicon_mode: LexiconMode::SoftLexicon,
        }
    }
}

/// The learning-rate schedule: η₀ / (1 + ρ·t), with t counting epochs
/// from zero.
pub fn lr_at(t: usize, eta0: f64, rho: f64) -> f64 {
    eta0 / (1.0 + rho * t as f64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a context path
/// (stream id, epoch, step, …). Order-sensitive and deterministic.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &part in path {
        h = splitmix64(h ^ splitmix64(part));
    }
    h
}

// Stream ids so that each consumer of randomness gets an unrelated
// sequence from the one user-facing seed.
const STREAM_PARAM_INIT: u64 = 1;
const STREAM_WORD_INIT: u64 = 2;
const STREAM_PHRASE_INIT: u64 = 3;
const STREAM_BATCH: u64 = 4;
const STREAM_DROPOUT: u64 = 5;

/// Shuffle `0..count` with a generator seeded per (seed, epoch) and cut
/// the result into consecutive batches; the last may be shorter.
pub fn make_batches(count: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, &[STREAM_BATCH, epoch as u64]));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Momentum velocity buffers, one per parameter tensor in visitor order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    /// Completed epochs.
    pub t: usize,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            velocity: params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

fn zero_gradients(grads: &mut ModelParams) {
    for (_, tensor) in grads.tensors_mut() {
        tensor.fill(0.0);
    }
}

fn clip_tensors(tensors: &mut [(String, &mut [f64])], threshold: f64) -> Result<f64> {
    let mut squared = 0.0;
    for (name, tensor) in tensors.iter() {
        for &v in tensor.iter() {
            if !v.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient in {name}")));
            }
            squared += v * v;
        }
    }
    let norm = squared.sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for (_, tensor) in tensors.iter_mut() {
            for v in tensor.iter_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// Scale all gradients by threshold/norm when their global L2 norm
/// exceeds the threshold. Returns the pre-clip norm; non-finite entries
/// are an error.
pub fn clip_gradients(grads: &mut ModelParams, threshold: f64) -> Result<f64> {
    let mut tensors = grads.tensors_mut();
    clip_tensors(&mut tensors, threshold)
}

fn momentum_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// Classical momentum step: v ← momentum·v − lr·g, then p ← p + v.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) {
    let mut tensors = params.tensors_mut();
    let grad_tensors = grads.tensors();
    assert_eq!(tensors.len(), grad_tensors.len());
    assert_eq!(tensors.len(), state.velocity.len());
    for (((name, p), (gname, g)), v) in
        tensors.iter_mut().zip(grad_tensors.iter()).zip(state.velocity.iter_mut())
    {
        assert_eq!(name, gname, "parameter and gradient tensors must align");
        momentum_update(p, g, v, lr, momentum);
    }
}

/// One per-epoch metrics record. Dev metrics are percentages; they are
/// absent when training runs without a dev set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// (precision, recall, F1) on the dev set, if one was supplied.
    pub dev: Option<(f64, f64, f64)>,
    pub lr: f64,
}

/// Render per-epoch records as CSV:
/// `epoch,train_loss,dev_precision,dev_recall,dev_f1,lr`. Dev columns are
/// empty when no dev set was used.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,dev_precision,dev_recall,dev_f1,lr\n");
    for r in records {
        let dev = match r.dev {
            Some((p, rec, f1)) => format!("{p:.2},{rec:.2},{f1:.2}"),
            None => ",,".to_string(),
        };
        out.push_str(&format!("{},{:.6},{},{:.6}\n", r.epoch, r.train_loss, dev, r.lr));
    }
    out
}

/// The trained model plus its per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochRecord>,
}

/// Assemble an untrained model: vocabularies and embedding tables from
/// the training corpus (plus pretrained-covered words of the other
/// splits), lexicon artifacts frozen into the checkpoint, parameters
/// initialized deterministically from the seed.
pub fn build_model(
    train_set: &Dataset,
    extra_sets: &[&Dataset],
    pretrained: Option<&EmbeddingTable>,
    lexicon: Option<(Lexicon, LexiconStats)>,
    settings: &ModelSettings,
    seed: u64,
) -> Result<Checkpoint> {
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let lexicon = match (settings.lexicon_mode, lexicon) {
        (LexiconMode::None, None) => None,
        (LexiconMode::None, Some(_)) => {
            return Err(Error::config("lexicon_mode none does not take a lexicon"))
        }
        (mode, None) => {
            return Err(Error::config(format!("lexicon_mode {mode} requires a lexicon")))
        }
        (_, Some(pair)) => Some(pair),
    };
    if let Some((lex, stats)) = &lexicon {
        if lex.phrase_count() != stats.z.len() {
            return Err(Error::data(format!(
                "lexicon has {} phrases but statistics cover {}",
                lex.phrase_count(),
                stats.z.len()
            )));
        }
    }
    if let Some(table) = pretrained {
        if table.dim() != settings.word_dim {
            return Err(Error::config(format!(
                "pretrained embeddings have dimension {} but word_dim is {}",
                table.dim(),
                settings.word_dim
            )));
        }
    }

    let fresh;
    let base_table = match pretrained {
        Some(table) => table,
        None => {
            fresh = EmbeddingTable::new(settings.word_dim);
            &fresh
        }
    };
    let (vocab, word_table) =
        build_vocab(train_set, extra_sets, base_table, derive_seed(seed, &[STREAM_WORD_INIT]))?;
    let chars = CharVocab::build(train_set);
    let lm = LmVocab::build(train_set, settings.lm_vocab_cap);
    let phrase_table = match (&lexicon, settings.lexicon_mode) {
        (Some((lex, _)), LexiconMode::SoftLexicon) => Some(init_phrase_embeddings(
            lex,
            &word_table,
            settings.phrase_dim,
            derive_seed(seed, &[STREAM_PHRASE_INIT]),
        )?),
        _ => None,
    };

    let config = ModelConfig {
        word_dim: settings.word_dim,
        char_dim: settings.char_dim,
        hidden: settings.hidden,
        highway_depth: settings.highway_depth,
        dropout: settings.dropout,
        phrase_dim: settings.phrase_dim,
        lexicon_mode: settings.lexicon_mode,
        lm_vocab_cap: settings.lm_vocab_cap,
        tag_count: train_set.scheme.tag_count(),
        word_vocab: vocab.len(),
        char_vocab: chars.len(),
        phrase_rows: phrase_table.as_ref().map_or(0, EmbeddingTable::len),
        lm_classes: lm.class_count(),
    };
    let mut params = init_params(&config, derive_seed(seed, &[STREAM_PARAM_INIT]))?;
    params.word_emb = word_table.matrix;
    if let Some(table) = phrase_table {
        params.phrase_emb = Some(table.matrix);
    }

    Ok(Checkpoint {
        config,
        scheme: train_set.scheme.clone(),
        vocab,
        chars,
        lm,
        lexicon: lexicon.map(|(lex, stats)| (lex.phrase_texts(), stats)),
        params,
        best_dev_f1: 0.0,
        epoch: 0,
    })
}

/// Run the optimization loop over an initialized model.
///
/// Per epoch: one pass over seeded shuffled batches, each accumulating
/// the gradient of the batch-mean joint loss (CRF negative log-likelihood
/// plus λ times the language-model loss), clipped and applied with
/// momentum at the epoch's scheduled learning rate. With a dev set, the
/// parameters from the best dev-F1 epoch are kept; otherwise the final
/// epoch's.
pub fn train(
    init: Checkpoint,
    train_set: &Dataset,
    dev_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if train_set.scheme.labels() != init.scheme.labels() {
        return Err(Error::data(format!(
            "training labels {:?} do not match the model's {:?}",
            train_set.scheme.labels(),
            init.scheme.labels()
        )));
    }
    if init.config.lexicon_mode != cfg.lexicon_mode {
        return Err(Error::config(format!(
            "model was built for lexicon_mode {} but training asked for {}",
            init.config.lexicon_mode, cfg.lexicon_mode
        )));
    }
    if let Some(dev) = dev_set {
        if dev.is_empty() {
            return Err(Error::data("dev set is empty"));
        }
        if dev.scheme.labels() != init.scheme.labels() {
            return Err(Error::data("dev set labels do not match the model's"));
        }
    }
    for (i, sentence) in train_set.sentences.iter().enumerate() {
        if sentence.gold_tags().is_none() {
            return Err(Error::data(format!("training sentence {i} has no gold tags")));
        }
    }

    let artifacts = init.artifacts()?;
    let features: Vec<SentenceFeatures> = train_set
        .sentences
        .iter()
        .map(|sentence| {
            build_features(
                sentence,
                &init.scheme,
                &init.vocab,
                &init.chars,
                &init.lm,
                init.config.lexicon_mode,
                artifacts.as_ref(),
            )
        })
        .collect::<Result<_>>()?;

    let mut ckpt = init;
    let mut grads = ckpt.params.zeros_like();
    let mut state = OptimizerState::new(&ckpt.params);
    let mut best: Option<(f64, ModelParams, usize)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg.eta0, cfg.rho);
        let batches = make_batches(features.len(), cfg.batch_size, cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        let mut step: u64 = 0;
        for (b, batch) in batches.iter().enumerate() {
            zero_gradients(&mut grads);
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let dropout_seed =
                    derive_seed(cfg.seed, &[STREAM_DROPOUT, epoch as u64, step]);
                let breakdown = sentence_loss_checked(
                    &features[idx],
                    &ckpt,
                    cfg,
                    dropout_seed,
                    scale,
                    &mut grads,
                    epoch,
                    b,
                )?;
                epoch_loss += breakdown;
                step += 1;
            }
            clip_gradients(&mut grads, cfg.clip_threshold)
                .map_err(|e| Error::numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            sgd_momentum_step(&mut ckpt.params, &grads, &mut state, lr, cfg.momentum);
        }
        state.t = epoch + 1;

        let train_loss = epoch_loss / features.len() as f64;
        let dev = match dev_set {
            Some(dev) => {
                let report = evaluate_model(&ckpt, dev)?;
                let (p, r, f1) = report.overall();
                if best.as_ref().map_or(true, |&(best_f1, _, _)| f1 > best_f1) {
                    best = Some((f1, ckpt.params.clone(), epoch));
                }
                Some((p, r, f1))
            }
            None => None,
        };
        metrics.push(EpochRecord { epoch, train_loss, dev, lr });
    }

    match best {
        Some((f1, params, epoch)) => {
            ckpt.params = params;
            ckpt.best_dev_f1 = f1;
            ckpt.epoch = epoch;
        }
        None => {
            ckpt.best_dev_f1 = 0.0;
            ckpt.epoch = cfg.epochs.saturating_sub(1);
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, metrics })
}

#[allow(clippy::too_many_arguments)]
fn sentence_loss_checked(
    features: &SentenceFeatures,
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    dropout_seed: u64,
    scale: f64,
    grads: &mut ModelParams,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    let breakdown = crate::nn::sentence_loss_and_grads(
        features,
        &ckpt.params,
        &ckpt.config,
        true,
        dropout_seed,
        cfg.lm_weight,
        scale,
        grads,
    )?;
    let joint = breakdown.joint(cfg.lm_weight);
    if !joint.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss ({joint}) at epoch {epoch}, batch {batch}"
        )));
    }
    Ok(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Cursor;

    use crate::corpus::{read_conll, TagScheme};
    use crate::lexicon::build_stats;

    fn scheme() -> TagScheme {
        TagScheme::new(["PER", "LOC"]).unwrap()
    }

    fn toy_dataset() -> Dataset {
        let text = "\
alice B-PER
visits O
paris B-LOC
. O

bob B-PER
visits O
rome B-LOC
. O

alice B-PER
likes O
rome B-LOC
. O

carol B-PER
visits O
paris B-LOC
. O

the O
mayor O
visits O
bob B-PER

rome B-LOC
hosts O
carol B-PER
";
        read_conll(Cursor::new(text), &scheme()).unwrap()
    }

    fn small_settings(mode: LexiconMode) -> ModelSettings {
        ModelSettings {
            word_dim: 8,
            char_dim: 4,
            hidden: 8,
            highway_depth: 1,
            dropout: 0.0,
            phrase_dim: 4,
            lm_vocab_cap: 16,
            lexicon_mode: mode,
        }
    }

    fn small_train(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            eta0: 0.05,
            rho: 0.05,
            batch_size: 3,
            momentum: 0.9,
            clip_threshold: 5.0,
            epochs,
            lm_weight: 1.0,
            seed,
            lexicon_mode: LexiconMode::None,
        }
    }

    #[test]
    fn lr_schedule_matches_closed_forms() {
        assert_eq!(lr_at(0, 0.015, 0.05), 0.015);
        assert_eq!(lr_at(20, 0.015, 0.05), 0.015 / 2.0);
        assert_eq!(lr_at(100, 0.01, 0.05), 0.01 / 6.0);
        let mut last = f64::INFINITY;
        for t in 0..50 {
            let lr = lr_at(t, 0.01, 0.05);
            assert!(lr < last);
            last = lr;
        }
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut a = vec![1.0, 2.0, 2.0];
        let mut tensors = vec![("a".to_string(), a.as_mut_slice())];
        let norm = clip_tensors(&mut tensors, 5.0).unwrap();
        assert_eq!(norm, 3.0);
        assert_eq!(a, vec![1.0, 2.0, 2.0]);
    }

    #[test]
    fn clip_halves_a_norm_ten_gradient() {
        // Two tensors, global norm 10: components 8 and 6.
        let mut a = vec![8.0];
        let mut b = vec![0.0, 6.0];
        {
            let mut tensors =
                vec![("a".to_string(), a.as_mut_slice()), ("b".to_string(), b.as_mut_slice())];
            let norm = clip_tensors(&mut tensors, 5.0).unwrap();
            assert!((norm - 10.0).abs() < 1e-12);
        }
        assert!((a[0] - 4.0).abs() < 1e-12);
        assert!((b[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn post_clip_norm_is_min_of_norm_and_threshold() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..50 {
            use rand::Rng;
            let mut a: Vec<f64> = (0..17).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut b: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let pre: f64 =
                a.iter().chain(b.iter()).map(|v| v * v).sum::<f64>().sqrt();
            let mut tensors =
                vec![("a".to_string(), a.as_mut_slice()), ("b".to_string(), b.as_mut_slice())];
            let reported = clip_tensors(&mut tensors, 5.0).unwrap();
            assert!((reported - pre).abs() < 1e-9);
            let post: f64 =
                a.iter().chain(b.iter()).map(|v| v * v).sum::<f64>().sqrt();
            assert!((post - pre.min(5.0)).abs() < 1e-9);
            assert!(post <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn clip_rejects_non_finite_gradients() {
        let mut a = vec![1.0, f64::NAN];
        let mut tensors = vec![("bad".to_string(), a.as_mut_slice())];
        let err = clip_tensors(&mut tensors, 5.0).unwrap_err();
        assert!(err.to_string().contains("bad"));
    }

    #[test]
    fn momentum_first_step_closed_form() {
        let mut p = vec![1.0];
        let g = vec![1.0];
        let mut v = vec![0.0];
        momentum_update(&mut p, &g, &mut v, 0.1, 0.9);
        assert!((p[0] - 0.9).abs() < 1e-15);
        assert!((v[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut p = vec![2.0, -1.0];
        let g = vec![0.5, -0.25];
        let mut v = vec![0.3, 0.3]; // stale velocity must be ignored
        momentum_update(&mut p, &g, &mut v, 0.2, 0.0);
        assert!((p[0] - (2.0 - 0.2 * 0.5)).abs() < 1e-15);
        assert!((p[1] - (-1.0 + 0.2 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn momentum_drift_follows_geometric_series() {
        // One real step establishes v0, then zero gradients let the
        // velocity decay geometrically: total extra drift v0·m/(1−m).
        let m = 0.9;
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        momentum_update(&mut p, &[1.0], &mut v, 0.1, m);
        let v0 = v[0];
        let start = p[0];
        for _ in 0..2000 {
            momentum_update(&mut p, &[0.0], &mut v, 0.1, m);
        }
        let drift = p[0] - start;
        let limit = v0 * m / (1.0 - m);
        assert!((drift - limit).abs() < 1e-12, "drift {drift} vs limit {limit}");
    }

    #[test]
    fn batches_partition_the_dataset() {
        let batches = make_batches(25, 10, 3, 0);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![10, 10, 5]);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..25).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_deterministic_per_seed_and_epoch() {
        assert_eq!(make_batches(30, 7, 11, 4), make_batches(30, 7, 11, 4));
        assert_ne!(make_batches(30, 7, 11, 4), make_batches(30, 7, 11, 5));
        assert_ne!(make_batches(30, 7, 11, 4), make_batches(30, 7, 12, 4));
    }

    #[test]
    fn derived_seeds_separate_streams() {
        let mut seen = HashSet::new();
        for stream in 0..6u64 {
            for epoch in 0..4u64 {
                assert!(seen.insert(derive_seed(9, &[stream, epoch])));
            }
        }
        assert_eq!(derive_seed(9, &[1, 2]), derive_seed(9, &[1, 2]));
        assert_ne!(derive_seed(9, &[1, 2]), derive_seed(9, &[2, 1]));
    }

    #[test]
    fn zero_epochs_returns_the_initialized_model() {
        let data = toy_dataset();
        let built = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::None),
            17,
        )
        .unwrap();
        let reference = built.clone();
        let outcome = train(built, &data, None, &small_train(0, 17)).unwrap();
        assert!(outcome.metrics.is_empty());
        assert_eq!(outcome.checkpoint.epoch, 0);
        for ((na, a), (nb, b)) in outcome
            .checkpoint
            .params
            .tensors()
            .iter()
            .zip(reference.params.tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let data = toy_dataset();
        let run = || {
            let built = build_model(
                &data,
                &[],
                None,
                None,
                &small_settings(LexiconMode::None),
                23,
            )
            .unwrap();
            train(built, &data, Some(&data), &small_train(3, 23)).unwrap()
        };
        let first = run();
        let second = run();
        assert_eq!(first.metrics, second.metrics);
        for ((na, a), (nb, b)) in first
            .checkpoint
            .params
            .tensors()
            .iter()
            .zip(second.checkpoint.params.tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(a, b, "tensor {na} differs between runs");
        }
    }

    #[test]
    fn overfits_the_toy_corpus() {
        let data = toy_dataset();
        let built = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::None),
            5,
        )
        .unwrap();
        let mut cfg = small_train(80, 5);
        cfg.eta0 = 0.1;
        let outcome = train(built, &data, Some(&data), &cfg).unwrap();
        assert_eq!(
            outcome.checkpoint.best_dev_f1, 100.0,
            "toy corpus should be memorized; best was {:.2} at epoch {}",
            outcome.checkpoint.best_dev_f1, outcome.checkpoint.epoch
        );
        // Loss should broadly decrease from start to finish.
        let first = outcome.metrics.first().unwrap().train_loss;
        let last = outcome.metrics.last().unwrap().train_loss;
        assert!(last < first);
    }

    #[test]
    fn trains_with_a_lexicon_end_to_end() {
        let data = toy_dataset();
        let lexicon = Lexicon::from_phrases(["alice", "bob", "carol", "paris", "rome"]).unwrap();
        let stats = build_stats(&data.sentences, &lexicon).unwrap();
        let built = build_model(
            &data,
            &[],
            None,
            Some((lexicon, stats)),
            &small_settings(LexiconMode::SoftLexicon),
            7,
        )
        .unwrap();
        let mut cfg = small_train(2, 7);
        cfg.lexicon_mode = LexiconMode::SoftLexicon;
        let outcome = train(built, &data, Some(&data), &cfg).unwrap();
        assert_eq!(outcome.metrics.len(), 2);
        assert!(outcome.checkpoint.lexicon.is_some());
    }

    #[test]
    fn mode_mismatch_between_model_and_config_errors() {
        let data = toy_dataset();
        let built = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::None),
            3,
        )
        .unwrap();
        let mut cfg = small_train(1, 3);
        cfg.lexicon_mode = LexiconMode::ExSoftword;
        let err = train(built, &data, None, &cfg).unwrap_err();
        assert!(err.to_string().contains("lexicon_mode"));
    }

    #[test]
    fn missing_lexicon_for_lexicon_mode_errors() {
        let data = toy_dataset();
        let err = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::SoftLexicon),
            3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("requires a lexicon"));
    }

    #[test]
    fn poisoned_parameters_halt_with_the_batch_named() {
        let data = toy_dataset();
        let mut built = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::None),
            3,
        )
        .unwrap();
        built.params.word_emb[[2, 0]] = f64::NAN;
        let err = train(built, &data, None, &small_train(1, 3)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("batch"), "unexpected error: {text}");
    }

    #[test]
    fn metrics_csv_shapes() {
        let records = vec![
            EpochRecord { epoch: 0, train_loss: 2.5, dev: Some((50.0, 25.0, 100.0 / 3.0)), lr: 0.01 },
            EpochRecord { epoch: 1, train_loss: 1.25, dev: None, lr: 0.0095 },
        ];
        let csv = metrics_csv(&records);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,train_loss,dev_precision,dev_recall,dev_f1,lr");
        assert_eq!(lines[1], "0,2.500000,50.00,25.00,33.33,0.010000");
        assert_eq!(lines[2], "1,1.250000,,,,0.009500");
    }

    #[test]
    fn best_epoch_parameters_are_retained() {
        // With dev = train, the stored best F1 must equal a fresh
        // evaluation of the returned parameters.
        let data = toy_dataset();
        let built = build_model(
            &data,
            &[],
            None,
            None,
            &small_settings(LexiconMode::None),
            11,
        )
        .unwrap();
        let outcome = train(built, &data, Some(&data), &small_train(4, 11)).unwrap();
        let again = evaluate_model(&outcome.checkpoint, &data).unwrap();
        assert_eq!(again.overall().2, outcome.checkpoint.best_dev_f1);
        let best_in_log = outcome
            .metrics
            .iter()
            .filter_map(|r| r.dev.map(|(_, _, f1)| f1))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_in_log, outcome.checkpoint.best_dev_f1);
    }
}
