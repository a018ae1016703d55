//! Command-line surface: `train`, `tag`, `eval`, `lexicon-stats`, and
//! `learning-curve`, all driven by one `key = value` config file with
//! `--key value` overrides applied last.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{read_conll, tokenize_raw, write_conll, Dataset, Sentence, TagScheme, Token};
use crate::embeddings::{load_pretrained, EmbeddingTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, predict_with_artifacts};
use crate::lexicon::{build_stats, load_lexicon, stats_report, Lexicon};
use crate::nn::LexiconMode;
use crate::trainer::{
    build_model, derive_seed, metrics_csv, train, ModelSettings, TrainConfig,
};

pub const USAGE: &str = "\
usage: lexner <subcommand> [--config FILE] [--key value]...

subcommands:
  train           train a model: needs labels, train_path; writes checkpoint_path
  tag             tag raw text or CoNLL input with a trained checkpoint
  eval            score a checkpoint against a tagged corpus
  lexicon-stats   report lexicon coverage statistics over a corpus
  learning-curve  train on growing prefixes and tabulate test F1 per size

All settings come from the config file (`key = value`, `#` comments);
any --key value pair overrides the file. See README for the key list.";

/// How `tag` should interpret its input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputFormat {
    /// One sentence per line, whitespace tokens, punctuation split off.
    Raw,
    /// CoNLL column format (existing tags, if any, are ignored).
    Conll,
}

/// Every knob of every subcommand, resolved from defaults, the config
/// file, and command-line overrides (in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    /// Entity labels, e.g. `PER,ORG`. Required to train.
    pub labels: Vec<String>,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub lexicon_path: Option<PathBuf>,
    pub pretrained_path: Option<PathBuf>,
    pub checkpoint_path: PathBuf,
    /// Per-epoch training metrics CSV (optional).
    pub metrics_path: Option<PathBuf>,
    /// Per-label evaluation report CSV (optional).
    pub report_path: Option<PathBuf>,
    /// Input for `tag`; stdin when unset.
    pub input_path: Option<PathBuf>,
    /// Output for `tag`/`lexicon-stats`/`learning-curve`; stdout when unset.
    pub output_path: Option<PathBuf>,
    pub input_format: InputFormat,
    pub curve_sizes: Vec<usize>,
    pub settings: ModelSettings,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            labels: Vec::new(),
            train_path: None,
            dev_path: None,
            test_path: None,
            lexicon_path: None,
            pretrained_path: None,
            checkpoint_path: PathBuf::from("model.ckpt"),
            metrics_path: None,
            report_path: None,
            input_path: None,
            output_path: None,
            input_format: InputFormat::Raw,
            curve_sizes: Vec::new(),
            settings: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_usize(key: &str, value: &str, min: usize) -> Result<usize> {
    let n: usize = value
        .parse()
        .map_err(|_| Error::config(format!("{key} must be an integer, got {value:?}")))?;
    if n < min {
        return Err(Error::config(format!("{key} must be at least {min}, got {n}")));
    }
    Ok(n)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key} must be a number, got {value:?}")))
}

fn parse_positive(key: &str, value: &str) -> Result<f64> {
    let v = parse_f64(key, value)?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::config(format!("{key} must be positive, got {value}")));
    }
    Ok(v)
}

fn parse_unit_interval(key: &str, value: &str) -> Result<f64> {
    let v = parse_f64(key, value)?;
    if !(0.0..1.0).contains(&v) {
        return Err(Error::config(format!("{key} must be in [0, 1), got {value}")));
    }
    Ok(v)
}

impl AppConfig {
    /// Set one key. Unknown keys and out-of-range values are errors that
    /// name the key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "labels" => {
                self.labels = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect();
                if self.labels.is_empty() {
                    return Err(Error::config("labels must name at least one label"));
                }
            }
            "train_path" => self.train_path = Some(PathBuf::from(value)),
            "dev_path" => self.dev_path = Some(PathBuf::from(value)),
            "test_path" => self.test_path = Some(PathBuf::from(value)),
            "lexicon_path" => self.lexicon_path = Some(PathBuf::from(value)),
            "pretrained_path" => self.pretrained_path = Some(PathBuf::from(value)),
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(value),
            "metrics_path" => self.metrics_path = Some(PathBuf::from(value)),
            "report_path" => self.report_path = Some(PathBuf::from(value)),
            "input_path" => self.input_path = Some(PathBuf::from(value)),
            "output_path" => self.output_path = Some(PathBuf::from(value)),
            "input_format" => {
                self.input_format = match value {
                    "raw" => InputFormat::Raw,
                    "conll" => InputFormat::Conll,
                    other => {
                        return Err(Error::config(format!(
                            "input_format must be raw or conll, got {other:?}"
                        )))
                    }
                }
            }
            "lexicon_mode" => {
                let mode: LexiconMode = value.parse()?;
                self.settings.lexicon_mode = mode;
                self.train.lexicon_mode = mode;
            }
            "word_dim" => self.settings.word_dim = parse_usize(key, value, 1)?,
            "char_dim" => self.settings.char_dim = parse_usize(key, value, 1)?,
            "hidden" => self.settings.hidden = parse_usize(key, value, 1)?,
            "highway_depth" => self.settings.highway_depth = parse_usize(key, value, 1)?,
            "dropout" => self.settings.dropout = parse_unit_interval(key, value)?,
            "phrase_dim" => self.settings.phrase_dim = parse_usize(key, value, 1)?,
            "lm_vocab_cap" => self.settings.lm_vocab_cap = parse_usize(key, value, 1)?,
            "eta0" => self.train.eta0 = parse_positive(key, value)?,
            "rho" => self.train.rho = parse_positive(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value, 1)?,
            "momentum" => self.train.momentum = parse_unit_interval(key, value)?,
            "clip_threshold" => self.train.clip_threshold = parse_positive(key, value)?,
            "epochs" => self.train.epochs = parse_usize(key, value, 0)?,
            "lm_weight" => self.train.lm_weight = parse_positive(key, value)?,
            "seed" => {
                self.train.seed = value
                    .parse()
                    .map_err(|_| Error::config(format!("seed must be a u64, got {value:?}")))?
            }
            "curve_sizes" => {
                let mut sizes = Vec::new();
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    sizes.push(parse_usize(key, part, 1)?);
                }
                self.curve_sizes = sizes;
            }
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The fully resolved configuration as `key = value` lines, for the
    /// log.
    pub fn render(&self) -> String {
        fn path(out: &mut String, key: &str, value: &Option<PathBuf>) {
            if let Some(p) = value {
                out.push_str(&format!("{key} = {}\n", p.display()));
            }
        }
        let mut out = String::new();
        if !self.labels.is_empty() {
            out.push_str(&format!("labels = {}\n", self.labels.join(",")));
        }
        path(&mut out, "train_path", &self.train_path);
        path(&mut out, "dev_path", &self.dev_path);
        path(&mut out, "test_path", &self.test_path);
        path(&mut out, "lexicon_path", &self.lexicon_path);
        path(&mut out, "pretrained_path", &self.pretrained_path);
        out.push_str(&format!("checkpoint_path = {}\n", self.checkpoint_path.display()));
        path(&mut out, "metrics_path", &self.metrics_path);
        path(&mut out, "report_path", &self.report_path);
        path(&mut out, "input_path", &self.input_path);
        path(&mut out, "output_path", &self.output_path);
        out.push_str(&format!(
            "input_format = {}\n",
            match self.input_format {
                InputFormat::Raw => "raw",
                InputFormat::Conll => "conll",
            }
        ));
        if !self.curve_sizes.is_empty() {
            let sizes: Vec<String> = self.curve_sizes.iter().map(usize::to_string).collect();
            out.push_str(&format!("curve_sizes = {}\n", sizes.join(",")));
        }
        let s = &self.settings;
        out.push_str(&format!("lexicon_mode = {}\n", s.lexicon_mode));
        out.push_str(&format!("word_dim = {}\n", s.word_dim));
        out.push_str(&format!("char_dim = {}\n", s.char_dim));
        out.push_str(&format!("hidden = {}\n", s.hidden));
        out.push_str(&format!("highway_depth = {}\n", s.highway_depth));
        out.push_str(&format!("dropout = {}\n", s.dropout));
        out.push_str(&format!("phrase_dim = {}\n", s.phrase_dim));
        out.push_str(&format!("lm_vocab_cap = {}\n", s.lm_vocab_cap));
        let t = &self.train;
        out.push_str(&format!("eta0 = {}\n", t.eta0));
        out.push_str(&format!("rho = {}\n", t.rho));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("momentum = {}\n", t.momentum));
        out.push_str(&format!("clip_threshold = {}\n", t.clip_threshold));
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("lm_weight = {}\n", t.lm_weight));
        out.push_str(&format!("seed = {}\n", t.seed));
        out
    }
}

/// Parse a config file: `key = value` lines, `#` comments, blank lines
/// ignored, unknown keys rejected.
pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = AppConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("config line {}: expected key = value", idx + 1))
        })?;
        config.apply(key.trim(), value.trim()).map_err(|e| {
            Error::config(format!("config line {}: {e}", idx + 1))
        })?;
    }
    Ok(config)
}

/// Dispatch a full command line (without the program name).
pub fn run<I: IntoIterator<Item = String>>(args: I) -> Result<()> {
    let args: Vec<String> = args.into_iter().collect();
    let Some(subcommand) = args.first() else {
        return Err(Error::config(format!("missing subcommand\n{USAGE}")));
    };
    if subcommand == "--help" || subcommand == "help" {
        println!("{USAGE}");
        return Ok(());
    }

    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut i = 1;
    while i < args.len() {
        let flag = &args[i];
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected --key value, got {flag:?}")))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| Error::config(format!("--{key} needs a value")))?;
        pairs.push((key.to_string(), value.clone()));
        i += 2;
    }

    let mut config = AppConfig::default();
    for (key, value) in &pairs {
        if key == "config" {
            config = load_config(Path::new(value))?;
        }
    }
    for (key, value) in &pairs {
        if key != "config" {
            config.apply(key, value)?;
        }
    }

    match subcommand.as_str() {
        "train" => cmd_train(&config),
        "tag" => cmd_tag(&config),
        "eval" => cmd_eval(&config),
        "lexicon-stats" => cmd_lexicon_stats(&config),
        "learning-curve" => cmd_learning_curve(&config),
        other => Err(Error::config(format!(
            "unknown subcommand {other:?} (expected train, tag, eval, lexicon-stats, or learning-curve)"
        ))),
    }
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::config(format!("{key} is required for this command")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))
}

fn read_dataset(path: &Path, scheme: &TagScheme) -> Result<Dataset> {
    read_conll(open(path)?, scheme)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn scheme_from(labels: &[String]) -> Result<TagScheme> {
    if labels.is_empty() {
        return Err(Error::config("labels is required (comma-separated, e.g. PER,ORG)"));
    }
    TagScheme::new(labels.iter().cloned())
}

fn load_lexicon_pair(
    config: &AppConfig,
    statistics_corpus: &Dataset,
) -> Result<Option<(Lexicon, crate::lexicon::LexiconStats)>> {
    if config.settings.lexicon_mode == LexiconMode::None {
        return Ok(None);
    }
    let path = require(&config.lexicon_path, "lexicon_path")?;
    let lexicon = load_lexicon(open(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let stats = build_stats(&statistics_corpus.sentences, &lexicon)?;
    Ok(Some((lexicon, stats)))
}

fn load_pretrained_table(config: &AppConfig) -> Result<Option<EmbeddingTable>> {
    match &config.pretrained_path {
        None => Ok(None),
        Some(path) => {
            let table = load_pretrained(open(path)?, config.settings.word_dim)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            Ok(Some(table))
        }
    }
}

fn cmd_train(config: &AppConfig) -> Result<()> {
    let scheme = scheme_from(&config.labels)?;
    let train_path = require(&config.train_path, "train_path")?;
    eprint!("{}", config.render());

    let train_set = read_dataset(train_path, &scheme)?;
    let dev_set = match &config.dev_path {
        Some(p) => Some(read_dataset(p, &scheme)?),
        None => None,
    };
    let test_set = match &config.test_path {
        Some(p) => Some(read_dataset(p, &scheme)?),
        None => None,
    };
    let mut extra: Vec<&Dataset> = Vec::new();
    extra.extend(dev_set.as_ref());
    extra.extend(test_set.as_ref());

    let pretrained = load_pretrained_table(config)?;
    let lexicon_pair = load_lexicon_pair(config, &train_set)?;

    let built = build_model(
        &train_set,
        &extra,
        pretrained.as_ref(),
        lexicon_pair,
        &config.settings,
        config.train.seed,
    )?;
    let outcome = train(built, &train_set, dev_set.as_ref(), &config.train)?;

    for record in &outcome.metrics {
        match record.dev {
            Some((p, r, f1)) => eprintln!(
                "epoch {}: train_loss {:.6}, dev P {:.2} R {:.2} F1 {:.2}, lr {:.6}",
                record.epoch, record.train_loss, p, r, f1, record.lr
            ),
            None => eprintln!(
                "epoch {}: train_loss {:.6}, lr {:.6}",
                record.epoch, record.train_loss, record.lr
            ),
        }
    }

    outcome.checkpoint.save(&config.checkpoint_path)?;
    if let Some(path) = &config.metrics_path {
        let mut out = create(path)?;
        out.write_all(metrics_csv(&outcome.metrics).as_bytes())?;
        out.flush()?;
    }
    if dev_set.is_some() {
        println!(
            "checkpoint {} (best dev F1 {:.2} at epoch {})",
            config.checkpoint_path.display(),
            outcome.checkpoint.best_dev_f1,
            outcome.checkpoint.epoch
        );
    } else {
        println!(
            "checkpoint {} (final epoch {})",
            config.checkpoint_path.display(),
            outcome.checkpoint.epoch
        );
    }
    Ok(())
}

fn cmd_eval(config: &AppConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&config.checkpoint_path)?;
    let test_path = require(&config.test_path, "test_path")?;
    let data = read_dataset(test_path, &ckpt.scheme)?;
    let report = evaluate_model(&ckpt, &data)?;
    print!("{}", report.text_table());
    if let Some(path) = &config.report_path {
        let mut out = create(path)?;
        out.write_all(report.csv().as_bytes())?;
        out.flush()?;
    }
    Ok(())
}

fn write_tagged<W: Write>(
    sentences: Vec<(Sentence, Vec<String>)>,
    scheme: &TagScheme,
    writer: W,
) -> Result<()> {
    let tagged: Vec<Sentence> = sentences
        .into_iter()
        .map(|(sentence, tags)| {
            Sentence::new(
                sentence
                    .tokens
                    .into_iter()
                    .zip(tags)
                    .map(|(token, tag)| Token { surface: token.surface, gold_tag: Some(tag) })
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let dataset = Dataset::new(tagged, scheme.clone())?;
    write_conll(&dataset, writer)
}

fn cmd_tag(config: &AppConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&config.checkpoint_path)?;
    let artifacts = ckpt.artifacts()?;

    let sentences: Vec<Sentence> = match (&config.input_path, config.input_format) {
        (Some(path), InputFormat::Conll) => {
            read_dataset(path, &ckpt.scheme)?.sentences
        }
        (None, InputFormat::Conll) => {
            read_conll(io::stdin().lock(), &ckpt.scheme)?.sentences
        }
        (Some(path), InputFormat::Raw) => raw_sentences(open(path)?)?,
        (None, InputFormat::Raw) => raw_sentences(io::stdin().lock())?,
    };

    let mut tagged = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        let tags = predict_with_artifacts(&ckpt, artifacts.as_ref(), &sentence)?;
        tagged.push((sentence, tags));
    }

    match &config.output_path {
        Some(path) => write_tagged(tagged, &ckpt.scheme, create(path)?)?,
        None => write_tagged(tagged, &ckpt.scheme, io::stdout().lock())?,
    }
    Ok(())
}

fn raw_sentences<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence = tokenize_raw(&line)
            .map_err(|e| Error::data(format!("input line {}: {e}", idx + 1)))?;
        sentences.push(sentence);
    }
    Ok(sentences)
}

fn cmd_lexicon_stats(config: &AppConfig) -> Result<()> {
    let lexicon_path = require(&config.lexicon_path, "lexicon_path")?;
    let lexicon = load_lexicon(open(lexicon_path)?)
        .map_err(|e| Error::data(format!("{}: {e}", lexicon_path.display())))?;
    let train_path = require(&config.train_path, "train_path")?;
    // Tags are irrelevant to the statistics; a placeholder scheme lets an
    // untagged corpus through, while a tagged corpus needs `labels` set.
    let scheme = if config.labels.is_empty() {
        TagScheme::new(["MISC"])?
    } else {
        scheme_from(&config.labels)?
    };
    let corpus = read_dataset(train_path, &scheme)?;
    let stats = build_stats(&corpus.sentences, &lexicon)?;
    let report = stats_report(&lexicon, &stats, 20);
    match &config.output_path {
        Some(path) => {
            let mut out = create(path)?;
            out.write_all(report.as_bytes())?;
            out.flush()?;
        }
        None => print!("{report}"),
    }
    Ok(())
}

const STREAM_CURVE: u64 = 6;

fn cmd_learning_curve(config: &AppConfig) -> Result<()> {
    let scheme = scheme_from(&config.labels)?;
    let train_path = require(&config.train_path, "train_path")?;
    let test_path = require(&config.test_path, "test_path")?;
    let train_set = read_dataset(train_path, &scheme)?;
    let test_set = read_dataset(test_path, &scheme)?;
    for window in config.curve_sizes.windows(2) {
        if window[0] >= window[1] {
            return Err(Error::config(format!(
                "curve_sizes must be strictly ascending, got {} before {}",
                window[0], window[1]
            )));
        }
    }
    if let Some(&largest) = config.curve_sizes.last() {
        if largest > train_set.len() {
            return Err(Error::config(format!(
                "curve size {largest} exceeds the {}-sentence training set",
                train_set.len()
            )));
        }
    }
    let pretrained = load_pretrained_table(config)?;

    // One fixed shuffle; every size trains on a prefix of it.
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng =
        ChaCha20Rng::seed_from_u64(derive_seed(config.train.seed, &[STREAM_CURVE]));
    order.shuffle(&mut rng);

    let mut csv = format!("size,{},overall_f1\n", config.labels.join(","));
    for &size in &config.curve_sizes {
        let sentences: Vec<Sentence> =
            order[..size].iter().map(|&i| train_set.sentences[i].clone()).collect();
        let prefix = Dataset::new(sentences, scheme.clone())?;
        let lexicon_pair = load_lexicon_pair(config, &prefix)?;
        let built = build_model(
            &prefix,
            &[],
            pretrained.as_ref(),
            lexicon_pair,
            &config.settings,
            config.train.seed,
        )?;
        let outcome = train(built, &prefix, None, &config.train)?;
        let report = evaluate_model(&outcome.checkpoint, &test_set)?;
        let mut row = size.to_string();
        for label in &config.labels {
            let f1 = report.label_f1(label).unwrap_or(0.0);
            row.push_str(&format!(",{f1:.2}"));
        }
        row.push_str(&format!(",{:.2}\n", report.overall_f1()));
        eprint!("{row}");
        csv.push_str(&row);
    }

    match &config.output_path {
        Some(path) => {
            let mut out = create(path)?;
            out.write_all(csv.as_bytes())?;
            out.flush()?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}
