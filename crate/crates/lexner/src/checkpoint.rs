//! Versioned, self-describing binary checkpoints.
//!
//! Layout: 4-byte magic `LXNR`, format version (u32 LE), a length-prefixed
//! JSON header (u64 LE byte count) carrying the config, vocabularies,
//! lexicon digest, and a tensor index, then every tensor's data as
//! little-endian 64-bit floats in the documented parameter order. A file
//! is loadable with no context beyond this format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TagScheme;
use crate::embeddings::{CharVocab, LmVocab, Vocab};
use crate::error::{Error, Result};
use crate::lexicon::{Lexicon, LexiconStats};
use crate::nn::{LexiconArtifacts, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"LXNR";
pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to run it on new text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub scheme: TagScheme,
    pub vocab: Vocab,
    pub chars: CharVocab,
    pub lm: LmVocab,
    /// The training-time lexicon and its frozen statistics; tag-time
    /// features reuse these rather than recounting.
    pub lexicon: Option<(Vec<String>, LexiconStats)>,
    pub params: ModelParams,
    pub best_dev_f1: f64,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct LexiconDigest {
    phrases: Vec<String>,
    z: Vec<u64>,
    c: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    labels: Vec<String>,
    words: Vec<String>,
    chars: Vec<char>,
    lm_words: Vec<String>,
    lexicon: Option<LexiconDigest>,
    best_dev_f1: f64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Rebuild the matching trie from the stored digest.
    pub fn artifacts(&self) -> Result<Option<LexiconArtifacts>> {
        match &self.lexicon {
            None => Ok(None),
            Some((phrases, stats)) => {
                let lexicon = Lexicon::from_phrases(phrases.iter().map(String::as_str))?;
                if lexicon.phrase_count() != stats.z.len() {
                    return Err(Error::data(
                        "lexicon digest phrase count does not match its statistics",
                    ));
                }
                Ok(Some(LexiconArtifacts { lexicon, stats: stats.clone() }))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.params.tensors();
        let header = Header {
            config: self.config.clone(),
            labels: self.scheme.labels().to_vec(),
            words: self.vocab.words().to_vec(),
            chars: self.chars.chars().to_vec(),
            lm_words: self.lm.words().to_vec(),
            lexicon: self.lexicon.as_ref().map(|(phrases, stats)| LexiconDigest {
                phrases: phrases.clone(),
                z: stats.z.clone(),
                c: stats.c,
            }),
            best_dev_f1: self.best_dev_f1,
            epoch: self.epoch,
            tensors: tensors
                .iter()
                .map(|(name, data)| TensorEntry { name: name.clone(), len: data.len() })
                .collect(),
        };
        let meta = serde_json::to_vec(&header)
            .map_err(|e| Error::data(format!("cannot encode checkpoint header: {e}")))?;

        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        for (_, data) in &tensors {
            for value in *data {
                out.write_all(&value.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut len8 = [0u8; 8];
        input.read_exact(&mut len8)?;
        let meta_len = u64::from_le_bytes(len8) as usize;
        let mut meta = vec![0u8; meta_len];
        input.read_exact(&mut meta)?;
        let header: Header = serde_json::from_slice(&meta)
            .map_err(|e| Error::data(format!("corrupt checkpoint header: {e}")))?;

        header.config.validate()?;
        let scheme = TagScheme::new(header.labels)?;
        if scheme.tag_count() != header.config.tag_count {
            return Err(Error::data(
                "checkpoint label list does not match its configured tag count",
            ));
        }
        let vocab = Vocab::from_words(header.words);
        let chars = CharVocab::from_chars(header.chars);
        let lm = LmVocab::from_words(header.lm_words);
        let lexicon = match header.lexicon {
            None => None,
            Some(digest) => {
                Some((digest.phrases, LexiconStats::new(digest.z, digest.c)?))
            }
        };

        let mut params = ModelParams::zeros(&header.config);
        {
            let mut tensors = params.tensors_mut();
            if tensors.len() != header.tensors.len() {
                return Err(Error::data("checkpoint tensor index does not match the config"));
            }
            for ((name, data), entry) in tensors.iter_mut().zip(&header.tensors) {
                if *name != entry.name || data.len() != entry.len {
                    return Err(Error::data(format!(
                        "checkpoint tensor {} (len {}) does not match expected {} (len {})",
                        entry.name,
                        entry.len,
                        name,
                        data.len()
                    )));
                }
                for value in data.iter_mut() {
                    input.read_exact(&mut len8)?;
                    *value = f64::from_le_bytes(len8);
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::numeric("checkpoint contains non-finite parameters"));
        }

        Ok(Checkpoint {
            config: header.config,
            scheme,
            vocab,
            chars,
            lm,
            lexicon,
            params,
            best_dev_f1: header.best_dev_f1,
            epoch: header.epoch,
        })
    }
}
