//! Item corpora, pooled-feature indexes and exact cosine nearest neighbours.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::encoder::format::{Reader, Writer};
use crate::encoder::{paragraph_feature, EncoderWeights};
use crate::error::{BtiError, Result};
use crate::scalar::{cosine, Scalar};
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, TokenizerOptions, Vocabulary};

pub const INDEX_MAGIC: [u8; 4] = *b"BTIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub description: String,
}

/// Two paragraphs to explain against each other.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    #[serde(default)]
    pub id: Option<String>,
    pub a: String,
    pub b: String,
}

fn parse_lines<R: DeserializeOwned>(
    text: &str,
    path: &Path,
    mut check: impl FnMut(&R) -> std::result::Result<(), String>,
) -> Result<Vec<R>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| BtiError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let rec: R = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        check(&rec).map_err(err)?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(BtiError::EmptyCorpus);
    }
    Ok(out)
}

/// Parses one JSON object per line; blank lines are skipped.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<CorpusItem>> {
    let mut seen = HashSet::new();
    parse_lines(text, path, |item: &CorpusItem| {
        if item.id.is_empty() {
            return Err("empty id".into());
        }
        if item.description.trim().is_empty() {
            return Err(format!("item {:?} has an empty description", item.id));
        }
        if !seen.insert(item.id.clone()) {
            return Err(BtiError::DuplicateId(item.id.clone()).to_string());
        }
        Ok(())
    })
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<CorpusItem>> {
    let path = path.as_ref();
    parse_corpus(&fs::read_to_string(path)?, path)
}

pub fn parse_pairs(text: &str, path: &Path) -> Result<Vec<TextPair>> {
    parse_lines(text, path, |p: &TextPair| {
        if p.a.trim().is_empty() || p.b.trim().is_empty() {
            Err("empty paragraph".into())
        } else {
            Ok(())
        }
    })
}

/// Reads a `{"a": …, "b": …}` per-line pair file.
pub fn ingest_pairs(path: impl AsRef<Path>) -> Result<Vec<TextPair>> {
    let path = path.as_ref();
    parse_pairs(&fs::read_to_string(path)?, path)
}

/// Item ids with their pooled feature vectors, one row per item.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityIndex<T> {
    ids: Vec<String>,
    features: Tensor<T>,
    fingerprint: u64,
}

impl<T: Scalar> SimilarityIndex<T> {
    pub fn from_parts(ids: Vec<String>, features: Tensor<T>, fingerprint: u64) -> Result<Self> {
        if ids.is_empty() {
            return Err(BtiError::EmptyCorpus);
        }
        if features.shape().len() != 2 || features.rows() != ids.len() {
            return Err(BtiError::DimensionMismatch(format!(
                "{} ids for a feature matrix of shape {:?}",
                ids.len(),
                features.shape()
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(BtiError::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            ids,
            features,
            fingerprint,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn feature(&self, id: &str) -> Option<&[T]> {
        self.position(id).map(|i| self.features.row(i))
    }

    /// Errors unless the index was built with `w`.
    pub fn check_weights(&self, w: &EncoderWeights<T>) -> Result<()> {
        let fp = w.fingerprint();
        if fp != self.fingerprint {
            return Err(BtiError::FingerprintMismatch {
                index: self.fingerprint,
                weights: fp,
            });
        }
        Ok(())
    }

    /// The `k` items most cosine-similar to `seed_id`, excluding the seed,
    /// by cosine descending with ties in corpus order. Items with a zero
    /// feature vector are never returned.
    pub fn nearest(&self, seed_id: &str, k: usize) -> Result<Vec<(String, T)>> {
        if k == 0 {
            return Err(BtiError::InvalidParameter("k must be at least 1".into()));
        }
        let s = self.position(seed_id).ok_or_else(|| BtiError::UnknownId(seed_id.to_string()))?;
        let seed = self.features.row(s);
        let mut scored: Vec<(usize, T)> = (0..self.len())
            .filter(|&i| i != s)
            .filter_map(|i| cosine(seed, self.features.row(i)).map(|c| (i, c)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite cosine").then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(i, c)| (self.ids[i].clone(), c)).collect())
    }

    /// `BTIX` layout: magic, version, `n`, `h`, fingerprint (`u64`), then
    /// each id as a `u32` byte length and UTF-8 bytes, then `n × h` `f32`s.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(INDEX_MAGIC, INDEX_VERSION);
        w.u32(self.len() as u32);
        w.u32(self.features.cols() as u32);
        w.u64(self.fingerprint);
        for id in &self.ids {
            w.u32(id.len() as u32);
            w.bytes(id.as_bytes());
        }
        w.f32s(self.features.data());
        w.finish()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, INDEX_MAGIC, INDEX_VERSION)?;
        let n = r.u32("item count")? as usize;
        let h = r.u32("feature width")? as usize;
        let fingerprint = r.u64("fingerprint")?;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = r.u32("id length")? as usize;
            let raw = r.bytes(len, "id")?;
            let id = std::str::from_utf8(raw)
                .map_err(|e| BtiError::DimensionMismatch(format!("id is not UTF-8: {e}")))?;
            ids.push(id.to_string());
        }
        let features = r.tensor(&[n, h], "feature matrix")?;
        r.finish()?;
        Self::from_parts(ids, features, fingerprint)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Feature vector of every item's description, rows in corpus order.
/// Items are encoded in parallel; failures name the item.
pub fn build_index<T: Scalar>(
    corpus: &[CorpusItem],
    w: &EncoderWeights<T>,
    vocab: &Vocabulary,
    opts: TokenizerOptions,
) -> Result<SimilarityIndex<T>> {
    if corpus.is_empty() {
        return Err(BtiError::EmptyCorpus);
    }
    let rows: Vec<Vec<T>> = corpus
        .par_iter()
        .map(|item| {
            let feature = tokenize(&item.description, vocab, w.config.max_len, opts)
                .and_then(|tp| paragraph_feature(&tp.trimmed(), w));
            feature.map(Tensor::into_data).map_err(|e| BtiError::Item {
                id: item.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let features = Tensor::from_rows(&rows)?;
    SimilarityIndex::from_parts(
        corpus.iter().map(|i| i.id.clone()).collect(),
        features,
        w.fingerprint(),
    )
}
