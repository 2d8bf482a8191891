//! WordPiece tokenization and the inverse lift from tokens back to words.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{BtiError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters map straight to `[UNK]`.
const MAX_CHARS_PER_WORD: usize = 100;

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    cls: u32,
    sep: u32,
    pad: u32,
    unk: u32,
    continuation: String,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(BtiError::Vocabulary(format!("token {id} is empty")));
            }
            if index.insert(tok.clone(), id as u32).is_some() {
                return Err(BtiError::Vocabulary(format!("duplicate token {tok:?}")));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| BtiError::Vocabulary(format!("missing special token {name}")))
        };
        Ok(Self {
            cls: special(CLS)?,
            sep: special(SEP)?,
            pad: special(PAD)?,
            unk: special(UNK)?,
            index,
            tokens,
            continuation: CONTINUATION_PREFIX.to_string(),
        })
    }

    /// Reads a vocab file: one token per line, line number = id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.continuation
    }
}

/// Text normalization applied before splitting into words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    pub lowercase: bool,
    pub strip_accents: bool,
}

impl Default for TokenizerOptions {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_accents: true,
        }
    }
}

impl TokenizerOptions {
    pub fn cased() -> Self {
        Self {
            lowercase: false,
            strip_accents: false,
        }
    }
}

/// A paragraph wrapped as `[CLS] tokens… [SEP] [PAD]…`.
///
/// `word_spans[w] = (start, end)` is the half-open range of wrapped positions
/// holding word `w`'s tokens; the spans tile `1..=q` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedParagraph {
    pub token_ids: Vec<u32>,
    pub tokens: Vec<String>,
    pub wrapped_ids: Vec<u32>,
    pub word_spans: Vec<(usize, usize)>,
    pub words: Vec<String>,
    pub unk_words: Vec<bool>,
    pad_id: u32,
}

impl TokenizedParagraph {
    /// Number of content tokens.
    pub fn q(&self) -> usize {
        self.token_ids.len()
    }

    pub fn len(&self) -> usize {
        self.wrapped_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Same paragraph re-padded to `len` positions (at least `q + 2`).
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        let needed = self.q() + 2;
        if len < needed {
            return Err(BtiError::SequenceTooLong {
                len: needed,
                max_len: len,
            });
        }
        let mut out = self.clone();
        out.wrapped_ids.truncate(needed);
        out.wrapped_ids.resize(len, self.pad_id);
        Ok(out)
    }

    /// Same paragraph without any `[PAD]` positions.
    pub fn trimmed(&self) -> Self {
        self.padded_to(self.q() + 2).expect("q + 2 always fits")
    }

    /// `true` for positions attention may read (CLS, content, SEP).
    pub fn attention_mask(&self) -> Vec<bool> {
        let keep = self.q() + 2;
        (0..self.len()).map(|i| i < keep).collect()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x00A1 | 0x00A7 | 0x00AB | 0x00B6 | 0x00B7 | 0x00BB | 0x00BF
            | 0x2010..=0x2027 | 0x2030..=0x205E | 0x3001..=0x3003 | 0x3008..=0x3011)
}

fn normalize(text: &str, opts: TokenizerOptions) -> String {
    let cleaned: String = text
        .chars()
        .filter(|&c| c != '\u{0}' && c != '\u{FFFD}')
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| !c.is_control())
        .collect();
    let lowered = if opts.lowercase {
        cleaned.to_lowercase()
    } else {
        cleaned
    };
    if opts.strip_accents {
        lowered
            .nfd()
            .filter(|&c| !unicode_normalization::char::is_combining_mark(c))
            .collect()
    } else {
        lowered
    }
}

/// Normalizes `text` and splits it into words: whitespace separates words and
/// every punctuation character stands alone.
pub fn split_words(text: &str, opts: TokenizerOptions) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in normalize(text, opts).split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Greedy longest-match-first segmentation of a single word. Returns `None`
/// when some suffix has no matching vocabulary entry.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<u32>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_CHARS_PER_WORD {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut candidate: String = chars[start..end].iter().collect();
            if start > 0 {
                candidate.insert_str(0, vocab.continuation_prefix());
            }
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Tokenizes `text` into a paragraph wrapped and padded to `max_len`.
///
/// Words whose tokens would not fit in the `max_len - 2` content budget are
/// dropped whole, together with every word after them.
pub fn tokenize(
    text: &str,
    vocab: &Vocabulary,
    max_len: usize,
    opts: TokenizerOptions,
) -> Result<TokenizedParagraph> {
    let words = split_words(text, opts);
    if words.is_empty() {
        return Err(BtiError::EmptyText);
    }
    let budget = max_len.saturating_sub(2);
    let mut token_ids = Vec::new();
    let mut spans = Vec::new();
    let mut kept_words = Vec::new();
    let mut unk_words = Vec::new();
    for word in words {
        let (ids, unk) = match wordpiece(&word, vocab) {
            Some(ids) => (ids, false),
            None => (vec![vocab.unk_id()], true),
        };
        if token_ids.len() + ids.len() > budget {
            break;
        }
        let start = token_ids.len() + 1;
        token_ids.extend_from_slice(&ids);
        spans.push((start, token_ids.len() + 1));
        kept_words.push(word);
        unk_words.push(unk);
    }
    if token_ids.is_empty() {
        return Err(BtiError::NothingFits { max_len });
    }
    let mut wrapped_ids = Vec::with_capacity(max_len);
    wrapped_ids.push(vocab.cls_id());
    wrapped_ids.extend_from_slice(&token_ids);
    wrapped_ids.push(vocab.sep_id());
    wrapped_ids.resize(max_len, vocab.pad_id());
    let tokens = token_ids
        .iter()
        .map(|&id| vocab.token(id).expect("ids come from the vocabulary").to_string())
        .collect();
    Ok(TokenizedParagraph {
        token_ids,
        tokens,
        wrapped_ids,
        word_spans: spans,
        words: kept_words,
        unk_words,
        pad_id: vocab.pad_id(),
    })
}

/// How token latents are combined into a word latent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPooling {
    #[default]
    Mean,
    Max,
    First,
}

/// How token saliencies are combined into a word saliency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyPooling {
    #[default]
    Max,
    Mean,
}

/// Word-level view of one paragraph: words, their latents and saliencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WordLevelView<T> {
    pub words: Vec<String>,
    pub latents: Vec<Vec<T>>,
    pub saliencies: Vec<T>,
}

impl<T: Scalar> WordLevelView<T> {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Rebuilds word `w` from its tokens by stripping continuation prefixes.
/// Words that fell back to `[UNK]` keep their source spelling.
pub fn reconstruct_word(tp: &TokenizedParagraph, w: usize) -> String {
    if tp.unk_words[w] {
        return tp.words[w].clone();
    }
    let (start, end) = tp.word_spans[w];
    tp.tokens[start - 1..end - 1]
        .iter()
        .map(|t| t.strip_prefix(CONTINUATION_PREFIX).unwrap_or(t))
        .collect()
}

/// Lifts token latents (`[q×h]`) and token saliencies (length `q`) to words.
pub fn wordpiece_inverse<T: Scalar>(
    tp: &TokenizedParagraph,
    token_latents: &Tensor<T>,
    token_saliency: &[T],
    latent_pooling: LatentPooling,
    saliency_pooling: SaliencyPooling,
) -> Result<WordLevelView<T>> {
    let q = tp.q();
    if token_latents.rows() != q || token_latents.shape().len() != 2 {
        return Err(BtiError::Shape {
            op: "wordpiece_inverse",
            left: vec![q],
            right: token_latents.shape().to_vec(),
        });
    }
    if token_saliency.len() != q {
        return Err(BtiError::Shape {
            op: "wordpiece_inverse",
            left: vec![q],
            right: vec![token_saliency.len()],
        });
    }
    let h = token_latents.cols();
    let mut view = WordLevelView {
        words: Vec::with_capacity(tp.word_count()),
        latents: Vec::with_capacity(tp.word_count()),
        saliencies: Vec::with_capacity(tp.word_count()),
    };
    for (w, &(start, end)) in tp.word_spans.iter().enumerate() {
        let rows = (start - 1)..(end - 1);
        let n = rows.len();
        let latent = match latent_pooling {
            LatentPooling::Mean => {
                let mut acc = vec![0f64; h];
                for r in rows.clone() {
                    for (a, v) in acc.iter_mut().zip(token_latents.row(r)) {
                        *a += v.to_f64_lossy();
                    }
                }
                acc.into_iter().map(|a| T::from_f64_lossy(a / n as f64)).collect()
            }
            LatentPooling::Max => {
                let mut acc = token_latents.row(rows.start).to_vec();
                for r in rows.clone().skip(1) {
                    for (a, &v) in acc.iter_mut().zip(token_latents.row(r)) {
                        *a = a.max(v);
                    }
                }
                acc
            }
            LatentPooling::First => token_latents.row(rows.start).to_vec(),
        };
        let sal = &token_saliency[rows];
        let saliency = match saliency_pooling {
            SaliencyPooling::Max => sal.iter().copied().fold(T::neg_infinity(), T::max),
            SaliencyPooling::Mean => T::from_f64_lossy(crate::scalar::sum_wide(sal) / n as f64),
        };
        view.words.push(reconstruct_word(tp, w));
        view.latents.push(latent);
        view.saliencies.push(saliency);
    }
    Ok(view)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocabulary {
        let mut toks: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        toks.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(toks).unwrap()
    }

    #[test]
    fn playing_splits_into_two_pieces() {
        let v = vocab(&["play", "##ing", "the"]);
        let tp = tokenize("playing", &v, 16, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.tokens, vec!["play", "##ing"]);
        assert_eq!(tp.word_spans, vec![(1, 3)]);
        assert_eq!(tp.q(), 2);
        assert_eq!(tp.wrapped_ids[0], v.cls_id());
        assert_eq!(tp.wrapped_ids[3], v.sep_id());
        assert!(tp.wrapped_ids[4..].iter().all(|&id| id == v.pad_id()));
        assert_eq!(tp.len(), 16);
    }

    #[test]
    fn verbatim_word_is_one_token() {
        let v = vocab(&["play", "##ing", "the"]);
        let tp = tokenize("the", &v, 8, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.tokens, vec!["the"]);
        assert_eq!(tp.word_spans, vec![(1, 2)]);
    }

    #[test]
    fn unknown_glyphs_become_unk() {
        let v = vocab(&["play", "##ing"]);
        let tp = tokenize("zzq", &v, 8, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.token_ids, vec![v.unk_id()]);
        assert_eq!(reconstruct_word(&tp, 0), "zzq");
        // "playx": "play" matches but "##x" does not, so the whole word is UNK.
        let tp = tokenize("playx", &v, 8, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.token_ids, vec![v.unk_id()]);
    }

    #[test]
    fn empty_text_is_rejected() {
        let v = vocab(&["a"]);
        assert!(matches!(
            tokenize(" \t\n ", &v, 8, TokenizerOptions::default()),
            Err(BtiError::EmptyText)
        ));
    }

    #[test]
    fn truncation_drops_whole_words() {
        let v = vocab(&["play", "##ing", "the"]);
        // budget of 3 content tokens: "the" (1) + "playing" (2) fit, next "the" does not.
        let tp = tokenize("the playing the", &v, 5, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.words, vec!["the", "playing"]);
        // budget of 2: "the" fits, "playing" would cross the boundary.
        let tp = tokenize("the playing the", &v, 4, TokenizerOptions::default()).unwrap();
        assert_eq!(tp.words, vec!["the"]);
        assert!(matches!(
            tokenize("playing", &v, 3, TokenizerOptions::default()),
            Err(BtiError::NothingFits { .. })
        ));
    }

    #[test]
    fn punctuation_and_case_and_accents() {
        let words = split_words("Café, très-bien!", TokenizerOptions::default());
        assert_eq!(words, vec!["cafe", ",", "tres", "-", "bien", "!"]);
        let words = split_words("Café", TokenizerOptions::cased());
        assert_eq!(words, vec!["Café"]);
    }

    #[test]
    fn inverse_uses_max_saliency_and_mean_latent() {
        let v = vocab(&["play", "##ing", "the"]);
        let tp = tokenize("the playing", &v, 8, TokenizerOptions::default()).unwrap();
        let latents = Tensor::from_rows(&[vec![2.0, 3.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let view = wordpiece_inverse(
            &tp,
            &latents,
            &[0.3, 0.1, 0.8],
            LatentPooling::Mean,
            SaliencyPooling::Max,
        )
        .unwrap();
        assert_eq!(view.words, vec!["the", "playing"]);
        assert_eq!(view.saliencies, vec![0.3, 0.8]);
        assert_eq!(view.latents[0], vec![2.0, 3.0]);
        assert_eq!(view.latents[1], vec![0.5, 0.5]);
    }

    #[test]
    fn inverse_rejects_length_mismatch() {
        let v = vocab(&["play", "##ing"]);
        let tp = tokenize("playing", &v, 8, TokenizerOptions::default()).unwrap();
        let latents = Tensor::<f64>::zeros(&[2, 3]);
        assert!(wordpiece_inverse(&tp, &latents, &[0.1], LatentPooling::Mean, SaliencyPooling::Max).is_err());
        let latents = Tensor::<f64>::zeros(&[3, 3]);
        assert!(wordpiece_inverse(&tp, &latents, &[0.1, 0.2], LatentPooling::Mean, SaliencyPooling::Max).is_err());
    }

    #[test]
    fn padding_helpers() {
        let v = vocab(&["play", "##ing"]);
        let tp = tokenize("playing", &v, 10, TokenizerOptions::default()).unwrap();
        let t = tp.trimmed();
        assert_eq!(t.len(), 4);
        assert_eq!(t.padded_to(7).unwrap().len(), 7);
        assert!(tp.padded_to(3).is_err());
        assert_eq!(tp.attention_mask().iter().filter(|&&m| m).count(), 4);
    }

    #[test]
    fn vocabulary_validation() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let dup = [PAD, UNK, CLS, SEP, "a", "a"].iter().map(|s| s.to_string()).collect();
        assert!(Vocabulary::from_tokens(dup).is_err());
        let empty = [PAD, UNK, CLS, SEP, ""].iter().map(|s| s.to_string()).collect();
        assert!(Vocabulary::from_tokens(empty).is_err());
    }
}
