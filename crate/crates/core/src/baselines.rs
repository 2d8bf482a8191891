//! Comparison methods: vanilla gradients, integrated gradients and a
//! TF-IDF weighted word-vector matcher.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{embed, paragraph_feature, run_encoder, EmbeddingTap, EncoderWeights};
use crate::error::{BtiError, Result};
use crate::pipeline::{
    ensure_nonzero, match_words, min_max_normalize, similarity_gradient, top_words, ExplainConfig, Explanation,
    GradientSite, Method,
};
use crate::scalar::{dot_wide, Scalar};
use crate::tensor::Tensor;
use crate::tokenizer::{split_words, TokenizedParagraph, TokenizerOptions, WordLevelView};

/// Min-max normalized L2 norm of each gradient row.
pub fn gradient_norm_scores<T: Scalar>(gradient: &Tensor<T>) -> Vec<T> {
    let norms: Vec<T> = (0..gradient.rows())
        .map(|i| {
            let r = gradient.row(i);
            T::from_f64_lossy(dot_wide(r, r).sqrt())
        })
        .collect();
    min_max_normalize(&norms)
}

/// Vanilla gradients: per-token norm of `∂cosine(F_p1, F_p2)/∂E(p2)`.
pub fn vanilla_gradients<T: Scalar>(
    p1: &TokenizedParagraph,
    p2: &TokenizedParagraph,
    w: &EncoderWeights<T>,
) -> Result<Vec<T>> {
    let anchor = paragraph_feature(p1, w)?;
    let sg = similarity_gradient(&anchor, p2, w, GradientSite::Embedding(EmbeddingTap::PreNorm))?;
    Ok(gradient_norm_scores(&sg.gradient))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgConfig {
    /// Number of midpoint samples along the path.
    pub steps: usize,
    /// Activation whose all-zero value is the baseline.
    pub tap: EmbeddingTap,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            tap: EmbeddingTap::PostNorm,
        }
    }
}

/// `x ∘ mean_k ∇f(α_k·x)` with `α_k = (k − ½)/steps`: integrated gradients
/// from the all-zero baseline, by the midpoint rule.
pub fn integrate_gradients<T: Scalar>(
    x: &Tensor<T>,
    steps: usize,
    mut grad_at: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(BtiError::InvalidParameter("integrated gradients needs at least one step".into()));
    }
    let mut acc = vec![0f64; x.len()];
    for k in 0..steps {
        let alpha = T::from_f64_lossy((k as f64 + 0.5) / steps as f64);
        let g = grad_at(&x.scale(alpha))?;
        if g.shape() != x.shape() {
            return Err(BtiError::Shape {
                op: "integrate_gradients",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v.to_f64_lossy();
        }
    }
    let n = steps as f64;
    let data = x
        .data()
        .iter()
        .zip(acc)
        .map(|(&xv, s)| T::from_f64_lossy(xv.to_f64_lossy() * s / n))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgResult<T> {
    /// Min-max normalized per-token scores over content tokens.
    pub scores: Vec<T>,
    /// Per-token sums of the raw attributions over content tokens.
    pub token_attributions: Vec<T>,
    /// Raw attributions over every wrapped position, `[len × h]`.
    pub raw: Tensor<T>,
    /// Similarity at the input.
    pub cosine_input: T,
    /// Similarity at the all-zero baseline.
    pub cosine_baseline: T,
}

impl<T: Scalar> IgResult<T> {
    pub fn total_attribution(&self) -> f64 {
        crate::scalar::sum_wide(self.raw.data())
    }
}

fn tap_input<T: Scalar>(tp: &TokenizedParagraph, w: &EncoderWeights<T>, tap: EmbeddingTap) -> Result<Tensor<T>> {
    let ea = embed(tp, w)?;
    Ok(match tap {
        EmbeddingTap::PreNorm => ea.full,
        EmbeddingTap::PostNorm => {
            let run = run_encoder(w, tp, ea.full, EmbeddingTap::PreNorm, false)?;
            run.graph.value(run.normed_embedding).clone()
        }
    })
}

/// Cosine with `anchor` and its gradient with respect to the tap input.
fn cosine_and_grad<T: Scalar>(
    anchor: &Tensor<T>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    input: &Tensor<T>,
    tap: EmbeddingTap,
) -> Result<(T, Tensor<T>)> {
    let mut run = run_encoder(w, tp, input.clone(), tap, true)?;
    let f = run.feature()?;
    ensure_nonzero(run.graph.value(f))?;
    let a = run.graph.constant_owned(anchor.clone());
    let cos = run.graph.cosine(a, f)?;
    let g = run.graph.gradient(cos, run.input)?;
    Ok((run.graph.value(cos).item(), g))
}

/// Integrated gradients of `cosine(F_p1, F_p2)` over `p2`'s embedding, from
/// an all-zero baseline at `cfg.tap`.
pub fn integrated_gradients<T: Scalar>(
    p1: &TokenizedParagraph,
    p2: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &IgConfig,
) -> Result<IgResult<T>> {
    let anchor = paragraph_feature(p1, w)?;
    ensure_nonzero(&anchor)?;
    let x = tap_input(p2, w, cfg.tap)?;
    let raw = integrate_gradients(&x, cfg.steps, |xa| Ok(cosine_and_grad(&anchor, p2, w, xa, cfg.tap)?.1))?;
    let (cosine_input, _) = cosine_and_grad(&anchor, p2, w, &x, cfg.tap)?;
    let (cosine_baseline, _) = cosine_and_grad(&anchor, p2, w, &Tensor::zeros(x.shape()), cfg.tap)?;
    let token_attributions: Vec<T> = (1..=p2.q())
        .map(|i| T::from_f64_lossy(crate::scalar::sum_wide(raw.row(i))))
        .collect();
    Ok(IgResult {
        scores: min_max_normalize(&token_attributions),
        token_attributions,
        raw,
        cosine_input,
        cosine_baseline,
    })
}

/// Final-layer outputs of the content tokens, `[q × h]`.
pub fn content_latents<T: Scalar>(tp: &TokenizedParagraph, w: &EncoderWeights<T>) -> Result<Tensor<T>> {
    let ea = embed(tp, w)?;
    let run = run_encoder(w, tp, ea.full, EmbeddingTap::PreNorm, false)?;
    run.hidden_states().slice_rows(1, tp.q() + 1)
}

/// Document frequencies over a reference corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TfidfStats {
    pub doc_freq: HashMap<String, usize>,
    pub documents: usize,
    pub term_counts: Vec<HashMap<String, usize>>,
    pub tokenizer: TokenizerOptions,
}

pub fn term_counts(text: &str, opts: TokenizerOptions) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    for w in split_words(text, opts) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

impl TfidfStats {
    pub fn build<S: AsRef<str>>(documents: &[S], opts: TokenizerOptions) -> Result<Self> {
        if documents.is_empty() {
            return Err(BtiError::EmptyCorpus);
        }
        let term_counts: Vec<_> = documents.iter().map(|d| term_counts(d.as_ref(), opts)).collect();
        let mut doc_freq = HashMap::new();
        for counts in &term_counts {
            for w in counts.keys() {
                *doc_freq.entry(w.clone()).or_insert(0) += 1;
            }
        }
        Ok(Self {
            doc_freq,
            documents: documents.len(),
            term_counts,
            tokenizer: opts,
        })
    }

    /// `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, word: &str) -> f64 {
        let df = self.doc_freq.get(word).copied().unwrap_or(0) as f64;
        ((1.0 + self.documents as f64) / (1.0 + df)).ln() + 1.0
    }

    /// Raw in-paragraph count times smoothed idf.
    pub fn tfidf(&self, word: &str, counts: &HashMap<String, usize>) -> f64 {
        counts.get(word).copied().unwrap_or(0) as f64 * self.idf(word)
    }
}

/// Word → fixed-dimension vector.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorTable<T> {
    dim: usize,
    vectors: HashMap<String, Vec<T>>,
}

impl<T: Scalar> WordVectorTable<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, v: Vec<T>) -> Result<()> {
        if v.len() != self.dim {
            return Err(BtiError::DimensionMismatch(format!(
                "word vector of length {} in a table of dimension {}",
                v.len(),
                self.dim
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(BtiError::NonFinite("word vector".into()));
        }
        self.vectors.insert(word.into(), v);
        Ok(())
    }

    pub fn get(&self, word: &str) -> Option<&[T]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Parses `word v1 … vd` lines, with an optional `count d` header line.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| BtiError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut table: Option<Self> = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if n == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
                let dim = fields[1].parse().expect("checked");
                table = Some(Self::new(dim));
                continue;
            }
            let values = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map(T::from_f64_lossy))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|e| err(line_no, format!("bad number: {e}")))?;
            let t = table.get_or_insert_with(|| Self::new(values.len()));
            t.insert(fields[0], values).map_err(|e| err(line_no, e.to_string()))?;
        }
        table.ok_or_else(|| err(0, "no word vectors".into()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

fn tfidf_view<T: Scalar>(text: &str, stats: &TfidfStats, vectors: &WordVectorTable<T>) -> WordLevelView<T> {
    let counts = term_counts(text, stats.tokenizer);
    let mut view = WordLevelView {
        words: Vec::new(),
        latents: Vec::new(),
        saliencies: Vec::new(),
    };
    for word in split_words(text, stats.tokenizer) {
        if let Some(v) = vectors.get(&word) {
            view.saliencies.push(T::from_f64_lossy(stats.tfidf(&word, &counts)));
            view.latents.push(v.to_vec());
            view.words.push(word);
        }
    }
    view
}

/// Matches words of `p1` to words of `p2` by word-vector cosine and scores
/// each pair by `tfidf(w1) · tfidf(w2) · cosine`. Words absent from the
/// vector table take no part; view indices count only the words kept.
/// Pair saliencies here are raw TF-IDF weights, not normalized to `[0, 1]`.
pub fn tfidf_w2v_explain<T: Scalar>(
    p1: &str,
    p2: &str,
    stats: &TfidfStats,
    vectors: &WordVectorTable<T>,
    cfg: &ExplainConfig,
) -> Result<Explanation<T>> {
    cfg.validate()?;
    let view1 = tfidf_view(p1, stats, vectors);
    let view2 = tfidf_view(p2, stats, vectors);
    if view1.is_empty() || view2.is_empty() {
        return Err(BtiError::NoMatchCandidates);
    }
    let m1 = match_words(&view1, &view2, false)?;
    let selection = top_words(&m1, &[], cfg.top_k, &cfg.bandwidth, &cfg.mean_shift)?;
    let mut config = *cfg;
    config.tokenizer = stats.tokenizer;
    Ok(Explanation::assemble(Method::TfidfW2v, config, selection, view1, view2))
}
