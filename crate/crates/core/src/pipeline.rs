//! Token saliency, cross-paragraph word matching and top-pair selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, IgConfig};
use crate::clustering::{estimate_bandwidth, mean_shift_1d, MeanShiftParams, DEFAULT_BANDWIDTH_QUANTILE};
use crate::encoder::{embed, paragraph_feature, run_encoder, EmbeddingTap, EncoderWeights};
use crate::error::{BtiError, Result};
use crate::scalar::{cosine, dot_wide, Scalar};
use crate::tensor::Tensor;
use crate::tokenizer::{
    tokenize, wordpiece_inverse, LatentPooling, SaliencyPooling, TokenizedParagraph, TokenizerOptions,
    Vocabulary, WordLevelView,
};

/// What the per-token score is built from before rectification and summing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// Hadamard product of activation and gradient.
    #[default]
    GradTimesActivation,
    ActivationOnly,
    GradientOnly,
}

/// Which activation the gradient is taken against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyLayer {
    #[default]
    Embedding,
    /// Output of the final transformer block.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// Quantile of the pairwise score distances.
    Quantile(f64),
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::Quantile(DEFAULT_BANDWIDTH_QUANTILE)
    }
}

impl BandwidthPolicy {
    pub fn resolve<T: Scalar>(&self, scores: &[T]) -> Result<T> {
        match *self {
            BandwidthPolicy::Fixed(b) if b > 0.0 && b.is_finite() => Ok(T::from_f64_lossy(b)),
            BandwidthPolicy::Fixed(b) => Err(BtiError::InvalidParameter(format!("bandwidth {b} is not positive"))),
            BandwidthPolicy::Quantile(q) if (0.0..=1.0).contains(&q) => Ok(estimate_bandwidth(scores, q)),
            BandwidthPolicy::Quantile(q) => {
                Err(BtiError::InvalidParameter(format!("bandwidth quantile {q} outside [0, 1]")))
            }
        }
    }
}

/// Sequence length used when running the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// `[CLS] tokens [SEP]` with no padding; equivalent to full padding
    /// because padded keys are masked and padded rows are never pooled.
    #[default]
    Minimal,
    /// Pad to the encoder's maximum length.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub top_k: usize,
    pub saliency_source: SaliencySource,
    pub saliency_layer: SaliencyLayer,
    /// Pre- or post-layer-norm embedding, when `saliency_layer` is `Embedding`.
    pub embedding_tap: EmbeddingTap,
    pub latent_pooling: LatentPooling,
    pub saliency_pooling: SaliencyPooling,
    pub bandwidth: BandwidthPolicy,
    pub mean_shift: MeanShiftParams,
    pub tokenizer: TokenizerOptions,
    pub padding: Padding,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            top_k: 2,
            saliency_source: SaliencySource::default(),
            saliency_layer: SaliencyLayer::default(),
            embedding_tap: EmbeddingTap::default(),
            latent_pooling: LatentPooling::Mean,
            saliency_pooling: SaliencyPooling::Max,
            bandwidth: BandwidthPolicy::default(),
            mean_shift: MeanShiftParams::default(),
            tokenizer: TokenizerOptions::default(),
            padding: Padding::default(),
        }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(BtiError::InvalidParameter("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rescales to `[0, 1]`; a constant input maps to `0.5` everywhere.
pub fn min_max_normalize<T: Scalar>(raw: &[T]) -> Vec<T> {
    let lo = raw.iter().copied().fold(T::infinity(), T::min);
    let hi = raw.iter().copied().fold(T::neg_infinity(), T::max);
    if !(hi > lo) {
        return vec![T::from_f64_lossy(0.5); raw.len()];
    }
    let span = hi - lo;
    raw.iter().map(|&x| (x - lo) / span).collect()
}

/// Gradient of `cosine(anchor, F_p)` at some activation of `p`, restricted to
/// content tokens, together with the activation itself and the final-layer
/// token latents.
#[derive(Clone, Debug)]
pub struct SimilarityGradient<T> {
    pub cosine: T,
    pub activation: Tensor<T>,
    pub gradient: Tensor<T>,
    pub latents: Tensor<T>,
}

/// Differentiation target for [`similarity_gradient`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientSite {
    Embedding(EmbeddingTap),
    LastLayer,
}

impl GradientSite {
    pub fn from_config(cfg: &ExplainConfig) -> Self {
        match cfg.saliency_layer {
            SaliencyLayer::Embedding => GradientSite::Embedding(cfg.embedding_tap),
            SaliencyLayer::Last => GradientSite::LastLayer,
        }
    }
}

pub(crate) fn ensure_nonzero<T: Scalar>(v: &Tensor<T>) -> Result<()> {
    if dot_wide(v.data(), v.data()) == 0.0 {
        Err(BtiError::ZeroNormFeature)
    } else {
        Ok(())
    }
}

pub fn similarity_gradient<T: Scalar>(
    anchor: &Tensor<T>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    site: GradientSite,
) -> Result<SimilarityGradient<T>> {
    ensure_nonzero(anchor)?;
    let ea = embed(tp, w)?;
    let mut run = run_encoder(w, tp, ea.full, EmbeddingTap::PreNorm, true)?;
    let feature = run.feature()?;
    ensure_nonzero(run.graph.value(feature))?;
    let anchor_var = run.graph.constant_owned(anchor.clone());
    let cos = run.graph.cosine(anchor_var, feature)?;
    let target = match site {
        GradientSite::Embedding(EmbeddingTap::PreNorm) => run.input,
        GradientSite::Embedding(EmbeddingTap::PostNorm) => run.normed_embedding,
        GradientSite::LastLayer => run.hidden,
    };
    let grad = run.graph.gradient(cos, target)?;
    let q = tp.q();
    Ok(SimilarityGradient {
        cosine: run.graph.value(cos).item(),
        activation: run.graph.value(target).slice_rows(1, q + 1)?,
        gradient: grad.slice_rows(1, q + 1)?,
        latents: run.graph.value(run.hidden).slice_rows(1, q + 1)?,
    })
}

/// Per-token saliency of the differentiated paragraph, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TokenSaliencyMap<T> {
    pub scores: Vec<T>,
    /// Scores before min-max normalization.
    pub raw: Vec<T>,
}

/// `Σ_k ReLU(term)_ik` per content token, where `term` is chosen by `source`.
pub fn rectified_token_sums<T: Scalar>(
    activation: &Tensor<T>,
    gradient: &Tensor<T>,
    source: SaliencySource,
) -> Vec<T> {
    (0..activation.rows())
        .map(|i| {
            let a = activation.row(i);
            let g = gradient.row(i);
            let total: f64 = (0..a.len())
                .map(|k| {
                    let v = match source {
                        SaliencySource::GradTimesActivation => a[k] * g[k],
                        SaliencySource::ActivationOnly => a[k],
                        SaliencySource::GradientOnly => g[k],
                    };
                    v.to_f64_lossy().max(0.0)
                })
                .sum();
            T::from_f64_lossy(total)
        })
        .collect()
}

fn saliency_pass<T: Scalar>(
    p_const: &TokenizedParagraph,
    p_diff: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
) -> Result<(TokenSaliencyMap<T>, Tensor<T>)> {
    let anchor = paragraph_feature(p_const, w)?;
    let sg = similarity_gradient(&anchor, p_diff, w, GradientSite::from_config(cfg))?;
    let raw = rectified_token_sums(&sg.activation, &sg.gradient, cfg.saliency_source);
    let scores = min_max_normalize(&raw);
    Ok((TokenSaliencyMap { scores, raw }, sg.latents))
}

/// Saliency of `p_diff`'s content tokens for its similarity to `p_const`,
/// whose feature vector is held constant.
pub fn token_saliency<T: Scalar>(
    p_const: &TokenizedParagraph,
    p_diff: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
) -> Result<TokenSaliencyMap<T>> {
    Ok(saliency_pass(p_const, p_diff, w, cfg)?.0)
}

/// A matched word pair, always ordered (paragraph-a word, paragraph-b word).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct WordPairMatch<T> {
    pub i: usize,
    pub j: usize,
    pub word_a: String,
    pub word_b: String,
    pub cosine: T,
    pub saliency_a: T,
    pub saliency_b: T,
    /// `cosine · saliency_a · saliency_b`.
    pub score: T,
}

/// For each word of `view_a`, finds the word of `view_b` whose latent has
/// the highest cosine with it. Ties go to the later candidate. When
/// `reversed` is set, `view_a` is paragraph b and emitted pairs are flipped
/// so they still read (paragraph-a word, paragraph-b word).
pub fn match_words<T: Scalar>(
    view_a: &WordLevelView<T>,
    view_b: &WordLevelView<T>,
    reversed: bool,
) -> Result<Vec<WordPairMatch<T>>> {
    if view_a.is_empty() || view_b.is_empty() {
        return Err(BtiError::NoMatchCandidates);
    }
    let mut out = Vec::with_capacity(view_a.len());
    for (i, src) in view_a.latents.iter().enumerate() {
        let mut best: Option<(usize, T)> = None;
        for (j, cand) in view_b.latents.iter().enumerate() {
            let Some(c) = cosine(src, cand) else { continue };
            if best.is_none_or(|(_, bc)| bc <= c) {
                best = Some((j, c));
            }
        }
        let (m, c) = best.ok_or(BtiError::NoMatchCandidates)?;
        let (ia, ib, wa, wb, sa, sb) = if reversed {
            (m, i, &view_b.words[m], &view_a.words[i], view_b.saliencies[m], view_a.saliencies[i])
        } else {
            (i, m, &view_a.words[i], &view_b.words[m], view_a.saliencies[i], view_b.saliencies[m])
        };
        out.push(WordPairMatch {
            i: ia,
            j: ib,
            word_a: wa.clone(),
            word_b: wb.clone(),
            cosine: c,
            saliency_a: sa,
            saliency_b: sb,
            score: c * sa * sb,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClusteredPair<T> {
    pub pair: WordPairMatch<T>,
    pub cluster: usize,
}

/// Outcome of clustering the pair scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PairSelection<T> {
    /// Pairs in the `top_k` highest clusters, by score descending.
    pub retained: Vec<ClusteredPair<T>>,
    pub discarded: Vec<ClusteredPair<T>>,
    /// Cluster centroids, strictly descending.
    pub centroids: Vec<T>,
    pub bandwidth: T,
}

/// Unions both match lists (a pair found in both directions keeps its higher
/// score), clusters the scores and keeps clusters `0..top_k`.
pub fn top_words<T: Scalar>(
    m1: &[WordPairMatch<T>],
    m2: &[WordPairMatch<T>],
    top_k: usize,
    bandwidth: &BandwidthPolicy,
    params: &MeanShiftParams,
) -> Result<PairSelection<T>> {
    if top_k == 0 {
        return Err(BtiError::InvalidParameter("top_k must be at least 1".into()));
    }
    let mut union: Vec<WordPairMatch<T>> = Vec::with_capacity(m1.len() + m2.len());
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for p in m1.iter().chain(m2) {
        match seen.get(&(p.i, p.j)) {
            Some(&slot) => {
                if p.score > union[slot].score {
                    union[slot] = p.clone();
                }
            }
            None => {
                seen.insert((p.i, p.j), union.len());
                union.push(p.clone());
            }
        }
    }
    let scores: Vec<T> = union.iter().map(|p| p.score).collect();
    let bw = bandwidth.resolve(&scores)?;
    let clusters = mean_shift_1d(&scores, bw, params)?;
    let (mut retained, mut discarded): (Vec<_>, Vec<_>) = union
        .into_iter()
        .zip(&clusters.labels)
        .map(|(pair, &cluster)| ClusteredPair { pair, cluster })
        .partition(|p| p.cluster < top_k);
    let by_score = |a: &ClusteredPair<T>, b: &ClusteredPair<T>| b.pair.score.partial_cmp(&a.pair.score).expect("finite");
    retained.sort_by(by_score);
    discarded.sort_by(by_score);
    Ok(PairSelection {
        retained,
        discarded,
        centroids: clusters.centroids,
        bandwidth: bw,
    })
}

/// The saliency method that produced an explanation's word scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bti,
    VanillaGradients,
    IntegratedGradients { steps: usize },
    TfidfW2v,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Bti => f.write_str("bti"),
            Method::VanillaGradients => f.write_str("vanilla gradients"),
            Method::IntegratedGradients { steps } => write!(f, "integrated gradients ({steps} steps)"),
            Method::TfidfW2v => f.write_str("tf-idf + word vectors"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Explanation<T> {
    pub method: Method,
    pub config: ExplainConfig,
    /// Retained pairs, by score descending.
    pub pairs: Vec<ClusteredPair<T>>,
    pub discarded: Vec<ClusteredPair<T>>,
    pub centroids: Vec<T>,
    pub bandwidth: T,
    pub paragraph_a: WordLevelView<T>,
    pub paragraph_b: WordLevelView<T>,
}

impl<T: Scalar> Explanation<T> {
    /// Number of retained pairs.
    pub fn e(&self) -> usize {
        self.pairs.len()
    }

    pub fn retained_index_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.pair.i, p.pair.j)).collect()
    }

    pub(crate) fn assemble(
        method: Method,
        config: ExplainConfig,
        selection: PairSelection<T>,
        paragraph_a: WordLevelView<T>,
        paragraph_b: WordLevelView<T>,
    ) -> Self {
        Self {
            method,
            config,
            pairs: selection.retained,
            discarded: selection.discarded,
            centroids: selection.centroids,
            bandwidth: selection.bandwidth,
            paragraph_a,
            paragraph_b,
        }
    }
}

/// Which token-scoring method feeds the shared word-level tail.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum SaliencyMethod {
    #[default]
    Bti,
    VanillaGradients,
    IntegratedGradients(IgConfig),
}

impl SaliencyMethod {
    fn tag(&self) -> Method {
        match self {
            SaliencyMethod::Bti => Method::Bti,
            SaliencyMethod::VanillaGradients => Method::VanillaGradients,
            SaliencyMethod::IntegratedGradients(c) => Method::IntegratedGradients { steps: c.steps },
        }
    }
}

fn scores_and_latents<T: Scalar>(
    method: &SaliencyMethod,
    p_const: &TokenizedParagraph,
    p_diff: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
) -> Result<(Vec<T>, Tensor<T>)> {
    match method {
        SaliencyMethod::Bti => {
            let (map, latents) = saliency_pass(p_const, p_diff, w, cfg)?;
            Ok((map.scores, latents))
        }
        SaliencyMethod::VanillaGradients => {
            let anchor = paragraph_feature(p_const, w)?;
            let sg = similarity_gradient(&anchor, p_diff, w, GradientSite::Embedding(EmbeddingTap::PreNorm))?;
            Ok((baselines::gradient_norm_scores(&sg.gradient), sg.latents))
        }
        SaliencyMethod::IntegratedGradients(ig) => {
            let res = baselines::integrated_gradients(p_const, p_diff, w, ig)?;
            let latents = baselines::content_latents(p_diff, w)?;
            Ok((res.scores, latents))
        }
    }
}

fn prepare(tp: &TokenizedParagraph, w: &EncoderWeights<impl Scalar>, padding: Padding) -> Result<TokenizedParagraph> {
    match padding {
        Padding::Minimal => Ok(tp.trimmed()),
        Padding::Full => tp.padded_to(w.config.max_len),
    }
}

/// Explains the similarity of `p1` and `p2` with the chosen token-scoring method.
pub fn explain_with<T: Scalar>(
    p1: &TokenizedParagraph,
    p2: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
    method: &SaliencyMethod,
) -> Result<Explanation<T>> {
    cfg.validate()?;
    let p1 = prepare(p1, w, cfg.padding)?;
    let p2 = prepare(p2, w, cfg.padding)?;
    // p1's scores are taken with p2 held constant, and vice versa.
    let (s1, latents1) = scores_and_latents(method, &p2, &p1, w, cfg)?;
    let (s2, latents2) = scores_and_latents(method, &p1, &p2, w, cfg)?;
    let view1 = wordpiece_inverse(&p1, &latents1, &s1, cfg.latent_pooling, cfg.saliency_pooling)?;
    let view2 = wordpiece_inverse(&p2, &latents2, &s2, cfg.latent_pooling, cfg.saliency_pooling)?;
    let m1 = match_words(&view1, &view2, false)?;
    let m2 = match_words(&view2, &view1, true)?;
    let selection = top_words(&m1, &m2, cfg.top_k, &cfg.bandwidth, &cfg.mean_shift)?;
    Ok(Explanation::assemble(method.tag(), *cfg, selection, view1, view2))
}

/// Explains the similarity of two tokenized paragraphs.
pub fn explain<T: Scalar>(
    p1: &TokenizedParagraph,
    p2: &TokenizedParagraph,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
) -> Result<Explanation<T>> {
    explain_with(p1, p2, w, cfg, &SaliencyMethod::Bti)
}

/// Tokenizes both texts with the configured options and explains them.
pub fn explain_text<T: Scalar>(
    a: &str,
    b: &str,
    vocab: &Vocabulary,
    w: &EncoderWeights<T>,
    cfg: &ExplainConfig,
    method: &SaliencyMethod,
) -> Result<Explanation<T>> {
    let p1 = tokenize(a, vocab, w.config.max_len, cfg.tokenizer)?;
    let p2 = tokenize(b, vocab, w.config.max_len, cfg.tokenizer)?;
    explain_with(&p1, &p2, w, cfg, method)
}
