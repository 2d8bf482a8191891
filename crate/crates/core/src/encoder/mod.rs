//! A post-layer-norm BERT-style encoder built on the autodiff graph.
//!
//! The embedding activation `E = T[id] + O[pos] + G[0]` enters the graph as an
//! input leaf, ahead of the embedding layer norm, so gradients of anything
//! downstream can be taken with respect to it.

pub(crate) mod format;

pub use format::{WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BtiError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::TokenizedParagraph;

/// Standard deviation of the normal draw used by [`EncoderWeights::random_init`].
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub max_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale encoder used for random initialization and tests.
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            hidden: 64,
            layers: 2,
            heads: 4,
            intermediate: 256,
            max_len: 128,
            layer_norm_eps: 1e-12,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("intermediate", self.intermediate),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(BtiError::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(BtiError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 4 {
            return Err(BtiError::Config(format!("max_len {} is below 4", self.max_len)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(BtiError::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Parameters of one transformer block. Projection matrices are stored
/// `[in × out]`, so a projection is `x · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub query: Tensor<T>,
    pub query_bias: Tensor<T>,
    pub key: Tensor<T>,
    pub key_bias: Tensor<T>,
    pub value: Tensor<T>,
    pub value_bias: Tensor<T>,
    pub attn_out: Tensor<T>,
    pub attn_out_bias: Tensor<T>,
    pub attn_ln_scale: Tensor<T>,
    pub attn_ln_shift: Tensor<T>,
    pub ffn_in: Tensor<T>,
    pub ffn_in_bias: Tensor<T>,
    pub ffn_out: Tensor<T>,
    pub ffn_out_bias: Tensor<T>,
    pub ffn_ln_scale: Tensor<T>,
    pub ffn_ln_shift: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn arrays(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("query", &self.query),
            ("query_bias", &self.query_bias),
            ("key", &self.key),
            ("key_bias", &self.key_bias),
            ("value", &self.value),
            ("value_bias", &self.value_bias),
            ("attn_out", &self.attn_out),
            ("attn_out_bias", &self.attn_out_bias),
            ("attn_ln.scale", &self.attn_ln_scale),
            ("attn_ln.shift", &self.attn_ln_shift),
            ("ffn_in", &self.ffn_in),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out", &self.ffn_out),
            ("ffn_out_bias", &self.ffn_out_bias),
            ("ffn_ln.scale", &self.ffn_ln_scale),
            ("ffn_ln.shift", &self.ffn_ln_shift),
        ]
    }

    fn expected_shapes(h: usize, i: usize) -> [Vec<usize>; 16] {
        [
            vec![h, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h, h],
            vec![h],
            vec![h],
            vec![h],
            vec![h, i],
            vec![i],
            vec![i, h],
            vec![h],
            vec![h],
            vec![h],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T> {
    pub config: EncoderConfig,
    /// Token table `[V × h]`.
    pub token: Tensor<T>,
    /// Position table `[N × h]`.
    pub position: Tensor<T>,
    /// Segment table `[2 × h]`; only segment 0 is used.
    pub segment: Tensor<T>,
    pub embedding_ln_scale: Tensor<T>,
    pub embedding_ln_shift: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
}

impl<T: Scalar> EncoderWeights<T> {
    /// Draws every table, matrix, bias and layer-norm shift from
    /// `N(0, 0.02²)`; layer-norm scales start at one.
    pub fn random_init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let (h, i) = (config.hidden, config.intermediate);
        let ones = |n: usize| Tensor::full(&[n], T::one());
        let token = draw(&[config.vocab_size, h]);
        let position = draw(&[config.max_len, h]);
        let segment = draw(&[2, h]);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                query: draw(&[h, h]),
                query_bias: draw(&[h]),
                key: draw(&[h, h]),
                key_bias: draw(&[h]),
                value: draw(&[h, h]),
                value_bias: draw(&[h]),
                attn_out: draw(&[h, h]),
                attn_out_bias: draw(&[h]),
                attn_ln_scale: ones(h),
                attn_ln_shift: draw(&[h]),
                ffn_in: draw(&[h, i]),
                ffn_in_bias: draw(&[i]),
                ffn_out: draw(&[i, h]),
                ffn_out_bias: draw(&[h]),
                ffn_ln_scale: ones(h),
                ffn_ln_shift: draw(&[h]),
            })
            .collect();
        Ok(Self {
            config,
            token,
            position,
            segment,
            embedding_ln_scale: ones(h),
            embedding_ln_shift: draw(&[h]),
            layers,
        })
    }

    /// Checks every array against the configuration and for finiteness.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.layers {
            return Err(BtiError::DimensionMismatch(format!(
                "config declares {} layers, weights hold {}",
                c.layers,
                self.layers.len()
            )));
        }
        let h = c.hidden;
        let mut expected = vec![
            vec![c.vocab_size, h],
            vec![c.max_len, h],
            vec![2, h],
            vec![h],
            vec![h],
        ];
        for _ in 0..c.layers {
            expected.extend(LayerWeights::<T>::expected_shapes(h, c.intermediate));
        }
        for ((name, t), shape) in self.arrays().into_iter().zip(expected) {
            if t.shape() != shape.as_slice() {
                return Err(BtiError::DimensionMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(BtiError::NonFinite(format!("weights array {name}")));
            }
        }
        Ok(())
    }

    /// First 8 bytes of the SHA-256 of the serialized weights.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn cast<U: Scalar>(&self) -> EncoderWeights<U> {
        let l = |w: &LayerWeights<T>| LayerWeights {
            query: w.query.cast(),
            query_bias: w.query_bias.cast(),
            key: w.key.cast(),
            key_bias: w.key_bias.cast(),
            value: w.value.cast(),
            value_bias: w.value_bias.cast(),
            attn_out: w.attn_out.cast(),
            attn_out_bias: w.attn_out_bias.cast(),
            attn_ln_scale: w.attn_ln_scale.cast(),
            attn_ln_shift: w.attn_ln_shift.cast(),
            ffn_in: w.ffn_in.cast(),
            ffn_in_bias: w.ffn_in_bias.cast(),
            ffn_out: w.ffn_out.cast(),
            ffn_out_bias: w.ffn_out_bias.cast(),
            ffn_ln_scale: w.ffn_ln_scale.cast(),
            ffn_ln_shift: w.ffn_ln_shift.cast(),
        };
        EncoderWeights {
            config: self.config,
            token: self.token.cast(),
            position: self.position.cast(),
            segment: self.segment.cast(),
            embedding_ln_scale: self.embedding_ln_scale.cast(),
            embedding_ln_shift: self.embedding_ln_shift.cast(),
            layers: self.layers.iter().map(l).collect(),
        }
    }
}

/// The embedding-layer activation of a wrapped paragraph.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingActivation<T> {
    /// `[len × h]` over every wrapped position.
    pub full: Tensor<T>,
    pub q: usize,
}

impl<T: Scalar> EmbeddingActivation<T> {
    /// `[q × h]` rows of the content tokens.
    pub fn content(&self) -> Tensor<T> {
        self.full
            .slice_rows(1, self.q + 1)
            .expect("content rows are in range")
    }
}

/// `E[i] = T[id_i] + O[i] + G[0]` for every wrapped position.
pub fn embed<T: Scalar>(tp: &TokenizedParagraph, w: &EncoderWeights<T>) -> Result<EmbeddingActivation<T>> {
    let c = &w.config;
    if tp.len() > c.max_len {
        return Err(BtiError::SequenceTooLong {
            len: tp.len(),
            max_len: c.max_len,
        });
    }
    let h = c.hidden;
    let mut data = Vec::with_capacity(tp.len() * h);
    let seg = w.segment.row(0);
    for (pos, &id) in tp.wrapped_ids.iter().enumerate() {
        if id as usize >= c.vocab_size {
            return Err(BtiError::TokenOutOfRange {
                id,
                vocab_size: c.vocab_size,
            });
        }
        let tok = w.token.row(id as usize);
        let p = w.position.row(pos);
        data.extend((0..h).map(|k| tok[k] + p[k] + seg[k]));
    }
    Ok(EmbeddingActivation {
        full: Tensor::matrix(tp.len(), h, data)?,
        q: tp.q(),
    })
}

/// Where the graph's input leaf sits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTap {
    /// The raw sum of the embedding tables, before the embedding layer norm.
    #[default]
    PreNorm,
    /// The embedding layer-norm output that feeds the first block.
    PostNorm,
}

/// A recorded forward pass through the encoder.
pub struct EncoderRun<'a, T: Scalar> {
    pub graph: Graph<'a, T>,
    /// The input leaf.
    pub input: Var,
    /// Pre-norm embedding activation, absent when the input is post-norm.
    pub embedding: Option<Var>,
    pub normed_embedding: Var,
    pub layer_outputs: Vec<Var>,
    pub hidden: Var,
    pub q: usize,
}

impl<T: Scalar> EncoderRun<'_, T> {
    /// Appends the mean of the content-token outputs and returns its node.
    pub fn feature(&mut self) -> Result<Var> {
        if self.q == 0 {
            return Err(BtiError::InvalidParameter("paragraph has no content tokens".into()));
        }
        self.graph.mean_rows(self.hidden, 1, self.q + 1)
    }

    pub fn hidden_states(&self) -> &Tensor<T> {
        self.graph.value(self.hidden)
    }
}

fn ensure_finite<T: Scalar>(t: &Tensor<T>, what: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(BtiError::NonFinite(what()))
    }
}

fn layer_norm_affine<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    scale: &'a Tensor<T>,
    shift: &'a Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let n = g.layer_norm(x, eps)?;
    let s = g.constant(scale);
    let b = g.constant(shift);
    let y = g.mul_row(n, s)?;
    g.add_row(y, b)
}

fn linear<'a, T: Scalar>(g: &mut Graph<'a, T>, x: Var, w: &'a Tensor<T>, b: &'a Tensor<T>) -> Result<Var> {
    let wv = g.constant(w);
    let bv = g.constant(b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

fn transformer_block<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    x: Var,
    lw: &'a LayerWeights<T>,
    config: &EncoderConfig,
    mask: &[bool],
) -> Result<Var> {
    let d = config.head_dim();
    let q = linear(g, x, &lw.query, &lw.query_bias)?;
    let k = linear(g, x, &lw.key, &lw.key_bias)?;
    let v = linear(g, x, &lw.value, &lw.value_bias)?;
    let inv_sqrt_d = T::one() / T::from_usize(d).expect("head dim fits").sqrt();
    let mut heads = Vec::with_capacity(config.heads);
    for a in 0..config.heads {
        let (lo, hi) = (a * d, (a + 1) * d);
        let qa = g.slice_cols(q, lo, hi)?;
        let ka = g.slice_cols(k, lo, hi)?;
        let va = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(ka)?;
        let scores = g.matmul(qa, kt)?;
        let scores = g.scale(scores, inv_sqrt_d)?;
        let probs = g.softmax(scores, Some(mask.to_vec()))?;
        heads.push(g.matmul(probs, va)?);
    }
    let ctx = g.concat_cols(heads)?;
    let attn = linear(g, ctx, &lw.attn_out, &lw.attn_out_bias)?;
    let res = g.add(x, attn)?;
    let x1 = layer_norm_affine(g, res, &lw.attn_ln_scale, &lw.attn_ln_shift, config.layer_norm_eps)?;
    let ff = linear(g, x1, &lw.ffn_in, &lw.ffn_in_bias)?;
    let ff = g.gelu(ff)?;
    let ff = linear(g, ff, &lw.ffn_out, &lw.ffn_out_bias)?;
    let res = g.add(x1, ff)?;
    layer_norm_affine(g, res, &lw.ffn_ln_scale, &lw.ffn_ln_shift, config.layer_norm_eps)
}

/// Records a forward pass. `input` is the activation at `tap` for every
/// wrapped position of `tp`; it becomes the graph's only input leaf.
pub fn run_encoder<'a, T: Scalar>(
    w: &'a EncoderWeights<T>,
    tp: &TokenizedParagraph,
    input: Tensor<T>,
    tap: EmbeddingTap,
    requires_grad: bool,
) -> Result<EncoderRun<'a, T>> {
    let c = &w.config;
    if input.shape() != [tp.len(), c.hidden] {
        return Err(BtiError::Shape {
            op: "run_encoder",
            left: vec![tp.len(), c.hidden],
            right: input.shape().to_vec(),
        });
    }
    let mask = tp.attention_mask();
    let mut g = Graph::new();
    let leaf = g.input(input, requires_grad);
    let (embedding, normed) = match tap {
        EmbeddingTap::PreNorm => {
            let n = layer_norm_affine(
                &mut g,
                leaf,
                &w.embedding_ln_scale,
                &w.embedding_ln_shift,
                c.layer_norm_eps,
            )?;
            (Some(leaf), n)
        }
        EmbeddingTap::PostNorm => (None, leaf),
    };
    ensure_finite(g.value(normed), || "embedding layer norm".into())?;
    let mut x = normed;
    let mut layer_outputs = Vec::with_capacity(w.layers.len());
    for (l, lw) in w.layers.iter().enumerate() {
        x = transformer_block(&mut g, x, lw, c, &mask)?;
        ensure_finite(g.value(x), || format!("encoder layer {}", l + 1))?;
        layer_outputs.push(x);
    }
    Ok(EncoderRun {
        graph: g,
        input: leaf,
        embedding,
        normed_embedding: normed,
        layer_outputs,
        hidden: x,
        q: tp.q(),
    })
}

/// Hidden states `B(p)` of shape `[len × h]`.
pub fn encode<T: Scalar>(
    ea: &EmbeddingActivation<T>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<T>,
) -> Result<Tensor<T>> {
    let run = run_encoder(w, tp, ea.full.clone(), EmbeddingTap::PreNorm, false)?;
    Ok(run.hidden_states().clone())
}

/// Mean of the content-token rows `1..=q` of the hidden states.
pub fn feature_vector<T: Scalar>(hidden: &Tensor<T>, q: usize) -> Result<Tensor<T>> {
    if q == 0 {
        return Err(BtiError::InvalidParameter("feature vector needs q ≥ 1".into()));
    }
    if hidden.shape().len() != 2 || hidden.rows() < q + 2 {
        return Err(BtiError::Shape {
            op: "feature_vector",
            left: hidden.shape().to_vec(),
            right: vec![q],
        });
    }
    let mut acc = vec![0f64; hidden.cols()];
    for i in 1..=q {
        for (a, v) in acc.iter_mut().zip(hidden.row(i)) {
            *a += v.to_f64_lossy();
        }
    }
    Ok(Tensor::vector(
        acc.into_iter().map(|a| T::from_f64_lossy(a / q as f64)).collect(),
    ))
}

/// Tokenized paragraph → pooled feature vector.
pub fn paragraph_feature<T: Scalar>(tp: &TokenizedParagraph, w: &EncoderWeights<T>) -> Result<Tensor<T>> {
    let ea = embed(tp, w)?;
    let hidden = encode(&ea, tp, w)?;
    feature_vector(&hidden, tp.q())
}
