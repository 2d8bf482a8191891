#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;

use bti::corpus::{ingest, ingest_pairs, CorpusItem, TextPair};
use bti::encoder::{embed, paragraph_feature, run_encoder, EmbeddingTap, EncoderConfig, EncoderWeights};
use bti::tensor::Tensor;
use bti::tokenizer::{tokenize, TokenizedParagraph, TokenizerOptions, Vocabulary};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn vocab() -> Vocabulary {
    Vocabulary::load(fixture("vocab.txt")).unwrap()
}

pub fn desk_weights(seed: u64) -> EncoderWeights<f64> {
    EncoderWeights::random_init(EncoderConfig::default(), seed).unwrap()
}

pub fn corpus() -> Vec<CorpusItem> {
    ingest(fixture("corpus.jsonl")).unwrap()
}

pub fn pairs() -> Vec<TextPair> {
    ingest_pairs(fixture("pairs.jsonl")).unwrap()
}

/// Every distinct paragraph in the fixtures, corpus first.
pub fn paragraphs() -> Vec<String> {
    let mut out: Vec<String> = corpus().into_iter().map(|i| i.description).collect();
    for p in pairs() {
        for t in [p.a, p.b] {
            if !out.contains(&t) {
                out.push(t);
            }
        }
    }
    out
}

pub fn tok(text: &str, vocab: &Vocabulary, w: &EncoderWeights<f64>) -> TokenizedParagraph {
    tokenize(text, vocab, w.config.max_len, TokenizerOptions::default())
        .unwrap()
        .trimmed()
}

/// Random paragraph of `n` words drawn from the fixture vocabulary's whole words.
pub fn random_paragraph(rng: &mut ChaCha8Rng, vocab: &Vocabulary, n: usize) -> String {
    let words: Vec<&str> = (0..vocab.len() as u32)
        .filter_map(|id| vocab.token(id))
        .filter(|t| t.len() > 2 && t.chars().all(|c| c.is_ascii_lowercase()))
        .collect();
    (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cos64(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `cosine(anchor, F_p)` with `input` as the activation at `tap`, forward only.
pub fn cosine_at(
    anchor: &Tensor<f64>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<f64>,
    input: Tensor<f64>,
    tap: EmbeddingTap,
) -> f64 {
    let mut run = run_encoder(w, tp, input, tap, false).unwrap();
    let f = run.feature().unwrap();
    cos64(anchor.data(), run.graph.value(f).data())
}

/// Activation at `tap` for every wrapped position.
pub fn tap_activation(tp: &TokenizedParagraph, w: &EncoderWeights<f64>, tap: EmbeddingTap) -> Tensor<f64> {
    let full = embed(tp, w).unwrap().full;
    match tap {
        EmbeddingTap::PreNorm => full,
        EmbeddingTap::PostNorm => {
            let run = run_encoder(w, tp, full, EmbeddingTap::PreNorm, false).unwrap();
            run.graph.value(run.normed_embedding).clone()
        }
    }
}

/// Reverse-mode `∂cosine/∂input` over every wrapped position.
pub fn autodiff_gradient(
    anchor: &Tensor<f64>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<f64>,
    input: &Tensor<f64>,
    tap: EmbeddingTap,
) -> Tensor<f64> {
    let mut run = run_encoder(w, tp, input.clone(), tap, true).unwrap();
    let f = run.feature().unwrap();
    let a = run.graph.constant_owned(anchor.clone());
    let c = run.graph.cosine(a, f).unwrap();
    run.graph.gradient(c, run.input).unwrap()
}

/// Central differences of `cosine(anchor, F_p)` over rows `rows` of the input.
pub fn numeric_gradient(
    anchor: &Tensor<f64>,
    tp: &TokenizedParagraph,
    w: &EncoderWeights<f64>,
    input: &Tensor<f64>,
    tap: EmbeddingTap,
    rows: std::ops::Range<usize>,
    eps: f64,
) -> Tensor<f64> {
    let h = input.cols();
    let mut g = Tensor::zeros(&[rows.len(), h]);
    for (r, i) in rows.enumerate() {
        for k in 0..h {
            let mut plus = input.clone();
            plus.data_mut()[i * h + k] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i * h + k] -= eps;
            let d = (cosine_at(anchor, tp, w, plus, tap) - cosine_at(anchor, tp, w, minus, tap)) / (2.0 * eps);
            g.data_mut()[r * h + k] = d;
        }
    }
    g
}

/// `max |a − b| / max |b|`.
pub fn linf_relative(a: &[f64], b: &[f64]) -> f64 {
    let err = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

pub fn anchor_of(tp: &TokenizedParagraph, w: &EncoderWeights<f64>) -> Tensor<f64> {
    paragraph_feature(tp, w).unwrap()
}

/// Indices sorted by score descending, ties by index.
pub fn ordering(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Exact flat-kernel mean shift in rationals: every point climbs to the fixed
/// point of `x ← mean{y : |y − x| ≤ bw}`, modes within `merge · bw` of each
/// other are joined (transitively), and clusters are labelled by centroid
/// descending.
pub fn mean_shift_oracle(points: &[f64], bandwidth: f64, merge: f64) -> Vec<usize> {
    let q = |x: f64| BigRational::from_float(x).unwrap();
    let xs: Vec<BigRational> = points.iter().map(|&x| q(x)).collect();
    let bw = q(bandwidth);
    let radius = q(merge) * &bw;
    let window = |x: &BigRational| -> Vec<usize> {
        (0..xs.len()).filter(|&i| (&xs[i] - x).abs() <= bw).collect()
    };
    let modes: Vec<BigRational> = xs
        .iter()
        .map(|x0| {
            let mut x = x0.clone();
            let mut prev: Option<Vec<usize>> = None;
            for _ in 0..10_000 {
                let win = window(&x);
                if prev.as_ref() == Some(&win) {
                    break;
                }
                let sum = win.iter().fold(BigRational::zero(), |acc, &i| acc + &xs[i]);
                x = sum / BigRational::from_integer(BigInt::from(win.len()));
                prev = Some(win);
            }
            x
        })
        .collect();
    let n = modes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for a in 0..n {
        for b in a + 1..n {
            if (&modes[a] - &modes[b]).abs() <= radius {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        members.entry(r).or_default().push(i);
    }
    let mut clusters: Vec<(BigRational, Vec<usize>)> = members
        .into_values()
        .map(|m| {
            let s = m.iter().fold(BigRational::zero(), |acc, &i| acc + &modes[i]);
            (s / BigRational::from_integer(BigInt::from(m.len())), m)
        })
        .collect();
    clusters.sort_by(|a, b| b.0.cmp(&a.0));
    let mut labels = vec![0; n];
    for (k, (_, m)) in clusters.iter().enumerate() {
        for &i in m {
            labels[i] = k;
        }
    }
    labels
}

/// Random 1-D instance with `n ∈ 1..=20` points, some deliberately clumped.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let n = rng.random_range(1..=20);
    let centres: Vec<f64> = (0..rng.random_range(1..=4)).map(|_| rng.random::<f64>()).collect();
    let pts = (0..n)
        .map(|_| {
            let c = centres[rng.random_range(0..centres.len())];
            c + rng.random_range(-0.05..0.05)
        })
        .collect();
    (pts, rng.random_range(0.02..0.3))
}
