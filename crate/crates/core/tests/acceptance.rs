//! One line per acceptance criterion, then a failing assert if any failed.

mod common;

use std::time::Instant;

use bti::baselines::{integrated_gradients, IgConfig};
use bti::clustering::{mean_shift_1d, MeanShiftParams};
use bti::corpus::build_index;
use bti::encoder::{paragraph_feature, EmbeddingTap};
use bti::pipeline::{explain, token_saliency, ExplainConfig, SaliencyLayer, SaliencySource};
use bti::sanity::{compare_arms, randomization_test};
use bti::tensor::Tensor;
use bti::tokenizer::{
    reconstruct_word, split_words, tokenize, wordpiece_inverse, LatentPooling, SaliencyPooling, TokenizerOptions,
};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let vocab = vocab();
    let w = desk_weights(11);
    let mut r = rng(2024);
    let mut worst = 0f64;
    for _ in 0..10 {
        let n1 = r.random_range(3..7);
        let a = random_paragraph(&mut r, &vocab, n1);
        let b = random_paragraph(&mut r, &vocab, 4);
        let p1 = tok(&a, &vocab, &w);
        let p2 = tok(&b, &vocab, &w);
        let anchor = anchor_of(&p1, &w);
        let x = tap_activation(&p2, &w, EmbeddingTap::PreNorm);
        let ad = autodiff_gradient(&anchor, &p2, &w, &x, EmbeddingTap::PreNorm);
        let fd = numeric_gradient(&anchor, &p2, &w, &x, EmbeddingTap::PreNorm, 0..p2.len(), 1e-3);
        worst = worst.max(linf_relative(ad.data(), fd.data()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        worst <= 1e-3 && secs < 60.0,
        format!("max relative error {worst:.2e} over 10 pairs in {secs:.1}s"),
    )
}

fn saliency_oracle() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(5);
    let cfg = ExplainConfig::default();
    let mut worst = 0f64;
    for pair in pairs().iter().take(10) {
        let p1 = tok(&pair.a, &vocab, &w);
        let p2 = tok(&pair.b, &vocab, &w);
        let got = token_saliency(&p1, &p2, &w, &cfg).map_err(|e| e.to_string())?;
        // independent recomputation from numeric gradients
        let anchor = anchor_of(&p1, &w);
        let x = tap_activation(&p2, &w, EmbeddingTap::PreNorm);
        let q = p2.q();
        let g = numeric_gradient(&anchor, &p2, &w, &x, EmbeddingTap::PreNorm, 1..q + 1, 1e-4);
        let h = x.cols();
        let raw: Vec<f64> = (0..q)
            .map(|i| {
                (0..h)
                    .map(|k| {
                        let prod = x.row(i + 1)[k] * g.row(i)[k];
                        if prod > 0.0 {
                            prod
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expect: Vec<f64> = raw.iter().map(|v| (v - lo) / (hi - lo)).collect();
        worst = worst
            .max(linf_relative(&got.scores, &expect))
            .max(linf_relative(&got.raw, &raw));
    }
    ensure(worst <= 1e-3, format!("max relative deviation {worst:.2e} over 10 fixtures"))
}

fn ig_completeness() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(3);
    let cfg = IgConfig {
        steps: 512,
        ..IgConfig::default()
    };
    let mut worst = 0f64;
    for pair in pairs().iter().take(3) {
        let p1 = tok(&pair.a, &vocab, &w);
        let p2 = tok(&pair.b, &vocab, &w);
        let res = integrated_gradients(&p1, &p2, &w, &cfg).map_err(|e| e.to_string())?;
        let delta = res.cosine_input - res.cosine_baseline;
        let gap = (res.total_attribution() - delta).abs() / delta.abs();
        worst = worst.max(gap);
    }
    ensure(worst <= 0.01, format!("worst completeness gap {:.3}% at m=512", worst * 100.0))
}

fn self_explanation() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(9);
    let cfg = ExplainConfig::default();
    let texts = paragraphs();
    let mut worst_c = 0f64;
    let mut worst_s = 0f64;
    for t in texts.iter().take(20) {
        let p = tok(t, &vocab, &w);
        let e = explain(&p, &p, &w, &cfg).map_err(|e| e.to_string())?;
        for cp in &e.pairs {
            worst_c = worst_c.max((cp.pair.cosine - 1.0).abs());
            worst_s = worst_s.max((cp.pair.saliency_a - cp.pair.saliency_b).abs());
        }
    }
    ensure(
        worst_c <= 1e-5 && worst_s <= 1e-5,
        format!("max |c − 1| = {worst_c:.1e}, max |s¹ − s²| = {worst_s:.1e} over 20 paragraphs"),
    )
}

fn mean_shift_equivalence() -> Outcome {
    let params = MeanShiftParams::default();
    let worked = mean_shift_1d(&[0.9, 0.88, 0.5, 0.1, 0.09], 0.1, &params).map_err(|e| e.to_string())?;
    if worked.cluster_count() != 3 || worked.labels != mean_shift_oracle(&[0.9, 0.88, 0.5, 0.1, 0.09], 0.1, 0.5) {
        return Err(format!("worked example gave {:?}", worked.labels));
    }
    let mut r = rng(77);
    for k in 0..100 {
        let (pts, bw) = random_instance(&mut r);
        let got = mean_shift_1d(&pts, bw, &params).map_err(|e| e.to_string())?;
        let want = mean_shift_oracle(&pts, bw, params.merge_fraction);
        if got.labels != want {
            return Err(format!("instance {k}: {:?} vs oracle {:?}", got.labels, want));
        }
    }
    Ok("worked example → 3 clusters; 100/100 random instances match".into())
}

fn tokenizer_fidelity() -> Outcome {
    let vocab = vocab();
    let tp = tokenize("playing", &vocab, 16, TokenizerOptions::default()).map_err(|e| e.to_string())?;
    if tp.tokens != ["play", "##ing"] {
        return Err(format!("playing → {:?}", tp.tokens));
    }
    let lat = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let view = wordpiece_inverse(&tp.trimmed(), &lat, &[0.1, 0.8], LatentPooling::Mean, SaliencyPooling::Max)
        .map_err(|e| e.to_string())?;
    if view.saliencies != [0.8] || view.words != ["playing"] {
        return Err(format!("word saliency {:?}", view.saliencies));
    }
    let mut words = 0;
    for item in corpus() {
        let tp = tokenize(&item.description, &vocab, 128, TokenizerOptions::default()).map_err(|e| e.to_string())?;
        let expect = split_words(&item.description, TokenizerOptions::default());
        let back: Vec<String> = (0..tp.word_count()).map(|k| reconstruct_word(&tp, k)).collect();
        if back != expect {
            return Err(format!("{}: {:?} vs {:?}", item.id, back, expect));
        }
        words += back.len();
    }
    Ok(format!("playing → [play, ##ing], saliency 0.8; {words} corpus words round-trip"))
}

fn padding_invariance() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(21);
    let mut worst = 0f64;
    let texts = paragraphs();
    for t in texts.iter().take(20) {
        let tp = tok(t, &vocab, &w);
        let base = paragraph_feature(&tp, &w).map_err(|e| e.to_string())?;
        for len in [tp.q() + 2, 64, 128] {
            let f = paragraph_feature(&tp.padded_to(len).unwrap(), &w).map_err(|e| e.to_string())?;
            for (a, b) in f.data().iter().zip(base.data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst <= 1e-6, format!("max deviation {worst:.1e} over 3 pad lengths × 20 paragraphs"))
}

fn sanity_controls() -> Outcome {
    let vocab = vocab();
    let trained = desk_weights(100);
    let cfg = ExplainConfig::default();
    let ps = pairs();
    let same = compare_arms(&ps, &trained, &trained, &vocab, &cfg).map_err(|e| e.to_string())?;
    let identical = same.failures == 0
        && same.pairs.iter().all(|p| match &p.outcome {
            bti::sanity::PairOutcome::Compared(m) => m.jaccard == 1.0 && m.spearman_p1 == 1.0 && m.spearman_p2 == 1.0,
            _ => false,
        });
    let r1 = randomization_test(&ps, &trained, 7, &vocab, &cfg).map_err(|e| e.to_string())?;
    let r2 = randomization_test(&ps, &trained, 7, &vocab, &cfg).map_err(|e| e.to_string())?;
    let deterministic = serde_json::to_string(&r1).unwrap() == serde_json::to_string(&r2).unwrap();
    let a = desk_weights(1);
    let b = desk_weights(2);
    let diff = compare_arms(&ps, &a, &b, &vocab, &cfg).map_err(|e| e.to_string())?;
    ensure(
        identical && deterministic && diff.jaccard.count >= 20 && diff.jaccard.mean < 1.0,
        format!(
            "identical arms Jaccard 1.0: {identical}; seeded rerun bit-identical: {deterministic}; \
             two random arms mean Jaccard {:.3} over {} pairs",
            diff.jaccard.mean, diff.jaccard.count
        ),
    )
}

fn ablation_distinctness() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(13);
    let base = ExplainConfig::default();
    let variants = [
        (
            "last layer",
            ExplainConfig {
                saliency_layer: SaliencyLayer::Last,
                ..base
            },
        ),
        (
            "activations only",
            ExplainConfig {
                saliency_source: SaliencySource::ActivationOnly,
                ..base
            },
        ),
        (
            "gradients only",
            ExplainConfig {
                saliency_source: SaliencySource::GradientOnly,
                ..base
            },
        ),
    ];
    let fixtures = pairs();
    let mut found = Vec::new();
    for (name, cfg) in &variants {
        let mut differs = None;
        for (k, pair) in fixtures.iter().enumerate() {
            let p1 = tok(&pair.a, &vocab, &w);
            let p2 = tok(&pair.b, &vocab, &w);
            let d = token_saliency(&p1, &p2, &w, &base).map_err(|e| e.to_string())?;
            let v = token_saliency(&p1, &p2, &w, cfg).map_err(|e| e.to_string())?;
            if ordering(&d.scores) != ordering(&v.scores) {
                differs = Some(k);
                break;
            }
        }
        match differs {
            Some(k) => found.push(format!("{name}: fixture {k}")),
            None => return Err(format!("{name} orders tokens like default on every fixture")),
        }
    }
    Ok(found.join(", "))
}

fn nearest_exactness() -> Outcome {
    let vocab = vocab();
    let w = desk_weights(17);
    let items: Vec<_> = corpus().into_iter().take(10).collect();
    let index = build_index(&items, &w, &vocab, TokenizerOptions::default()).map_err(|e| e.to_string())?;
    let feats: Vec<Vec<f64>> = items
        .iter()
        .map(|i| paragraph_feature(&tok(&i.description, &vocab, &w), &w).unwrap().into_data())
        .collect();
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    for (s, seed) in items.iter().enumerate() {
        let mut brute: Vec<(usize, f64)> = (0..items.len())
            .filter(|&j| j != s)
            .map(|j| (j, cos(&feats[s], &feats[j])))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got = index.nearest(&seed.id, items.len() - 1).map_err(|e| e.to_string())?;
        if got.iter().any(|(id, _)| *id == seed.id) {
            return Err(format!("{} returned itself", seed.id));
        }
        let ids: Vec<&str> = got.iter().map(|(id, _)| id.as_str()).collect();
        let want: Vec<&str> = brute.iter().map(|&(j, _)| items[j].id.as_str()).collect();
        if ids != want || got.iter().zip(&brute).any(|((_, c), (_, b))| (c - b).abs() > 1e-12) {
            return Err(format!("seed {}: {:?} vs {:?}", seed.id, ids, want));
        }
    }
    Ok("10 seeds × 9 neighbours match brute force, seed excluded".into())
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("token saliency oracle", saliency_oracle),
        ("IG completeness", ig_completeness),
        ("self-explanation", self_explanation),
        ("mean-shift oracle equivalence", mean_shift_equivalence),
        ("tokenizer fidelity", tokenizer_fidelity),
        ("padding invariance", padding_invariance),
        ("sanity-harness controls", sanity_controls),
        ("ablation distinctness", ablation_distinctness),
        ("nearest-neighbour exactness", nearest_exactness),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
