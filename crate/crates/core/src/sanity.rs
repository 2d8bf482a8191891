//! Parameter randomization test: explanations under two weight settings
//! and how far they diverge.

use std::collections::HashSet;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TextPair;
use crate::encoder::EncoderWeights;
use crate::error::Result;
use crate::pipeline::{explain_text, ExplainConfig, Explanation, SaliencyMethod};
use crate::scalar::Scalar;
use crate::tokenizer::Vocabulary;

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard<K: Eq + Hash>(a: &[K], b: &[K]) -> f64 {
    let a: HashSet<&K> = a.iter().collect();
    let b: HashSet<&K> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation. When either side has no rank variance the
/// result is `1.0` if the rank vectors agree and `0.0` otherwise.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length sequences");
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if ra == rb { 1.0 } else { 0.0 };
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub retained_a: Vec<(usize, usize)>,
    pub retained_b: Vec<(usize, usize)>,
    pub jaccard: f64,
    /// Rank agreement of the first paragraph's word saliencies.
    pub spearman_p1: f64,
    pub spearman_p2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOutcome {
    Compared(PairMetrics),
    Failed { arm: String, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub index: usize,
    pub id: Option<String>,
    pub outcome: PairOutcome,
}

/// Mean and population standard deviation over the compared pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            count: values.len(),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub fingerprint_a: u64,
    pub fingerprint_b: u64,
    /// Seed of the randomized arm, if one was generated.
    pub seed: Option<u64>,
    pub pairs: Vec<PairReport>,
    pub failures: usize,
    pub jaccard: Aggregate,
    pub spearman_p1: Aggregate,
    pub spearman_p2: Aggregate,
}

fn saliencies<T: Scalar>(e: &Explanation<T>) -> (Vec<f64>, Vec<f64>) {
    let f = |v: &[T]| v.iter().map(|s| s.to_f64_lossy()).collect();
    (f(&e.paragraph_a.saliencies), f(&e.paragraph_b.saliencies))
}

fn compare_pair<T: Scalar>(
    pair: &TextPair,
    wa: &EncoderWeights<T>,
    wb: &EncoderWeights<T>,
    vocab: &Vocabulary,
    cfg: &ExplainConfig,
) -> PairOutcome {
    let run = |w| explain_text(&pair.a, &pair.b, vocab, w, cfg, &SaliencyMethod::Bti);
    let ea = match run(wa) {
        Ok(e) => e,
        Err(e) => {
            return PairOutcome::Failed {
                arm: "a".into(),
                error: e.to_string(),
            }
        }
    };
    let eb = match run(wb) {
        Ok(e) => e,
        Err(e) => {
            return PairOutcome::Failed {
                arm: "b".into(),
                error: e.to_string(),
            }
        }
    };
    let (a1, a2) = saliencies(&ea);
    let (b1, b2) = saliencies(&eb);
    let retained_a = ea.retained_index_pairs();
    let retained_b = eb.retained_index_pairs();
    PairOutcome::Compared(PairMetrics {
        jaccard: jaccard(&retained_a, &retained_b),
        spearman_p1: spearman(&a1, &b1),
        spearman_p2: spearman(&a2, &b2),
        retained_a,
        retained_b,
    })
}

/// Explains every pair under both weight settings and compares the results.
/// A pair on which either arm fails is recorded and left out of the aggregates.
pub fn compare_arms<T: Scalar>(
    pairs: &[TextPair],
    arm_a: &EncoderWeights<T>,
    arm_b: &EncoderWeights<T>,
    vocab: &Vocabulary,
    cfg: &ExplainConfig,
) -> Result<SanityReport> {
    if pairs.is_empty() {
        return Err(crate::BtiError::EmptyCorpus);
    }
    cfg.validate()?;
    let reports: Vec<PairReport> = pairs
        .par_iter()
        .enumerate()
        .map(|(index, p)| PairReport {
            index,
            id: p.id.clone(),
            outcome: compare_pair(p, arm_a, arm_b, vocab, cfg),
        })
        .collect();
    let metrics: Vec<&PairMetrics> = reports
        .iter()
        .filter_map(|r| match &r.outcome {
            PairOutcome::Compared(m) => Some(m),
            PairOutcome::Failed { .. } => None,
        })
        .collect();
    let agg = |f: fn(&PairMetrics) -> f64| Aggregate::of(&metrics.iter().map(|m| f(m)).collect::<Vec<_>>());
    Ok(SanityReport {
        fingerprint_a: arm_a.fingerprint(),
        fingerprint_b: arm_b.fingerprint(),
        seed: None,
        failures: reports.len() - metrics.len(),
        jaccard: agg(|m| m.jaccard),
        spearman_p1: agg(|m| m.spearman_p1),
        spearman_p2: agg(|m| m.spearman_p2),
        pairs: reports,
    })
}

/// Trained weights against `random_init(trained.config, seed)`.
pub fn randomization_test<T: Scalar>(
    pairs: &[TextPair],
    trained: &EncoderWeights<T>,
    seed: u64,
    vocab: &Vocabulary,
    cfg: &ExplainConfig,
) -> Result<SanityReport> {
    let random = EncoderWeights::random_init(trained.config, seed)?;
    let mut report = compare_arms(pairs, trained, &random, vocab, cfg)?;
    report.seed = Some(seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_set_arithmetic() {
        assert_eq!(jaccard(&[(1, 2), (3, 4)], &[(1, 2), (5, 6)]), 1.0 / 3.0);
        assert_eq!(jaccard::<(usize, usize)>(&[], &[]), 1.0);
        assert_eq!(jaccard(&[(1, 2)], &[(1, 2), (1, 2)]), 1.0);
        assert_eq!(jaccard(&[(1, 2)], &[(2, 1)]), 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[0.3, 0.1, 0.3, 0.2]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[0.1, 0.5, 0.9], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(spearman(&[0.1, 0.5, 0.9], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[0.5, 0.5], &[0.5, 0.5]), 1.0);
        assert_eq!(spearman(&[0.5, 0.5], &[0.1, 0.9]), 0.0);
        assert_eq!(spearman(&[0.7], &[0.2]), 1.0);
        let a = [0.1, 0.4, 0.2, 0.8, 0.5];
        let b = [0.3, 0.1, 0.2, 0.9, 0.6];
        assert_eq!(spearman(&a, &b), spearman(&b, &a));
        // d² = 4 + 4 → 1 − 6·8/(5·24)
        assert!((spearman(&a, &b) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn aggregate_moments() {
        let a = Aggregate::of(&[1.0, 0.0, 0.5, 0.5]);
        assert_eq!(a.count, 4);
        assert_eq!(a.mean, 0.5);
        assert!((a.std - 0.125f64.sqrt()).abs() < 1e-15);
        assert!(Aggregate::of(&[]).mean.is_nan());
    }
}
