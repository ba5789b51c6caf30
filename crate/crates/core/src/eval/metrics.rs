//! Sentence-level ranking, retrieval metrics and seeded aggregation.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::SentenceId;

/// Reciprocal rank, recall at k and precision at k for one query.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub rr: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Collapses example scores to sentences: each sentence takes the maximum
/// over its maskings and is relevant when any masking is.
pub fn sentence_level(scored: &[(SentenceId, f64, bool)]) -> Vec<(SentenceId, f64, bool)> {
    let mut by_sentence: BTreeMap<SentenceId, (f64, bool)> = BTreeMap::new();
    for &(s, score, relevant) in scored {
        by_sentence
            .entry(s)
            .and_modify(|e| {
                e.0 = e.0.max(score);
                e.1 |= relevant;
            })
            .or_insert((score, relevant));
    }
    by_sentence.into_iter().map(|(s, (score, rel))| (s, score, rel)).collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d1_049b_133e_b8eb);
    x ^ (x >> 31)
}

/// Pseudo-random tie-break key for a sentence, fixed per (seed, method,
/// query). Being a function of the sentence rather than of the list, it
/// orders any subset of sentences consistently with the full set.
pub fn tie_key(seed: u64, method: &str, query: u32, sentence: SentenceId) -> u64 {
    let mut h = splitmix64(seed);
    for b in method.bytes() {
        h = splitmix64(h ^ b as u64);
    }
    h = splitmix64(h ^ query as u64);
    splitmix64(h ^ sentence.0 as u64)
}

/// Orders sentences by descending score, ties by ascending key.
pub fn rank_sentences(sentences: &mut [(SentenceId, f64, bool)], key: impl Fn(SentenceId) -> u64) {
    sentences.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| key(a.0).cmp(&key(b.0))));
}

/// Metrics of a ranked relevance list at cutoff `k`.
pub fn metrics(ranked_relevance: &[bool], k: usize) -> Result<QueryMetrics> {
    let n_rel = ranked_relevance.iter().filter(|&&r| r).count();
    if n_rel == 0 {
        return Err(Error::InvalidInput("query has no relevant candidates".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let first = ranked_relevance.iter().position(|&r| r).expect("n_rel > 0");
    let hits = ranked_relevance.iter().take(k).filter(|&&r| r).count();
    Ok(QueryMetrics {
        rr: 1.0 / (first + 1) as f64,
        recall: hits as f64 / n_rel as f64,
        precision: hits as f64 / k as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over subsamples.
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mrr: MeanStd,
    pub recall: MeanStd,
    pub precision: MeanStd,
}

/// Indices of the `m` queries in each of `n` seeded subsamples.
pub fn subsamples(slice_len: usize, n: usize, m: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m > slice_len {
        return Err(Error::InvalidInput(format!(
            "cannot draw {m} queries from a slice of {slice_len}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("subsample count and size must be positive".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut idx = sample(&mut rng, slice_len, m).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Averages per-query metrics within each subsample, then reports mean and
/// standard deviation across subsamples.
pub fn aggregate(per_query: &[QueryMetrics], n: usize, m: usize, seed: u64) -> Result<Summary> {
    let draws = subsamples(per_query.len(), n, m, seed)?;
    let mut rr = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut prec = Vec::with_capacity(n);
    for idx in draws {
        let avg = |f: fn(&QueryMetrics) -> f64| idx.iter().map(|&i| f(&per_query[i])).sum::<f64>() / m as f64;
        rr.push(avg(|q| q.rr));
        rec.push(avg(|q| q.recall));
        prec.push(avg(|q| q.precision));
    }
    Ok(Summary {
        mrr: mean_std(&rr),
        recall: mean_std(&rec),
        precision: mean_std(&prec),
    })
}
