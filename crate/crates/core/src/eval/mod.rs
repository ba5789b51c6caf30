//! Reranking evaluation: per-query candidate sets, learnedness slices,
//! sentence-level ranking and retrieval metrics.

mod metrics;
mod report;

pub use metrics::{
    aggregate, metrics, rank_sentences, sentence_level, subsamples, tie_key, MeanStd, QueryMetrics, Summary,
};
pub use report::{EvalReport, ReportRow};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bm25::{tokenize_for_bm25, Bm25Index};
use crate::error::{Error, Result};
use crate::model::{answer_correct, decode_answers, Blocks, Transformer, Vocab};
use crate::synthgen::{DatasetBundle, ExampleId, Fact, MaskedExample, SentenceId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Proponent,
    Bm25,
    SameTarget,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub bm25_top_k: usize,
    pub same_target: usize,
    pub random: usize,
    pub seed: u64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            bm25_top_k: 100,
            same_target: 100,
            random: 100,
            seed: 0,
        }
    }
}

/// Reranking pool for one query, in ascending example-id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query: ExampleId,
    pub candidates: Vec<ExampleId>,
    /// Which pools contributed each candidate, parallel to `candidates`.
    pub sources: Vec<Vec<Source>>,
}

impl CandidateSet {
    pub fn members_of(&self, source: Source) -> impl Iterator<Item = ExampleId> + '_ {
        self.candidates
            .iter()
            .zip(&self.sources)
            .filter(move |(_, s)| s.contains(&source))
            .map(|(c, _)| *c)
    }
}

fn query_fact<'a>(bundle: &'a DatasetBundle, query: &MaskedExample) -> Result<&'a Fact> {
    let ann = query
        .facts
        .first()
        .ok_or_else(|| Error::Validation(format!("query {} has no fact annotation", query.example_id)))?;
    bundle
        .fact(ann.fact_id)
        .ok_or_else(|| Error::Validation(format!("query {} references unknown fact {}", query.example_id, ann.fact_id)))
}

/// True when one of `candidate`'s answers is the query's answer string.
pub fn shares_target(query: &MaskedExample, candidate: &MaskedExample) -> bool {
    let target = query.output.trim();
    candidate.answers().iter().any(|a| *a == target)
}

fn query_rng(seed: u64, query: ExampleId, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (query.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// Proponents, BM25 top-k, a same-target sample and a uniform sample of the
/// attribution set. The samples depend only on `config.seed` and the query.
pub fn build_candidate_set(
    query: &MaskedExample,
    bundle: &DatasetBundle,
    index: &Bm25Index,
    config: &CandidateConfig,
) -> Result<CandidateSet> {
    let fact = query_fact(bundle, query)?;
    let proponents = bundle
        .proponents_of(fact.id)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Validation(format!("query {} has no proponents", query.example_id)))?;
    let mut sources: BTreeMap<ExampleId, BTreeSet<Source>> = BTreeMap::new();
    let mut add = |id: ExampleId, s: Source| {
        sources.entry(id).or_default().insert(s);
    };
    for &p in proponents {
        add(p, Source::Proponent);
    }
    for (id, _) in index.top_k(&tokenize_for_bm25(query), config.bm25_top_k) {
        add(id, Source::Bm25);
    }
    let same: Vec<ExampleId> = bundle
        .attribution
        .iter()
        .filter(|c| shares_target(query, c))
        .map(|c| c.example_id)
        .collect();
    let mut rng = query_rng(config.seed, query.example_id, 1);
    for i in sample(&mut rng, same.len(), config.same_target.min(same.len())) {
        add(same[i], Source::SameTarget);
    }
    let all = &bundle.attribution;
    let mut rng = query_rng(config.seed, query.example_id, 2);
    for i in sample(&mut rng, all.len(), config.random.min(all.len())) {
        add(all[i].example_id, Source::Random);
    }
    let (candidates, sources) = sources
        .into_iter()
        .map(|(id, s)| (id, s.into_iter().collect()))
        .unzip();
    Ok(CandidateSet {
        query: query.example_id,
        candidates,
        sources,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Fact,
    Predicate,
    Subject,
    Object,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Fact, Level::Predicate, Level::Subject, Level::Object];
}

/// Whether a candidate carrying `candidate_facts` is relevant to `query` at `level`.
pub fn relevance<'a>(query: &Fact, candidate_facts: impl IntoIterator<Item = &'a Fact>, level: Level) -> bool {
    candidate_facts.into_iter().any(|f| match level {
        Level::Fact => f.id == query.id,
        Level::Predicate => f.predicate == query.predicate,
        Level::Subject => f.subject == query.subject,
        Level::Object => f.object == query.object,
    })
}

/// 1 for candidates sharing the query's target string, 0 otherwise.
pub fn random_target_scores(query: &MaskedExample, candidates: &[&MaskedExample]) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| if shares_target(query, c) { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    FinetuneLearned,
    PretrainLearned,
    All,
}

impl fmt::Display for SliceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SliceKind::FinetuneLearned => "fl",
            SliceKind::PretrainLearned => "pl",
            SliceKind::All => "all",
        })
    }
}

impl FromStr for SliceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fl" => Ok(SliceKind::FinetuneLearned),
            "pl" => Ok(SliceKind::PretrainLearned),
            "all" => Ok(SliceKind::All),
            other => Err(Error::InvalidInput(format!("unknown slice {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySlice {
    pub kind: SliceKind,
    pub members: Vec<ExampleId>,
}

/// Decodes of one query before and after the monitored training phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDecodes {
    pub query: ExampleId,
    /// Width-3 beam at the earlier checkpoint, best first.
    pub before: Vec<String>,
    /// Top beam entry at the later checkpoint.
    pub after: String,
}

/// Failed before (answer absent from the whole beam) and rank-1 correct after.
pub fn learned(decodes: &QueryDecodes, fact: &Fact) -> bool {
    let role = crate::synthgen::Role::Object;
    !decodes.before.iter().any(|d| answer_correct(d, fact, role)) && answer_correct(&decodes.after, fact, role)
}

pub const SLICE_BEAM_WIDTH: usize = 3;

/// Beam-decodes every query under the two checkpoints.
pub fn decode_queries(
    model: &Transformer,
    vocab: &Vocab,
    bundle: &DatasetBundle,
    before: &Blocks,
    after: &Blocks,
) -> Result<Vec<QueryDecodes>> {
    bundle
        .queries
        .iter()
        .map(|q| {
            let before = decode_answers(model, before, vocab, q, SLICE_BEAM_WIDTH)?;
            let after = decode_answers(model, after, vocab, q, 1)?.into_iter().next().unwrap_or_default();
            Ok(QueryDecodes {
                query: q.example_id,
                before,
                after,
            })
        })
        .collect()
}

/// Members of `kind` given decodes for the matching checkpoint pair.
pub fn slice_queries(bundle: &DatasetBundle, decodes: &[QueryDecodes], kind: SliceKind) -> Result<QuerySlice> {
    let members = match kind {
        SliceKind::All => bundle.queries.iter().map(|q| q.example_id).collect(),
        SliceKind::FinetuneLearned | SliceKind::PretrainLearned => {
            let mut out = Vec::new();
            for d in decodes {
                let q = bundle
                    .example(d.query)
                    .ok_or_else(|| Error::Validation(format!("unknown query {}", d.query)))?;
                if learned(d, query_fact(bundle, q)?) {
                    out.push(d.query);
                }
            }
            out
        }
    };
    Ok(QuerySlice { kind, members })
}

/// Ranks one query's candidates by `scores` (parallel to `candidates`) at
/// sentence level and returns the ranked `(sentence, score, relevant)` list.
pub fn rank_candidates(
    bundle: &DatasetBundle,
    query: &MaskedExample,
    candidates: &[ExampleId],
    scores: &[f64],
    level: Level,
    method: &str,
    tie_seed: u64,
) -> Result<Vec<(SentenceId, f64, bool)>> {
    if candidates.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} scores",
            candidates.len(),
            scores.len()
        )));
    }
    let qfact = query_fact(bundle, query)?;
    let mut scored = Vec::with_capacity(candidates.len());
    for (&c, &s) in candidates.iter().zip(scores) {
        let ex = bundle
            .example(c)
            .ok_or_else(|| Error::Validation(format!("unknown candidate {c}")))?;
        let facts = ex.facts.iter().filter_map(|a| bundle.fact(a.fact_id));
        scored.push((ex.sentence_id, s, relevance(qfact, facts, level)));
    }
    let mut sentences = sentence_level(&scored);
    rank_sentences(&mut sentences, |s| tie_key(tie_seed, method, query.example_id.0, s));
    Ok(sentences)
}

/// Metrics for one query. Returns `None` when no candidate is relevant.
pub fn evaluate_query(
    bundle: &DatasetBundle,
    query: &MaskedExample,
    candidates: &[ExampleId],
    scores: &[f64],
    level: Level,
    method: &str,
    tie_seed: u64,
    k: usize,
) -> Result<Option<QueryMetrics>> {
    let ranked = rank_candidates(bundle, query, candidates, scores, level, method, tie_seed)?;
    let rel: Vec<bool> = ranked.iter().map(|r| r.2).collect();
    if !rel.contains(&true) {
        return Ok(None);
    }
    metrics(&rel, k).map(Some)
}
