//! Okapi BM25 with the additive `+1` term-frequency floor:
//!
//! `score(q, z) = sum_t log((N+1)/N_t) * ((k1+1) f / (k1 ((1-b) + b L/L_avg) + f) + 1)`
//!
//! summed over query tokens `t` with multiplicity. Tokens absent from the
//! corpus (`N_t = 0`) contribute nothing.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{is_mask_token, parse_answers, ExampleId, MaskedExample};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

/// Whitespace tokens of the input without mask sentinels, followed by the
/// answer words. Case is preserved.
pub fn tokenize_for_bm25(example: &MaskedExample) -> Vec<String> {
    let mut bag: Vec<String> = example
        .input
        .split_whitespace()
        .filter(|t| !is_mask_token(t))
        .map(str::to_string)
        .collect();
    for answer in parse_answers(&example.output) {
        bag.extend(answer.split_whitespace().map(str::to_string));
    }
    bag
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    format_version: u32,
    params: Bm25Params,
    docs: Vec<ExampleId>,
    terms: Vec<String>,
    /// Per term: `(document index, count)` in ascending document order.
    postings: Vec<Vec<(u32, u32)>>,
    lengths: Vec<u32>,
    #[serde(skip)]
    term_ids: HashMap<String, usize>,
    #[serde(skip)]
    doc_index: HashMap<ExampleId, usize>,
}

impl Bm25Index {
    /// Indexes `(id, token bag)` documents; ids must be unique.
    pub fn build<I, S>(documents: I, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (ExampleId, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut index = Bm25Index {
            format_version: FORMAT_VERSION,
            params,
            docs: Vec::new(),
            terms: Vec::new(),
            postings: Vec::new(),
            lengths: Vec::new(),
            term_ids: HashMap::new(),
            doc_index: HashMap::new(),
        };
        for (id, bag) in documents {
            let d = index.docs.len();
            if index.doc_index.insert(id, d).is_some() {
                return Err(Error::InvalidInput(format!("duplicate document id {id}")));
            }
            index.docs.push(id);
            index.lengths.push(bag.len() as u32);
            let mut counts: HashMap<usize, u32> = HashMap::new();
            for tok in &bag {
                let next = index.terms.len();
                let t = *index.term_ids.entry(tok.as_ref().to_string()).or_insert(next);
                if t == next {
                    index.terms.push(tok.as_ref().to_string());
                    index.postings.push(Vec::new());
                }
                *counts.entry(t).or_insert(0) += 1;
            }
            let mut counts: Vec<_> = counts.into_iter().collect();
            counts.sort_unstable();
            for (t, c) in counts {
                index.postings[t].push((d as u32, c));
            }
        }
        Ok(index)
    }

    /// Index over the attribution examples of a bundle.
    pub fn from_examples(examples: &[MaskedExample], params: Bm25Params) -> Result<Self> {
        Self::build(examples.iter().map(|e| (e.example_id, tokenize_for_bm25(e))), params)
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn doc_ids(&self) -> &[ExampleId] {
        &self.docs
    }

    pub fn avg_len(&self) -> f64 {
        self.lengths.iter().map(|&l| l as f64).sum::<f64>() / self.docs.len() as f64
    }

    /// Number of documents containing `token`.
    pub fn doc_freq(&self, token: &str) -> usize {
        self.term_ids.get(token).map_or(0, |&t| self.postings[t].len())
    }

    fn idf(&self, df: usize) -> f64 {
        ((self.docs.len() as f64 + 1.0) / df as f64).ln()
    }

    fn tf_term(&self, f: f64, len: f64, avg: f64) -> f64 {
        let Bm25Params { k1, b } = self.params;
        (k1 + 1.0) * f / (k1 * ((1.0 - b) + b * len / avg) + f) + 1.0
    }

    /// Score of one document.
    pub fn score<S: AsRef<str>>(&self, query: &[S], doc: ExampleId) -> Result<f64> {
        let d = *self
            .doc_index
            .get(&doc)
            .ok_or_else(|| Error::InvalidInput(format!("unknown document id {doc}")))?;
        let avg = self.avg_len();
        let len = self.lengths[d] as f64;
        let mut total = 0.0;
        for tok in query {
            let Some(&t) = self.term_ids.get(tok.as_ref()) else {
                continue;
            };
            let postings = &self.postings[t];
            let f = postings
                .binary_search_by_key(&(d as u32), |&(doc, _)| doc)
                .map_or(0, |i| postings[i].1);
            total += self.idf(postings.len()) * self.tf_term(f as f64, len, avg);
        }
        Ok(total)
    }

    /// Scores of every document, in index order.
    pub fn score_all<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let avg = self.avg_len();
        let mut scores = vec![0.0; self.docs.len()];
        for tok in query {
            let Some(&t) = self.term_ids.get(tok.as_ref()) else {
                continue;
            };
            let postings = &self.postings[t];
            let idf = self.idf(postings.len());
            let mut next = postings.iter().peekable();
            for (d, s) in scores.iter_mut().enumerate() {
                let f = match next.peek() {
                    Some(&&(doc, c)) if doc as usize == d => {
                        next.next();
                        c
                    }
                    _ => 0,
                };
                *s += idf * self.tf_term(f as f64, self.lengths[d] as f64, avg);
            }
        }
        scores
    }

    /// The `k` best documents, highest score first, ties by ascending id.
    pub fn top_k<S: AsRef<str>>(&self, query: &[S], k: usize) -> Vec<(ExampleId, f64)> {
        let scores = self.score_all(query);
        let mut ranked: Vec<(ExampleId, f64)> = self.docs.iter().copied().zip(scores).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    fn rebuild_lookups(&mut self) {
        self.term_ids = self.terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        self.doc_index = self.docs.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut index: Bm25Index = serde_json::from_reader(BufReader::new(file))?;
        if index.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported BM25 index version {}",
                index.format_version
            )));
        }
        if index.postings.len() != index.terms.len() || index.lengths.len() != index.docs.len() {
            return Err(Error::Validation("inconsistent BM25 index file".into()));
        }
        index.rebuild_lookups();
        Ok(index)
    }
}
