//! Cached per-block gradient statistics from which any block subset,
//! checkpoint subset and normalization can be scored without the model.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use super::{cosine_from_parts, Normalize, Order, Precondition};
use crate::error::{Error, Result};
use crate::model::{dot, Blocks, Checkpoint, EncodedExample, Transformer};
use crate::synthgen::ExampleId;

/// Block-local dot product and the two block norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockEntry {
    pub dot: f64,
    pub norm_q: f64,
    pub norm_z: f64,
}

/// Entries for one query, laid out `[candidate][checkpoint][block]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockScoreTable {
    pub candidates: Vec<ExampleId>,
    pub steps: Vec<u64>,
    pub blocks: Vec<String>,
    pub raw: Vec<BlockEntry>,
    /// Same statistics for Adafactor-preconditioned gradients.
    pub preconditioned: Option<Vec<BlockEntry>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOptions {
    pub normalize: Normalize,
    pub precondition: Precondition,
    pub order: Order,
    /// Checkpoint steps to sum over; `None` takes all of them.
    pub steps: Option<Vec<u64>>,
    pub blocks: Vec<String>,
}

const TSV_HEADER: &str = "candidate_id\tcheckpoint_step\tblock\tprecondition\tdot\tnorm_q\tnorm_z";

impl BlockScoreTable {
    fn empty(candidates: Vec<ExampleId>, steps: Vec<u64>, blocks: Vec<String>, precondition: bool) -> Self {
        let n = candidates.len() * steps.len() * blocks.len();
        BlockScoreTable {
            candidates,
            steps,
            blocks,
            raw: vec![BlockEntry::default(); n],
            preconditioned: precondition.then(|| vec![BlockEntry::default(); n]),
        }
    }

    fn index(&self, candidate: usize, step: usize, block: usize) -> usize {
        (candidate * self.steps.len() + step) * self.blocks.len() + block
    }

    /// One score per candidate, in table order.
    pub fn fold(&self, opts: &FoldOptions) -> Result<Vec<f64>> {
        if opts.blocks.is_empty() {
            return Err(Error::InvalidInput("no blocks selected".into()));
        }
        let block_idx = opts
            .blocks
            .iter()
            .map(|b| {
                self.blocks
                    .iter()
                    .position(|x| x == b)
                    .ok_or_else(|| Error::UnknownTag(format!("block {b} is not in the score table")))
            })
            .collect::<Result<Vec<_>>>()?;
        let step_idx: Vec<usize> = match &opts.steps {
            None => (0..self.steps.len()).collect(),
            Some(steps) => steps
                .iter()
                .map(|s| {
                    self.steps
                        .iter()
                        .position(|x| x == s)
                        .ok_or_else(|| Error::InvalidInput(format!("checkpoint step {s} is not in the score table")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if step_idx.is_empty() {
            return Err(Error::InvalidInput("no checkpoints selected".into()));
        }
        let entries = match opts.precondition {
            Precondition::None => &self.raw,
            Precondition::Adafactor => self
                .preconditioned
                .as_ref()
                .ok_or_else(|| Error::MissingAccumulator("score table has no preconditioned entries".into()))?,
        };
        let norms_raw = opts.precondition == Precondition::Adafactor && opts.order == Order::NormalizeThenPrecondition;
        let mut out = Vec::with_capacity(self.candidates.len());
        for c in 0..self.candidates.len() {
            let mut total = 0.0;
            for &k in &step_idx {
                let (mut dots, mut nq2, mut nz2) = (0.0, 0.0, 0.0);
                for &b in &block_idx {
                    let i = self.index(c, k, b);
                    let e = entries[i];
                    let (nq, nz) = if norms_raw {
                        (self.raw[i].norm_q, self.raw[i].norm_z)
                    } else {
                        (e.norm_q, e.norm_z)
                    };
                    match opts.normalize {
                        Normalize::Dot => total += e.dot,
                        Normalize::Cosine => total += cosine_from_parts(e.dot, nq, nz),
                        Normalize::GlobalCosine => {
                            dots += e.dot;
                            nq2 += nq * nq;
                            nz2 += nz * nz;
                        }
                    }
                }
                if opts.normalize == Normalize::GlobalCosine {
                    total += cosine_from_parts(dots, nq2.sqrt(), nz2.sqrt());
                }
            }
            out.push(total);
        }
        Ok(out)
    }

    /// Tab-separated dump, one row per (candidate, checkpoint, block,
    /// precondition). Floats use the shortest exact representation.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TSV_HEADER}")?;
        let mut sets: Vec<(&str, &Vec<BlockEntry>)> = vec![("none", &self.raw)];
        if let Some(p) = &self.preconditioned {
            sets.push(("adafactor", p));
        }
        for (c, cand) in self.candidates.iter().enumerate() {
            for (k, step) in self.steps.iter().enumerate() {
                for (b, block) in self.blocks.iter().enumerate() {
                    let i = self.index(c, k, b);
                    for (label, entries) in &sets {
                        let e = entries[i];
                        writeln!(w, "{cand}\t{step}\t{block}\t{label}\t{:?}\t{:?}\t{:?}", e.dot, e.norm_q, e.norm_z)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Parses [`write_tsv`](Self::write_tsv) output.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: "score table".into(),
            line,
            message,
        };
        let mut rows = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| bad(n + 1, e.to_string()))?;
            if n == 0 {
                if line != TSV_HEADER {
                    return Err(bad(1, "unexpected header".into()));
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(bad(n + 1, format!("expected 7 columns, found {}", cols.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n + 1, e.to_string()));
            let cand = cols[0].parse::<u32>().map_err(|e| bad(n + 1, e.to_string()))?;
            let step = cols[1].parse::<u64>().map_err(|e| bad(n + 1, e.to_string()))?;
            let pre = match cols[3] {
                "none" => false,
                "adafactor" => true,
                other => return Err(bad(n + 1, format!("unknown precondition {other:?}"))),
            };
            let entry = BlockEntry {
                dot: num(cols[4])?,
                norm_q: num(cols[5])?,
                norm_z: num(cols[6])?,
            };
            rows.push((ExampleId(cand), step, cols[2].to_string(), pre, entry));
        }
        let mut candidates = Vec::new();
        let mut steps = Vec::new();
        let mut blocks = Vec::new();
        let mut any_pre = false;
        for (c, s, b, p, _) in &rows {
            if candidates.last() != Some(c) && !candidates.contains(c) {
                candidates.push(*c);
            }
            if !steps.contains(s) {
                steps.push(*s);
            }
            if !blocks.contains(b) {
                blocks.push(b.clone());
            }
            any_pre |= *p;
        }
        let mut table = BlockScoreTable::empty(candidates, steps, blocks, any_pre);
        let expected = table.raw.len() * if any_pre { 2 } else { 1 };
        if rows.len() != expected {
            return Err(bad(0, format!("expected {expected} rows, found {}", rows.len())));
        }
        for (c, s, b, p, e) in rows {
            let ci = table.candidates.iter().position(|x| *x == c).expect("collected");
            let si = table.steps.iter().position(|x| *x == s).expect("collected");
            let bi = table.blocks.iter().position(|x| *x == b).expect("collected");
            let i = table.index(ci, si, bi);
            if p {
                table.preconditioned.as_mut().expect("allocated")[i] = e;
            } else {
                table.raw[i] = e;
            }
        }
        Ok(table)
    }
}

struct Flat {
    data: Vec<f64>,
    /// `(start, end)` of each block in `data`.
    spans: Vec<(usize, usize)>,
}

fn flatten(g: &Blocks) -> Flat {
    let mut data = Vec::with_capacity(g.num_scalars());
    let mut spans = Vec::with_capacity(g.len());
    for b in g.iter() {
        let start = data.len();
        data.extend_from_slice(&b.data);
        spans.push((start, data.len()));
    }
    Flat { data, spans }
}

fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), v)| x * y * v).sum()
}

/// Builds score tables for many queries at once, computing each candidate
/// gradient once per checkpoint and sharing it between queries.
pub struct TableBuilder<'a> {
    pub model: &'a Transformer,
    pub checkpoints: &'a [Checkpoint],
    /// Also record Adafactor-preconditioned statistics.
    pub precondition: bool,
    /// Queries whose gradients are held in memory at once.
    pub query_chunk: usize,
}

impl TableBuilder<'_> {
    /// `members[q]` lists indices into `pool` forming query `q`'s candidates.
    pub fn build(
        &self,
        queries: &[&EncodedExample],
        pool: &[(ExampleId, &EncodedExample)],
        members: &[Vec<usize>],
    ) -> Result<Vec<BlockScoreTable>> {
        if self.checkpoints.is_empty() {
            return Err(Error::InvalidInput("tracin needs at least one checkpoint".into()));
        }
        if queries.len() != members.len() {
            return Err(Error::Shape(format!("{} queries but {} candidate lists", queries.len(), members.len())));
        }
        let blocks: Vec<String> = self.checkpoints[0].params.names().map(str::to_string).collect();
        let steps: Vec<u64> = self.checkpoints.iter().map(|c| c.step).collect();
        if steps.iter().collect::<BTreeSet<_>>().len() != steps.len() {
            return Err(Error::InvalidInput("checkpoint steps must be distinct".into()));
        }
        let mut tables: Vec<BlockScoreTable> = members
            .iter()
            .map(|m| {
                let cands = m.iter().map(|&i| pool[i].0).collect();
                BlockScoreTable::empty(cands, steps.clone(), blocks.clone(), self.precondition)
            })
            .collect();
        let chunk = self.query_chunk.max(1);
        for start in (0..queries.len()).step_by(chunk) {
            let end = (start + chunk).min(queries.len());
            // For each pool entry, the (query, local candidate index) pairs it feeds.
            let mut uses: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pool.len()];
            for q in start..end {
                for (local, &p) in members[q].iter().enumerate() {
                    uses[p].push((q, local));
                }
            }
            for (k, ckpt) in self.checkpoints.iter().enumerate() {
                self.model.check_params(&ckpt.params)?;
                let weights = if self.precondition {
                    let mut w = Vec::with_capacity(ckpt.params.num_scalars());
                    for b in ckpt.params.iter() {
                        w.extend(ckpt.optimizer.moment(&b.name)?.inverse_second_moment());
                    }
                    Some(w)
                } else {
                    None
                };
                let mut qgrads = Vec::with_capacity(end - start);
                for q in &queries[start..end] {
                    let (_, g) = self.model.loss_and_grad(&ckpt.params, q)?;
                    let flat = flatten(&g);
                    let norms: Vec<(f64, f64)> = flat
                        .spans
                        .iter()
                        .map(|&(s, e)| {
                            let x = &flat.data[s..e];
                            let raw = dot(x, x).sqrt();
                            let pre = weights.as_ref().map_or(0.0, |w| weighted_dot(x, x, &w[s..e]).sqrt());
                            (raw, pre)
                        })
                        .collect();
                    qgrads.push((flat, norms));
                }
                for (p, users) in uses.iter().enumerate() {
                    if users.is_empty() {
                        continue;
                    }
                    let (_, g) = self.model.loss_and_grad(&ckpt.params, pool[p].1)?;
                    let z = flatten(&g);
                    let zw: Option<Vec<f64>> = weights
                        .as_ref()
                        .map(|w| z.data.iter().zip(w).map(|(a, b)| a * b).collect());
                    let znorms: Vec<(f64, f64)> = z
                        .spans
                        .iter()
                        .map(|&(s, e)| {
                            let x = &z.data[s..e];
                            let pre = zw.as_ref().map_or(0.0, |zw| dot(x, &zw[s..e]).sqrt());
                            (dot(x, x).sqrt(), pre)
                        })
                        .collect();
                    for &(q, local) in users {
                        let (qflat, qnorms) = &qgrads[q - start];
                        let table = &mut tables[q];
                        for (b, &(s, e)) in z.spans.iter().enumerate() {
                            let i = table.index(local, k, b);
                            table.raw[i] = BlockEntry {
                                dot: dot(&qflat.data[s..e], &z.data[s..e]),
                                norm_q: qnorms[b].0,
                                norm_z: znorms[b].0,
                            };
                            if let (Some(pre), Some(zw)) = (table.preconditioned.as_mut(), zw.as_ref()) {
                                pre[i] = BlockEntry {
                                    dot: dot(&qflat.data[s..e], &zw[s..e]),
                                    norm_q: qnorms[b].1,
                                    norm_z: znorms[b].1,
                                };
                            }
                        }
                    }
                }
            }
        }
        Ok(tables)
    }
}
