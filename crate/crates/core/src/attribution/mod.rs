//! Gradient-similarity (TracIn) and representation-similarity influence
//! scores between a query example and candidate training examples.

mod layers;
mod table;

pub use layers::{all_gradient_tags, gradient_blocks, gradient_tag_blocks, ActivationTag};
pub use table::{BlockEntry, BlockScoreTable, FoldOptions, TableBuilder};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, Blocks, Checkpoint, EncodedExample, Transformer};

/// Norms below this count as zero; such blocks contribute 0 to cosine scores.
pub const NORM_EPS: f64 = 1e-12;

/// Per-example loss gradient, partitioned like the model parameters.
pub type GradientVector = Blocks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    Dot,
    /// Cosine within each block, summed over blocks.
    Cosine,
    /// One cosine over the concatenation of the selected blocks.
    GlobalCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precondition {
    None,
    Adafactor,
}

/// Order of preconditioning and unit normalization when both are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    #[default]
    PreconditionThenNormalize,
    NormalizeThenPrecondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Tracin,
    Embed,
    Ensemble,
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(Error::InvalidInput(format!("unknown value {other:?}"))),
                }
            }
        }
    };
}

text_enum!(Normalize, Normalize::Dot => "dot", Normalize::Cosine => "cos", Normalize::GlobalCosine => "global-cos");
text_enum!(Precondition, Precondition::None => "none", Precondition::Adafactor => "adafactor");
text_enum!(Method, Method::Tracin => "tracin", Method::Embed => "embed", Method::Ensemble => "ensemble");
text_enum!(
    Order,
    Order::PreconditionThenNormalize => "precondition-first",
    Order::NormalizeThenPrecondition => "normalize-first"
);

/// `dot / (norm_q * norm_z)`, or 0 when either norm is below [`NORM_EPS`].
pub fn cosine_from_parts(dot: f64, norm_q: f64, norm_z: f64) -> f64 {
    if norm_q < NORM_EPS || norm_z < NORM_EPS {
        0.0
    } else {
        dot / (norm_q * norm_z)
    }
}

fn block_pair<'a>(g_q: &'a GradientVector, g_z: &'a GradientVector, block: &str) -> Result<(&'a [f64], &'a [f64])> {
    let q = g_q.require(block)?;
    let z = g_z.require(block)?;
    if q.shape != z.shape {
        return Err(Error::Shape(format!("block {block}: {:?} vs {:?}", q.shape, z.shape)));
    }
    Ok((&q.data, &z.data))
}

/// Similarity of one block of two gradients.
pub fn block_score(g_q: &GradientVector, g_z: &GradientVector, block: &str, normalize: Normalize) -> Result<f64> {
    let (q, z) = block_pair(g_q, g_z, block)?;
    let d = dot(q, z);
    Ok(match normalize {
        Normalize::Dot => d,
        Normalize::Cosine | Normalize::GlobalCosine => cosine_from_parts(d, dot(q, q).sqrt(), dot(z, z).sqrt()),
    })
}

/// Divides every component by the square root of the checkpoint's
/// second-moment estimate.
pub fn adafactor_precondition(g: &GradientVector, checkpoint: &Checkpoint) -> Result<GradientVector> {
    checkpoint.optimizer.precondition(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub normalize: Normalize,
    pub precondition: Precondition,
    pub order: Order,
    /// Selected blocks; must be non-empty.
    pub blocks: Vec<String>,
}

/// Similarity summed over `blocks` of two gradients taken at one checkpoint.
fn checkpoint_score(g_q: &GradientVector, g_z: &GradientVector, ckpt: &Checkpoint, opts: &ScoreOptions) -> Result<f64> {
    let (pq, pz) = match opts.precondition {
        Precondition::None => (g_q.clone(), g_z.clone()),
        Precondition::Adafactor => (adafactor_precondition(g_q, ckpt)?, adafactor_precondition(g_z, ckpt)?),
    };
    // Norms come from the preconditioned gradients unless normalization is
    // applied first, in which case they are the raw gradient norms.
    let (nq_src, nz_src) = match (opts.precondition, opts.order) {
        (Precondition::Adafactor, Order::NormalizeThenPrecondition) => (g_q, g_z),
        _ => (&pq, &pz),
    };
    let mut total = 0.0;
    let (mut dots, mut nq2, mut nz2) = (0.0, 0.0, 0.0);
    for block in &opts.blocks {
        let (q, z) = block_pair(&pq, &pz, block)?;
        let d = dot(q, z);
        let (rq, rz) = block_pair(nq_src, nz_src, block)?;
        let (bq, bz) = (dot(rq, rq), dot(rz, rz));
        match opts.normalize {
            Normalize::Dot => total += d,
            Normalize::Cosine => total += cosine_from_parts(d, bq.sqrt(), bz.sqrt()),
            Normalize::GlobalCosine => {
                dots += d;
                nq2 += bq;
                nz2 += bz;
            }
        }
    }
    if opts.normalize == Normalize::GlobalCosine {
        total = cosine_from_parts(dots, nq2.sqrt(), nz2.sqrt());
    }
    Ok(total)
}

/// TracIn influence of `candidate` on `query`: the per-checkpoint block
/// similarity summed over `checkpoints`. Computes every gradient directly.
pub fn tracin_score(
    model: &Transformer,
    checkpoints: &[Checkpoint],
    query: &EncodedExample,
    candidate: &EncodedExample,
    opts: &ScoreOptions,
) -> Result<f64> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("tracin needs at least one checkpoint".into()));
    }
    if opts.blocks.is_empty() {
        return Err(Error::InvalidInput("no blocks selected".into()));
    }
    let mut total = 0.0;
    for ckpt in checkpoints {
        let (_, g_q) = model.loss_and_grad(&ckpt.params, query)?;
        let (_, g_z) = model.loss_and_grad(&ckpt.params, candidate)?;
        total += checkpoint_score(&g_q, &g_z, ckpt, opts)?;
    }
    Ok(total)
}

/// Mean hidden state per activation tag for one example.
pub type EmbedRepr = BTreeMap<ActivationTag, Vec<f64>>;

/// Mean over non-padding positions of every layer output.
pub fn embed_repr(model: &Transformer, checkpoint: &Checkpoint, example: &EncodedExample) -> Result<EmbedRepr> {
    let out = model.forward(&checkpoint.params, example)?;
    let mut repr = BTreeMap::new();
    for tag in ActivationTag::all(model.config()) {
        let (states, valid): (_, Vec<bool>) = match tag {
            ActivationTag::Encoder(i) => (&out.layers.enc[i], out.layers.src_valid.clone()),
            ActivationTag::Decoder(i) => (&out.layers.dec[i], vec![true; out.layers.dec[i].nrows()]),
        };
        let mut mean = vec![0.0; states.ncols()];
        let mut count = 0usize;
        for (row, ok) in states.rows().into_iter().zip(&valid) {
            if *ok {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        repr.insert(tag, mean);
    }
    Ok(repr)
}

/// Sum over `tags` of the cosine between the two representations.
pub fn embed_score(query: &EmbedRepr, candidate: &EmbedRepr, tags: &[ActivationTag]) -> Result<f64> {
    if tags.is_empty() {
        return Err(Error::InvalidInput("no layer tags given".into()));
    }
    let mut total = 0.0;
    for tag in tags {
        let missing = || Error::UnknownTag(tag.to_string());
        let q = query.get(tag).ok_or_else(missing)?;
        let z = candidate.get(tag).ok_or_else(missing)?;
        total += cosine_from_parts(dot(q, z), dot(q, q).sqrt(), dot(z, z).sqrt());
    }
    Ok(total)
}

/// Elementwise sum of two score lists over the same candidates.
pub fn ensemble_scores(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot ensemble {} and {} scores", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}
