//! Layer tags naming parameter-block groups (`G.*`) and activation outputs
//! (`A.*`).
//!
//! Gradient tags: `G.0` is the token embedding, `G.E.i` / `G.D.i` the blocks
//! of encoder / decoder layer `i`, `G.i` both of them, `G.H` the final norms
//! and output projection, and `G` every block. Activation tags: `A.E.i` and
//! `A.D.i` for `i` in `0..=layers`, where 0 is the embedding output.

use crate::error::{Error, Result};
use crate::model::{block_names, ModelConfig, DECODER_FINAL_NORM, EMBEDDING, ENCODER_FINAL_NORM, LM_HEAD};

/// Blocks selected by one gradient tag, in storage order.
pub fn gradient_tag_blocks(config: &ModelConfig, tag: &str) -> Result<Vec<String>> {
    let names = block_names(config);
    let unknown = || Error::UnknownTag(tag.to_string());
    let rest = tag.strip_prefix('G').ok_or_else(unknown)?;
    let in_layer = |prefix: &str, layer: usize| {
        let p = format!("{prefix}.{layer}.");
        move |n: &String| n.starts_with(&p)
    };
    let layer_no = |s: &str, max: usize| -> Result<usize> {
        let i: usize = s.parse().map_err(|_| unknown())?;
        if i == 0 || i > max {
            return Err(unknown());
        }
        Ok(i)
    };
    let pick: Vec<String> = match rest {
        "" => names,
        ".0" => vec![EMBEDDING.to_string()],
        ".H" => names
            .into_iter()
            .filter(|n| n == ENCODER_FINAL_NORM || n == DECODER_FINAL_NORM || n == LM_HEAD)
            .collect(),
        _ => {
            let rest = rest.strip_prefix('.').ok_or_else(unknown)?;
            if let Some(i) = rest.strip_prefix("E.") {
                let f = in_layer("encoder", layer_no(i, config.n_enc_layers)?);
                names.into_iter().filter(|n| f(n)).collect()
            } else if let Some(i) = rest.strip_prefix("D.") {
                let f = in_layer("decoder", layer_no(i, config.n_dec_layers)?);
                names.into_iter().filter(|n| f(n)).collect()
            } else {
                let i = layer_no(rest, config.n_enc_layers.max(config.n_dec_layers))?;
                let (e, d) = (in_layer("encoder", i), in_layer("decoder", i));
                names.into_iter().filter(|n| e(n) || d(n)).collect()
            }
        }
    };
    if pick.is_empty() {
        return Err(unknown());
    }
    Ok(pick)
}

/// Union of several gradient tags, deduplicated, in storage order.
pub fn gradient_blocks(config: &ModelConfig, tags: &[String]) -> Result<Vec<String>> {
    if tags.is_empty() {
        return Err(Error::InvalidInput("no layer tags given".into()));
    }
    let mut chosen = std::collections::BTreeSet::new();
    for tag in tags {
        chosen.extend(gradient_tag_blocks(config, tag)?);
    }
    Ok(block_names(config).into_iter().filter(|n| chosen.contains(n)).collect())
}

/// Which side and index an activation tag names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActivationTag {
    Encoder(usize),
    Decoder(usize),
}

impl ActivationTag {
    pub fn parse(config: &ModelConfig, tag: &str) -> Result<Self> {
        let unknown = || Error::UnknownTag(tag.to_string());
        let (side, index) = if let Some(i) = tag.strip_prefix("A.E.") {
            (true, i)
        } else if let Some(i) = tag.strip_prefix("A.D.") {
            (false, i)
        } else {
            return Err(unknown());
        };
        let i: usize = index.parse().map_err(|_| unknown())?;
        let max = if side { config.n_enc_layers } else { config.n_dec_layers };
        if i > max {
            return Err(unknown());
        }
        Ok(if side {
            ActivationTag::Encoder(i)
        } else {
            ActivationTag::Decoder(i)
        })
    }

    pub fn all(config: &ModelConfig) -> Vec<ActivationTag> {
        (0..=config.n_enc_layers)
            .map(ActivationTag::Encoder)
            .chain((0..=config.n_dec_layers).map(ActivationTag::Decoder))
            .collect()
    }
}

impl std::fmt::Display for ActivationTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ActivationTag::Encoder(i) => write!(f, "A.E.{i}"),
            ActivationTag::Decoder(i) => write!(f, "A.D.{i}"),
        }
    }
}

/// Every single gradient tag for `config`, in sweep order.
pub fn all_gradient_tags(config: &ModelConfig) -> Vec<String> {
    let mut tags = vec!["G.0".to_string()];
    tags.extend((1..=config.n_enc_layers).map(|i| format!("G.E.{i}")));
    tags.extend((1..=config.n_dec_layers).map(|i| format!("G.D.{i}")));
    tags.push("G.H".into());
    tags.push("G".into());
    tags
}
