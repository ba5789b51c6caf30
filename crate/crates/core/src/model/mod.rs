//! Encoder-decoder model, optimizer, checkpoints and decoding.

pub mod adafactor;
pub mod beam;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod select;
pub mod train;
pub mod transformer;
pub mod vocab;

pub use adafactor::{Adafactor, AdafactorConfig, AdafactorState, Moment, NamedMoment, PRECONDITION_EPS};
pub use beam::{beam_search, Hypothesis, ModelScorer, StepScorer};
pub use blocks::{dot, Block, Blocks};
pub use checkpoint::{Checkpoint, Phase};
pub use config::{config_hash, ModelConfig};
pub use select::select_checkpoints;
pub use train::{train, CheckpointRecord, TrainConfig, TrainingHistory};
pub use transformer::{block_names, DECODER_FINAL_NORM, EMBEDDING, ENCODER_FINAL_NORM, LM_HEAD, EncodedExample, EncoderState, ForwardOutput, LayerOutputs, Transformer};
pub use vocab::{target_words, tokenize_input, TokenId, Vocab, BOS, EOS, PAD};

use crate::error::Result;
use crate::synthgen::{entity_surfaces, strip_index_prefix, Fact, MaskedExample, Role};

/// Token ids for a masked example; targets gain `</s>` when `include_eos` is set.
pub fn encode_example(vocab: &Vocab, example: &MaskedExample, include_eos: bool) -> Result<EncodedExample> {
    let src = vocab.encode(&tokenize_input(&example.input))?;
    let mut tgt = vocab.encode(&target_words(example))?;
    if include_eos {
        tgt.push(EOS);
    }
    Ok(EncodedExample { src, tgt })
}

/// Beam-decodes the answer to `example` and returns up to `width` strings,
/// best first. Without `</s>` targets the decode length is the example's
/// answer word count.
pub fn decode_answers(
    model: &Transformer,
    params: &blocks::Blocks,
    vocab: &Vocab,
    example: &MaskedExample,
    width: usize,
) -> Result<Vec<String>> {
    let include_eos = model.config().include_eos_in_target;
    let encoded = encode_example(vocab, example, include_eos)?;
    let scorer = ModelScorer {
        model,
        params,
        encoder: model.encode_source(params, &encoded.src)?,
    };
    let (max_len, eos) = if include_eos {
        (model.config().max_seq_len, Some(EOS))
    } else {
        (encoded.tgt.len(), None)
    };
    Ok(beam_search(&scorer, width, max_len, eos)
        .into_iter()
        .map(|h| {
            h.tokens
                .iter()
                .filter(|&&t| t != EOS)
                .map(|&t| vocab.token(t))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect())
}

/// True when `decoded`, minus any `k:` prefix, is a surface form of the
/// masked entity.
pub fn answer_correct(decoded: &str, fact: &Fact, masked_role: Role) -> bool {
    let entity = match masked_role {
        Role::Subject => fact.subject,
        Role::Object => fact.object,
    };
    let answer = strip_index_prefix(decoded.trim());
    entity_surfaces(entity)
        .map(|surfaces| surfaces.iter().any(|s| s == answer))
        .unwrap_or(false)
}
