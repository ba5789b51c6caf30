//! Length-normalized beam search over an abstract next-token scorer.

use super::blocks::Blocks;
use super::transformer::{EncoderState, Transformer};
use super::vocab::TokenId;

/// Supplies next-token log-probabilities given the tokens decoded so far.
pub trait StepScorer {
    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> std::cmp::Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Runs beam search for at most `max_len` steps. A hypothesis ending in `eos`
/// is complete; without `eos` every hypothesis has exactly `max_len` tokens.
/// Returns at most `width` hypotheses ranked by length-normalized score.
pub fn beam_search<S: StepScorer>(scorer: &S, width: usize, max_len: usize, eos: Option<TokenId>) -> Vec<Hypothesis> {
    assert!(width >= 1, "beam width must be at least 1");
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished = Vec::new();
    for _ in 0..max_len {
        let mut expanded = Vec::new();
        for hyp in &live {
            for (tok, lp) in scorer.log_probs(&hyp.tokens).into_iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok as TokenId);
                expanded.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                });
            }
        }
        expanded.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
        expanded.truncate(width);
        live.clear();
        for hyp in expanded {
            if eos.is_some() && hyp.tokens.last().copied() == eos {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live);
    finished.sort_by(by_score);
    finished.truncate(width);
    finished
}

/// Adapts a model and encoded source to [`StepScorer`].
pub struct ModelScorer<'a> {
    pub model: &'a Transformer,
    pub params: &'a Blocks,
    pub encoder: EncoderState,
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.model.next_token_log_probs(self.params, &self.encoder, prefix)
    }
}
