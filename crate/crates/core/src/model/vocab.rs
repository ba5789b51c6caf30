use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::{mask_sentinel, DatasetBundle, MaskedExample};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const BOS: TokenId = 2;
const RESERVED: [&str; 3] = ["<pad>", "</s>", "<s>"];
/// Mask sentinels `␣1`, `␣2` always follow the reserved ids.
pub const MAX_MASKS: usize = 2;

/// Word-level token table. Ids `0..3` are padding, end-of-sequence and the
/// decoder start token; the mask sentinels come next.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Whitespace split with a trailing possessive `'s` split into its own token.
pub fn tokenize_input(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        match word.strip_suffix("'s") {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_string());
                out.push("'s".to_string());
            }
            _ => out.push(word.to_string()),
        }
    }
    out
}

/// Decoder targets: the answers' words in mask order.
pub fn target_words(example: &MaskedExample) -> Vec<String> {
    example
        .answers()
        .iter()
        .flat_map(|a| a.split_whitespace().map(str::to_string))
        .collect()
}

impl Vocab {
    pub fn build<'a>(examples: impl IntoIterator<Item = &'a MaskedExample>) -> Self {
        let mut words = BTreeSet::new();
        for ex in examples {
            words.extend(tokenize_input(&ex.input));
            words.extend(target_words(ex));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=MAX_MASKS).map(mask_sentinel));
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Vocab::from(tokens)
    }

    pub fn from_bundle(bundle: &DatasetBundle) -> Self {
        Vocab::build(bundle.attribution.iter().chain(&bundle.queries))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn possessive_is_split() {
        assert_eq!(
            tokenize_input("entity-4's birth place is \u{2423}1"),
            vec!["entity-4", "'s", "birth", "place", "is", "\u{2423}1"]
        );
        assert_eq!(tokenize_input("'s"), vec!["'s"]);
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = Vocab::build(std::iter::empty());
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("</s>").unwrap(), EOS);
        assert_eq!(v.id("<s>").unwrap(), BOS);
        assert_eq!(v.id("\u{2423}1").unwrap(), 3);
        assert_eq!(v.id("\u{2423}2").unwrap(), 4);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(v.id("nope").is_err());
    }
}
