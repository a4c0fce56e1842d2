//! Closed word-level vocabulary shared by the encoder, every decoder, and the
//! metrics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scene::grammar_words;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Separator between caption aspects; rendered as `.`.
pub const SEP: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "."];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one caption or instruction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocab {
    /// The vocabulary of the synthetic caption grammar.
    pub fn synthetic() -> Self {
        Self::from_tokens(
            SPECIALS
                .iter()
                .copied()
                .chain(grammar_words())
                .map(String::from)
                .collect(),
        )
        .expect("grammar words are unique")
    }

    /// Rebuilds a vocabulary from its ordered token list (checkpoint form).
    /// The first four tokens must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with <pad> <bos> <eos> .".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Data(format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownWord(w.to_string())))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence::new)
    }

    /// Whitespace join; `<pad>`, `<bos>` and `<eos>` are dropped and the
    /// separator renders as `.`.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::TokenRange {
                id,
                size: self.len(),
            })?;
            if !matches!(id, PAD | BOS | EOS) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let v = Vocab::synthetic();
        assert!(v.len() < 300);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("."), Some(SEP));
    }

    #[test]
    fn encode_examples() {
        let v = Vocab::synthetic();
        assert!(v.encode("").unwrap().is_empty());
        let ids = v.encode("two red buildings").unwrap().ids;
        assert_eq!(ids.len(), 3);
        assert!(ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2]);
        match v.encode("two purple buildings") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "purple"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn decode_strips_specials() {
        let v = Vocab::synthetic();
        let mut ids = vec![BOS];
        ids.extend(v.encode("a rural area . no notable relations").unwrap().ids);
        ids.extend([EOS, PAD]);
        assert_eq!(v.decode(&ids).unwrap(), "a rural area . no notable relations");
        assert!(matches!(v.decode(&[v.len()]), Err(Error::TokenRange { .. })));
    }

    #[test]
    fn token_list_round_trip() {
        let v = Vocab::synthetic();
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        let mut dup = v.tokens().to_vec();
        dup.push("red".into());
        assert!(Vocab::from_tokens(dup).is_err());
    }
}
