//! Whitespace-plus-punctuation tokenizer with a corpus-built vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::domain::TokenId;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// A surface token with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub text: String,
    pub span: Range<usize>,
}

/// Splits on whitespace; every non-alphanumeric character becomes its own
/// token.
pub fn split(text: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() || ch == '_' {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            out.push(Piece {
                text: text[s..i].to_string(),
                span: s..i,
            });
        }
        if !ch.is_whitespace() {
            let end = i + ch.len_utf8();
            out.push(Piece {
                text: text[i..end].to_string(),
                span: i..end,
            });
        }
    }
    if let Some(s) = start {
        out.push(Piece {
            text: text[s..].to_string(),
            span: s..text.len(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

impl Tokenizer {
    /// Vocabulary = `<pad>`, `<unk>`, then every distinct surface token of
    /// `texts` in lexicographic order.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut set = BTreeSet::new();
        for t in texts {
            for p in split(t) {
                set.insert(p.text);
            }
        }
        set.remove(PAD);
        set.remove(UNK);
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(set);
        Self::from_tokens(tokens).expect("reserved tokens present")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD)
            || tokens.get(1).map(String::as_str) != Some(UNK)
        {
            return Err(Error::Invalid("vocabulary must start with <pad>, <unk>".into()));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect::<HashMap<_, _>>();
        if index.len() != tokens.len() {
            return Err(Error::Invalid("duplicate vocabulary entries".into()));
        }
        Ok(Tokenizer { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> TokenId {
        0
    }

    pub fn unk_id(&self) -> TokenId {
        1
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn text(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        split(text)
            .into_iter()
            .map(|p| self.id(&p.text).unwrap_or(self.unk_id()))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.text(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(s)?;
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        let p: Vec<String> = split("Q: What is it? A:").into_iter().map(|p| p.text).collect();
        assert_eq!(p, vec!["Q", ":", "What", "is", "it", "?", "A", ":"]);
        let spans: Vec<_> = split("ab, c").into_iter().map(|p| p.span).collect();
        assert_eq!(spans, vec![0..2, 2..3, 4..5]);
    }

    #[test]
    fn vocabulary_is_sorted_and_reserved() {
        let t = Tokenizer::from_corpus(["b a", "c a ."]);
        assert_eq!(t.id("<pad>"), Some(0));
        assert_eq!(t.id("."), Some(2));
        assert_eq!(t.id("a"), Some(3));
        assert_eq!(t.encode("a zz"), vec![3, 1]);
        assert_eq!(t.decode(&[3, 4]), "a b");
        let back = Tokenizer::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
