//! Token vocabularies and embedding tables.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id bijection with fixed reserved ids PAD=0, UNK=1, BOS=2, EOS=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; frequency ties break by
    /// first occurrence in the stream. Everything else maps to UNK.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED.len() + 1 {
            return Err(Error::config(format!(
                "vocabulary size {max_size} leaves no room beyond the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen_any = false;
        for (pos, tok) in corpus.into_iter().enumerate() {
            seen_any = true;
            if RESERVED.contains(&tok) {
                continue;
            }
            let e = counts.entry(tok).or_insert((0, pos));
            e.0 += 1;
        }
        if !seen_any {
            return Err(Error::EmptyInput("vocabulary corpus"));
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(max_size - RESERVED.len());

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to UNK.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn ids(&self, tokens: &[&str]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// One token per line; line number equals id, reserved tokens included.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::data(format!(
                "vocabulary file {} is missing reserved tokens",
                path.display()
            )));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::data(format!(
                    "vocabulary file {}: line {i} is {:?}, expected {expected:?}",
                    path.display(),
                    tokens[i]
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// A `[V, d]` table of learned vectors, one row per vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<F> {
    pub weights: Tensor<F>,
}

impl<F: Real> EmbeddingTable<F> {
    /// Uniform init in [-0.08, 0.08), the same scheme every table and weight
    /// matrix in the model uses.
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        EmbeddingTable {
            weights: Tensor::rand_uniform(vec![vocab_size, dim], -0.08, 0.08, rng),
        }
    }

    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        EmbeddingTable {
            weights: Tensor::zeros(vec![vocab_size, dim]),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_with_reserved_prefix() {
        let v = Vocabulary::build(["a", "a", "b"], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(UNK), "<unk>");
        assert_eq!(v.token(BOS), "<bos>");
        assert_eq!(v.token(EOS), "<eos>");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
    }

    #[test]
    fn unseen_token_maps_to_unk() {
        let v = Vocabulary::build(["a"], 5).unwrap();
        assert_eq!(v.id("zebra"), UNK);
    }

    #[test]
    fn ties_break_by_first_occurrence() {
        // "b" and "a" both occur twice; "b" appears first in the stream.
        let v = Vocabulary::build(["b", "a", "b", "a"], 6).unwrap();
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("a"), 5);
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let v = Vocabulary::build(["x", "y", "y", "z", "z", "z"], 6).unwrap();
        assert_eq!(v.id("z"), 4);
        assert_eq!(v.id("y"), 5);
        assert_eq!(v.id("x"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(std::iter::empty::<&str>(), 10).is_err());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tokens.vocab");
        let v = Vocabulary::build(["hund", "katze", "hund"], 8).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        for id in 0..v.len() as u32 {
            assert_eq!(v.token(id), loaded.token(id));
            assert_eq!(loaded.id(v.token(id)), id);
        }
    }
}
