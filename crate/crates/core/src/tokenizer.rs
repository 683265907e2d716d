//! Fixed-vocabulary whitespace tokenizer.
//!
//! Lowercases, strips punctuation, maps unknown words to a reserved id and
//! pads/truncates to the configured token length. Vocabulary files hold one
//! token per line; the line number is the id.

use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Words the synthetic language templates can emit, plus the two reserved
/// slots. Kept here so the backbone vocabulary and the scene generator agree.
pub const DEFAULT_VOCAB: &[&str] = &[
    "<pad>", "<unk>", "the", "a", "that", "is", "to", "of", "on", "at", "and", "workspace",
    "upper", "lower", "middle", "left", "right", "center", "above", "below", "red", "green",
    "blue", "yellow", "mustard", "purple", "orange", "cyan", "pink", "gray", "brown", "white",
    "black", "cube", "ball", "block", "tee", "bracket", "bottle",
];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<String>,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vec<String>, max_len: usize) -> Result<Self> {
        if vocab.len() < 2 {
            return Err(Error::Config(
                "vocabulary needs at least the pad and unk slots".into(),
            ));
        }
        if max_len == 0 {
            return Err(Error::Config("token length must be positive".into()));
        }
        Ok(Tokenizer { vocab, max_len })
    }

    pub fn with_default_vocab(max_len: usize) -> Self {
        Self::new(DEFAULT_VOCAB.iter().map(|s| s.to_string()).collect(), max_len).unwrap()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Deterministic encoding: lowercase, punctuation to spaces, whitespace
    /// split, unknown words to `UNK_ID`, truncate/pad to `max_len`.
    /// Returns the ids and the padding mask (true = real token).
    pub fn tokenize(&self, text: &str) -> Result<(Vec<usize>, Vec<bool>)> {
        let cleaned: String = text
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() || c == '<' || c == '>' { c } else { ' ' })
            .collect();
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Input("expression is empty".into()));
        }
        let mut ids = Vec::with_capacity(self.max_len);
        for w in words.iter().take(self.max_len) {
            let id = self
                .vocab
                .iter()
                .position(|v| v == w)
                .unwrap_or(UNK_ID);
            ids.push(id);
        }
        let valid = ids.len();
        ids.resize(self.max_len, PAD_ID);
        let mask: Vec<bool> = (0..self.max_len).map(|i| i < valid).collect();
        Ok((ids, mask))
    }

    pub fn save_vocab(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.vocab.join("\n"))?;
        Ok(())
    }

    pub fn load_vocab(path: &Path, max_len: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let vocab: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        Self::new(vocab, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_length() {
        let tok = Tokenizer::with_default_vocab(20);
        let (ids, mask) = tok.tokenize("red cube").unwrap();
        assert_eq!(ids.len(), 20);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(ids[2..], [PAD_ID; 18]);
        assert_ne!(ids[0], UNK_ID);
        assert_ne!(ids[1], UNK_ID);
    }

    #[test]
    fn deterministic() {
        let tok = Tokenizer::with_default_vocab(20);
        assert_eq!(
            tok.tokenize("the Mustard Bottle!").unwrap(),
            tok.tokenize("the mustard bottle").unwrap()
        );
    }

    #[test]
    fn truncates_long_sentences() {
        let tok = Tokenizer::with_default_vocab(20);
        let long = vec!["red"; 25].join(" ");
        let (ids, mask) = tok.tokenize(&long).unwrap();
        assert_eq!(ids.len(), 20);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn unknown_maps_to_unk() {
        let tok = Tokenizer::with_default_vocab(20);
        let (ids, _) = tok.tokenize("zyzzyva cube").unwrap();
        assert_eq!(ids[0], UNK_ID);
    }

    #[test]
    fn empty_is_an_input_error() {
        let tok = Tokenizer::with_default_vocab(20);
        assert!(matches!(tok.tokenize("  ,, "), Err(Error::Input(_))));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let tok = Tokenizer::with_default_vocab(16);
        tok.save_vocab(&path).unwrap();
        let back = Tokenizer::load_vocab(&path, 16).unwrap();
        assert_eq!(back.vocab_size(), tok.vocab_size());
        assert_eq!(
            back.tokenize("mustard bottle").unwrap(),
            tok.tokenize("mustard bottle").unwrap()
        );
    }
}
