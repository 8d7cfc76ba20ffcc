use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
/// Query-augmentation pad used by late interaction; attended like a word.
pub const QPAD: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[QPAD]"];

/// Word-level vocabulary. Ids are dense; the first five are reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and turns every non-alphanumeric, non-whitespace character into
/// a space.
pub fn normalize(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect()
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary words; ids start after the reserved
    /// block in iteration order. Duplicates are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {w:?}")));
            }
            if index.insert(w.clone(), tokens.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {w:?}")));
            }
            tokens.push(w);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Counts normalized words across `texts` and keeps the most frequent,
    /// ties broken alphabetically, so that the total size is at most
    /// `max_size`.
    pub fn build<'a, I>(texts: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < RESERVED.len() {
            return Err(Error::Config(format!(
                "vocabulary size {max_size} leaves no room for the {} reserved tokens",
                RESERVED.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in normalize(text).split_whitespace() {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        words.truncate(max_size - RESERVED.len());
        Self::from_words(words.into_iter().map(|(w, _)| w))
    }

    /// Reads a vocabulary file: one ordinary token per line, line `n`
    /// (0-based) receiving id `n + 5`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().collect();
        for (i, w) in words.iter().enumerate() {
            if w.trim().is_empty() {
                return Err(Error::parse(path, i + 1, "empty vocabulary line"));
            }
        }
        Self::from_words(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.file_contents()).map_err(|e| Error::io(path, e))
    }

    fn file_contents(&self) -> String {
        let mut out = String::new();
        for w in self.words() {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    /// Ordinary (non-reserved) tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Hex SHA-256 of the vocabulary file contents.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.file_contents().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `[CLS] w₁ … wₙ [SEP]`, truncated to `max_len` with `[SEP]` kept last.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for [CLS] and [SEP]"
        )));
    }
    let mut ids = vec![CLS];
    ids.extend(
        normalize(text)
            .split_whitespace()
            .take(max_len - 2)
            .map(|w| vocab.id(w)),
    );
    ids.push(SEP);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hello_world() -> Vocabulary {
        // ids 5 and 6
        Vocabulary::from_words(["hello", "world"]).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = hello_world();
        assert_eq!(tokenize("Hello world", &v, 16).unwrap(), vec![2, 5, 6, 3]);
        assert_eq!(tokenize("", &v, 16).unwrap(), vec![2, 3]);
        assert_eq!(tokenize("hello, unknown!", &v, 16).unwrap(), vec![2, 5, 1, 3]);
        let long = vec!["hello"; 300].join(" ");
        let ids = tokenize(&long, &v, 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(*ids.last().unwrap(), SEP);
        assert!(tokenize("x", &v, 1).is_err());
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = hello_world();
        for (i, t) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn build_orders_by_frequency_then_alphabet() {
        let v = Vocabulary::build(["b a c", "c b", "c"], 7).unwrap();
        assert_eq!(v.words(), &["c".to_string(), "b".to_string()]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = hello_world();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocabulary::from_words(["a", "a"]).is_err());
    }
}
