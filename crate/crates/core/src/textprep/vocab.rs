use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";

/// Token ids with training frequencies. Ids 0 and 1 are reserved for
/// padding and unknown tokens; the rest run by descending frequency, ties
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<usize>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, freqs: Vec<usize>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            freqs,
            index,
        }
    }

    /// Keeps tokens seen at least `min_count` times.
    pub fn build<'a, I, D>(docs: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a str>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument(
                "min_count must be at least 1".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            for t in doc {
                *counts.entry(t).or_default() += 1;
                total += 1;
            }
        }
        if total == 0 {
            return Err(Error::Empty(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_count && *t != PAD_TOKEN && *t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut freqs = vec![0, 0];
        for (t, n) in kept {
            tokens.push(t.to_string());
            freqs.push(n);
        }
        Ok(Self::from_parts(tokens, freqs))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn freq(&self, id: usize) -> usize {
        self.freqs[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved `(token, frequency)` pairs in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.tokens
            .iter()
            .zip(&self.freqs)
            .skip(2)
            .map(|(t, f)| (t.as_str(), *f))
    }

    /// `token<TAB>frequency` per line, reserved tokens first.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            let _ = writeln!(out, "{t}\t{f}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, f) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected token<TAB>frequency".into(),
            })?;
            let f: usize = f.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad frequency `{f}`"),
            })?;
            tokens.push(t.to_string());
            freqs.push(f);
        }
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Parse {
                line: 1,
                message: "vocabulary must start with <PAD> and <UNK>".into(),
            });
        }
        let v = Self::from_parts(tokens, freqs);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Parse {
                line: 0,
                message: "duplicate token in vocabulary".into(),
            });
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }

    /// SHA-256 of the TSV form, hex encoded. Checkpoints carry it to refuse
    /// a mismatched vocabulary.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}
