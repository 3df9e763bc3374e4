//! Output label inventory: three reserved tokens followed by characters.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const UNK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<unk>", "<sos>", "<eos>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens first, then `chars` in order. Duplicates are dropped.
    pub fn new<I, S>(chars: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        for c in chars {
            v.push(c.into());
        }
        v
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Character ids of `text`; whitespace is skipped and unknown
    /// characters map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK)
            })
            .collect()
    }

    /// Concatenated characters, reserved tokens dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.token(i))
            .collect()
    }

    pub fn check(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                id,
                size: self.len(),
            })
        }
    }

    /// One character per line, reserved tokens omitted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        crate::harness::write_atomic(path, out.as_bytes())
    }

    /// Reads a vocabulary file. Leading reserved tokens, if present, are
    /// accepted and skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let skip = lines
            .iter()
            .zip(RESERVED)
            .take_while(|(l, r)| *l == r)
            .count();
        let v = Vocab::new(lines[skip..].iter().copied());
        if v.len() != lines.len() - skip + RESERVED.len() {
            return Err(Error::format(path, "duplicate token"));
        }
        Ok(v)
    }
}

pub fn is_special(id: usize) -> bool {
    id == UNK || id == SOS || id == EOS
}

/// Removes reserved tokens before scoring.
pub fn strip_special(ids: &[usize]) -> Vec<usize> {
    ids.iter().copied().filter(|&i| !is_special(i)).collect()
}
