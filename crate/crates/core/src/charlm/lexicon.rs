use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::vocab::{self, Vocab};
use crate::{Error, Result};

/// Spelling dictionary: each word maps to one non-empty character-id
/// sequence. Different words may share a spelling.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: Vec<(String, Vec<usize>)>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a lexicon from `(word, spelling)` pairs.
    pub fn from_entries<I, S>(entries: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<usize>)>,
        S: Into<String>,
    {
        let mut lex = Lexicon::new();
        for (w, s) in entries {
            lex.insert(w.into(), s, vocab_size)?;
        }
        Ok(lex)
    }

    pub fn insert(&mut self, word: String, spelling: Vec<usize>, vocab_size: usize) -> Result<()> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::Input(format!("invalid lexicon word {word:?}")));
        }
        if spelling.is_empty() {
            return Err(Error::Input(format!("word {word:?} has an empty spelling")));
        }
        if let Some(&id) = spelling.iter().find(|&&c| c >= vocab_size || vocab::is_special(c)) {
            return Err(Error::Vocabulary { id, size: vocab_size });
        }
        if self.entries.iter().any(|(w, _)| *w == word) {
            return Err(Error::Input(format!("duplicate lexicon word {word:?}")));
        }
        self.entries.push((word, spelling));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn spelling(&self, word: &str) -> Option<&[usize]> {
        self.entries.iter().find(|(w, _)| w == word).map(|(_, s)| s.as_slice())
    }

    /// Characters used by at least one spelling.
    pub fn alphabet(&self) -> HashSet<usize> {
        self.entries.iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    /// Parses `word<TAB>c h a r s` lines. Blank lines are skipped.
    pub fn parse(text: &str, vocab: &Vocab, path: &Path) -> Result<Self> {
        let mut lex = Lexicon::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, chars) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: expected word<TAB>chars", n + 1)))?;
            let spelling = chars
                .split_whitespace()
                .map(|c| {
                    vocab
                        .id(c)
                        .ok_or_else(|| Error::format(path, format!("line {}: unknown character {c:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            lex.insert(word.to_string(), spelling, vocab.len())
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, vocab, path)
    }

    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (w, s) in &self.entries {
            let chars: Vec<&str> = s.iter().map(|&c| vocab.token(c).unwrap_or("<unk>")).collect();
            let _ = writeln!(out, "{w}\t{}", chars.join(" "));
        }
        out
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        crate::harness::write_atomic(path, self.to_text(vocab).as_bytes())
    }
}
