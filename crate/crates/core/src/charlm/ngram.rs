use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

pub type WordId = u32;

pub const BOS: WordId = 0;
pub const EOS: WordId = 1;
pub const UNK: WordId = 2;
const SPECIALS: [&str; 3] = ["<s>", "</s>", "<unk>"];

/// ARPA files write log-zero as this value.
const LOG10_ZERO: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    /// ln P(w | h) for the n-gram `h w`.
    log_prob: f64,
    /// ln of the backoff weight when this n-gram is used as a history.
    log_bow: f64,
}

/// Word n-gram model in backoff form.
///
/// `log_prob(h, w)` is the stored value for `h w` when present, otherwise
/// `bow(h) · P(w | h')` with `h'` the history minus its oldest word.
/// Models trained here use interpolated Witten-Bell smoothing, which this
/// form represents exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct WordNgram {
    order: usize,
    words: Vec<String>,
    index: HashMap<String, WordId>,
    grams: HashMap<Vec<WordId>, Entry>,
}

type Counts = BTreeMap<Vec<WordId>, BTreeMap<WordId, u64>>;

impl WordNgram {
    fn with_vocabulary(order: usize, words: BTreeSet<String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().filter(|w| !SPECIALS.contains(&w.as_str())));
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i as WordId)).collect();
        WordNgram {
            order,
            words: all,
            index,
            grams: HashMap::new(),
        }
    }

    /// Trains an interpolated Witten-Bell model of the given order on
    /// whitespace-tokenized sentences. `extra_words` join the vocabulary
    /// and receive the unseen-word share of unigram mass.
    ///
    /// Unigram level: `(c(w) + T/V) / (N + T)` with `V` the number of
    /// predictable words (all but `<s>`). Higher orders:
    /// `(c(h w) + T(h) · P(w | h')) / (c(h) + T(h))`.
    pub fn train<S: AsRef<str>>(
        sentences: &[S],
        extra_words: impl IntoIterator<Item = String>,
        order: usize,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        let tokenized: Vec<Vec<&str>> = sentences
            .iter()
            .map(|s| s.as_ref().split_whitespace().collect())
            .filter(|s: &Vec<&str>| !s.is_empty())
            .collect();
        if tokenized.is_empty() {
            return Err(Error::Input("cannot train a language model on an empty corpus".into()));
        }
        let mut vocab: BTreeSet<String> = extra_words.into_iter().collect();
        vocab.extend(tokenized.iter().flatten().map(|w| w.to_string()));
        let mut lm = Self::with_vocabulary(order, vocab);

        // counts[k][history of length k][w]
        let mut counts: Vec<Counts> = vec![BTreeMap::new(); order];
        for sent in &tokenized {
            let mut toks = vec![BOS];
            toks.extend(sent.iter().map(|w| lm.index[*w]));
            toks.push(EOS);
            for i in 1..toks.len() {
                for (k, table) in counts.iter_mut().enumerate() {
                    if k > i {
                        break;
                    }
                    let h = toks[i - k..i].to_vec();
                    *table.entry(h).or_default().entry(toks[i]).or_default() += 1;
                }
            }
        }

        let predictable = (lm.words.len() - 1) as f64;
        let uni = &counts[0][&Vec::new()];
        let n: u64 = uni.values().sum();
        let t = uni.len() as f64;
        for w in 1..lm.words.len() as WordId {
            let c = uni.get(&w).copied().unwrap_or(0) as f64;
            let p = (c + t / predictable) / (n as f64 + t);
            lm.grams.insert(vec![w], Entry { log_prob: p.ln(), log_bow: 0.0 });
        }
        lm.grams.insert(vec![BOS], Entry { log_prob: f64::NEG_INFINITY, log_bow: 0.0 });

        for (k, table) in counts.iter().enumerate().skip(1) {
            for (h, follow) in table {
                let total: u64 = follow.values().sum();
                let types = follow.len() as f64;
                let denom = total as f64 + types;
                for (&w, &c) in follow {
                    let lower = lm.log_prob(&h[1..], w).exp();
                    let p = (c as f64 + types * lower) / denom;
                    let mut gram = h.clone();
                    gram.push(w);
                    lm.grams.insert(gram, Entry { log_prob: p.ln(), log_bow: 0.0 });
                }
                let e = lm.grams.get_mut(h).expect("every history is itself a stored n-gram");
                e.log_bow = (types / denom).ln();
                debug_assert_eq!(h.len(), k);
            }
        }
        Ok(lm)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Vocabulary including `<s>`, `</s>` and `<unk>` at ids 0, 1, 2.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    /// Words `log_prob` can predict: everything except `<s>`.
    pub fn predictable(&self) -> impl Iterator<Item = WordId> {
        1..self.words.len() as WordId
    }

    /// ln P(w | history). Only the last `order - 1` history words are used.
    pub fn log_prob(&self, history: &[WordId], w: WordId) -> f64 {
        let keep = history.len().min(self.order - 1);
        let mut h = &history[history.len() - keep..];
        let mut bow = 0.0;
        loop {
            let mut gram = h.to_vec();
            gram.push(w);
            if let Some(e) = self.grams.get(&gram) {
                return bow + e.log_prob;
            }
            if h.is_empty() {
                return f64::NEG_INFINITY;
            }
            bow += self.grams.get(h).map_or(0.0, |e| e.log_bow);
            h = &h[1..];
        }
    }

    /// Histories with stored n-grams, for inspection and tests.
    pub fn histories(&self) -> Vec<Vec<WordId>> {
        let mut hs: BTreeSet<Vec<WordId>> = BTreeSet::new();
        for g in self.grams.keys() {
            hs.insert(g[..g.len() - 1].to_vec());
        }
        hs.into_iter().collect()
    }

    /// Text in ARPA format, n-grams sorted by their word strings.
    pub fn to_arpa(&self) -> String {
        let mut by_order: Vec<Vec<(String, Entry, bool)>> = vec![Vec::new(); self.order];
        let histories: BTreeSet<Vec<WordId>> = self.histories().into_iter().collect();
        for (g, e) in &self.grams {
            let text: Vec<&str> = g.iter().map(|&w| self.words[w as usize].as_str()).collect();
            by_order[g.len() - 1].push((text.join(" "), *e, histories.contains(g)));
        }
        let mut out = String::from("\n\\data\\\n");
        for (k, grams) in by_order.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", k + 1, grams.len());
        }
        for (k, grams) in by_order.iter_mut().enumerate() {
            grams.sort_by(|a, b| a.0.cmp(&b.0));
            let _ = write!(out, "\n\\{}-grams:\n", k + 1);
            for (text, e, is_history) in grams.iter() {
                let _ = write!(out, "{}\t{text}", to_log10(e.log_prob));
                if *is_history && k + 1 < self.order {
                    let _ = write!(out, "\t{}", to_log10(e.log_bow));
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn from_arpa(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format(path, format!("line {line}: {msg}"));
        let mut declared: Vec<usize> = Vec::new();
        let mut raw: Vec<(Vec<String>, f64, f64)> = Vec::new();
        let mut section: Option<usize> = None;
        let mut seen_end = false;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "\\data\\" {
                section = Some(0);
            } else if line == "\\end\\" {
                seen_end = true;
                break;
            } else if let Some(k) = line.strip_prefix('\\').and_then(|l| l.strip_suffix("-grams:")) {
                let k: usize = k.parse().map_err(|_| bad(n, "bad section header"))?;
                if k == 0 || k > declared.len() {
                    return Err(bad(n, "section order not declared in header"));
                }
                section = Some(k);
            } else {
                match section {
                    None => return Err(bad(n, "text before \\data\\")),
                    Some(0) => {
                        let count = line
                            .strip_prefix("ngram ")
                            .and_then(|l| l.split_once('='))
                            .and_then(|(_, c)| c.trim().parse::<usize>().ok())
                            .ok_or_else(|| bad(n, "expected `ngram k=count`"))?;
                        declared.push(count);
                    }
                    Some(k) => {
                        let fields: Vec<&str> = line.split_whitespace().collect();
                        if fields.len() != k + 1 && fields.len() != k + 2 {
                            return Err(bad(n, "wrong number of fields for this order"));
                        }
                        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
                        let p = from_log10(num(fields[0])?);
                        let bow = if fields.len() == k + 2 { from_log10(num(fields[k + 1])?) } else { 0.0 };
                        raw.push((fields[1..=k].iter().map(|s| s.to_string()).collect(), p, bow));
                    }
                }
            }
        }
        if !seen_end {
            return Err(Error::format(path, "missing \\end\\ marker"));
        }
        if declared.is_empty() {
            return Err(Error::format(path, "no n-gram counts in header"));
        }
        for (k, &want) in declared.iter().enumerate() {
            let got = raw.iter().filter(|r| r.0.len() == k + 1).count();
            if got != want {
                return Err(Error::format(
                    path,
                    format!("header declares {want} {}-grams, found {got}", k + 1),
                ));
            }
        }
        let vocab: BTreeSet<String> = raw.iter().filter(|r| r.0.len() == 1).map(|r| r.0[0].clone()).collect();
        let mut lm = Self::with_vocabulary(declared.len(), vocab);
        for (words, log_prob, log_bow) in raw {
            let ids = words
                .iter()
                .map(|w| lm.id(w).ok_or_else(|| Error::format(path, format!("word {w:?} missing from 1-grams"))))
                .collect::<Result<Vec<_>>>()?;
            lm.grams.insert(ids, Entry { log_prob, log_bow });
        }
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_arpa(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, self.to_arpa().as_bytes())
    }
}

fn to_log10(ln: f64) -> f64 {
    if ln == f64::NEG_INFINITY {
        LOG10_ZERO
    } else {
        ln / std::f64::consts::LN_10
    }
}

fn from_log10(x: f64) -> f64 {
    if x <= LOG10_ZERO {
        f64::NEG_INFINITY
    } else {
        x * std::f64::consts::LN_10
    }
}
