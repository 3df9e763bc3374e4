use std::collections::BTreeMap;

use super::lexicon::Lexicon;
use super::ngram::{WordId, WordNgram, BOS, UNK};
use crate::{Error, Result};

const ROOT: u32 = 0;

#[derive(Clone, Debug, Default)]
struct Node {
    children: BTreeMap<usize, u32>,
    /// Words spelled exactly by the path to this node.
    words: Vec<WordId>,
    /// Words spelled by this node's path or any extension of it.
    subtree: Vec<WordId>,
}

/// Position in the scorer after some prefix of characters: every live
/// (trie node, word history) pair with the best score of the complete
/// words consumed on the way there.
///
/// States compare equal when they describe the same set of paths with the
/// same scores, which makes them usable for hypothesis recombination.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState {
    frontier: BTreeMap<(u32, Vec<WordId>), f64>,
    score: f64,
}

impl LmState {
    /// Best non-terminal score of the prefix that produced this state.
    pub fn score(&self) -> f64 {
        self.score
    }

    /// True once no segmentation can explain the prefix.
    pub fn is_dead(&self) -> bool {
        self.frontier.is_empty()
    }
}

/// Character-sequence scorer built from a lexicon and a word n-gram.
///
/// The score of a character string is the best, over all ways of cutting
/// it into words, of the n-gram log-probability of those words. Before
/// the string is finished the last piece may be an unfinished word; it
/// counts as its most likely completion. A finished (terminal) string
/// must end on a word boundary and pays for the sentence end.
///
/// Any single character may also be read as an unknown word, scored
/// `ln P(<unk> | h) + unk_penalty`. A penalty of `-inf` disables this.
#[derive(Clone, Debug)]
pub struct CharScorer {
    lm: WordNgram,
    nodes: Vec<Node>,
    vocab_size: usize,
    unk_penalty: f64,
}

impl CharScorer {
    pub fn new(lexicon: &Lexicon, lm: WordNgram, vocab_size: usize, unk_penalty: f64) -> Result<Self> {
        if unk_penalty.is_nan() || unk_penalty > 0.0 {
            return Err(Error::Config(format!("unk_penalty must be <= 0, got {unk_penalty}")));
        }
        let mut nodes = vec![Node::default()];
        for (word, spelling) in lexicon.entries() {
            if let Some(&id) = spelling.iter().find(|&&c| c >= vocab_size) {
                return Err(Error::Vocabulary { id, size: vocab_size });
            }
            let wid = lm.id(word).unwrap_or(UNK);
            let mut at = ROOT as usize;
            for &c in spelling {
                at = match nodes[at].children.get(&c) {
                    Some(&n) => n as usize,
                    None => {
                        nodes.push(Node::default());
                        let n = nodes.len() - 1;
                        nodes[at].children.insert(c, n as u32);
                        n
                    }
                };
                nodes[at].subtree.push(wid);
            }
            nodes[at].words.push(wid);
        }
        for n in &mut nodes {
            n.words.sort_unstable();
            n.words.dedup();
            n.subtree.sort_unstable();
            n.subtree.dedup();
        }
        Ok(CharScorer {
            lm,
            nodes,
            vocab_size,
            unk_penalty,
        })
    }

    pub fn lm(&self) -> &WordNgram {
        &self.lm
    }

    pub fn initial_state(&self) -> LmState {
        let mut frontier = BTreeMap::new();
        frontier.insert((ROOT, self.push(&[], BOS)), 0.0);
        LmState { frontier, score: 0.0 }
    }

    fn push(&self, history: &[WordId], w: WordId) -> Vec<WordId> {
        let mut h = history.to_vec();
        h.push(w);
        let keep = self.lm.order().saturating_sub(1);
        if h.len() > keep {
            h.drain(..h.len() - keep);
        }
        h
    }

    /// Best completion score of a partial word ending at `node`.
    fn bound(&self, node: u32, history: &[WordId]) -> f64 {
        if node == ROOT {
            return 0.0;
        }
        self.nodes[node as usize]
            .subtree
            .iter()
            .map(|&w| self.lm.log_prob(history, w))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn best(&self, frontier: &BTreeMap<(u32, Vec<WordId>), f64>) -> f64 {
        frontier
            .iter()
            .map(|((n, h), acc)| acc + self.bound(*n, h))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Consumes one character. Returns the new state and the change in
    /// score, which is never positive (`-inf` once the state dies).
    pub fn advance(&self, state: &LmState, c: usize) -> Result<(LmState, f64)> {
        if c >= self.vocab_size {
            return Err(Error::Vocabulary { id: c, size: self.vocab_size });
        }
        let mut next: BTreeMap<(u32, Vec<WordId>), f64> = BTreeMap::new();
        let mut relax = |key: (u32, Vec<WordId>), v: f64| {
            if v > f64::NEG_INFINITY {
                let slot = next.entry(key).or_insert(f64::NEG_INFINITY);
                if v > *slot {
                    *slot = v;
                }
            }
        };
        for ((node, h), &acc) in &state.frontier {
            if let Some(&child) = self.nodes[*node as usize].children.get(&c) {
                relax((child, h.clone()), acc);
                for &w in &self.nodes[child as usize].words {
                    relax((ROOT, self.push(h, w)), acc + self.lm.log_prob(h, w));
                }
            }
            if *node == ROOT && self.unk_penalty > f64::NEG_INFINITY {
                relax((ROOT, self.push(h, UNK)), acc + self.lm.log_prob(h, UNK) + self.unk_penalty);
            }
        }
        let score = self.best(&next);
        let delta = if score == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            score - state.score
        };
        Ok((LmState { frontier: next, score }, delta))
    }

    /// Extra score for ending the sentence in `state`: the best
    /// boundary path plus `ln P(</s> | h)`, minus the current score.
    pub fn finish_delta(&self, state: &LmState) -> f64 {
        let terminal = self.terminal_score(state);
        if terminal == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            terminal - state.score
        }
    }

    fn terminal_score(&self, state: &LmState) -> f64 {
        state
            .frontier
            .iter()
            .filter(|((n, _), _)| *n == ROOT)
            .map(|((_, h), acc)| acc + self.lm.log_prob(h, super::ngram::EOS))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// State after consuming all of `chars` from the start.
    pub fn state_after(&self, chars: &[usize]) -> Result<LmState> {
        let mut s = self.initial_state();
        for &c in chars {
            s = self.advance(&s, c)?.0;
        }
        Ok(s)
    }

    /// Score of `chars`; `terminal` requires the string to end on a word
    /// boundary and adds the sentence-end probability.
    pub fn score_chars(&self, chars: &[usize], terminal: bool) -> Result<f64> {
        let s = self.state_after(chars)?;
        Ok(if terminal { self.terminal_score(&s) } else { s.score })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    // characters: a=3, b=4, c=5
    fn spec_example() -> CharScorer {
        let arpa = "\\data\\\nngram 1=5\nngram 2=2\nngram 3=1\n\n\\1-grams:\n-99\t<s>\n-1\t</s>\n-1\t<unk>\n-1\tA\n-1\tB\n\n\\2-grams:\n\
                    -0.2218487496163564\t<s> A\n-0.3010299956639812\tA B\n\n\\3-grams:\n-0.09691001300805639\tA B </s>\n\\end\\\n";
        let lm = WordNgram::from_arpa(arpa, Path::new("g.arpa")).unwrap();
        let lex = Lexicon::from_entries([("A", vec![3, 4]), ("B", vec![5])], 6).unwrap();
        CharScorer::new(&lex, lm, 6, f64::NEG_INFINITY).unwrap()
    }

    #[test]
    fn spelled_sentence_scores_product() {
        let s = spec_example();
        let got = s.score_chars(&[3, 4, 5], true).unwrap();
        assert!((got - (0.6f64 * 0.5 * 0.8).ln()).abs() < 1e-9, "{got}");
        assert_eq!(s.score_chars(&[], false).unwrap(), 0.0);
        assert_eq!(s.score_chars(&[4], false).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(s.score_chars(&[6], false), Err(Error::Vocabulary { id: 6, size: 6 })));
    }

    #[test]
    fn ambiguous_segmentation_takes_best_path() {
        let lm = WordNgram::train(&["X X", "X X", "Y", "X"], [], 3).unwrap();
        let lex = Lexicon::from_entries([("X", vec![3]), ("Y", vec![3, 3])], 4).unwrap();
        let s = CharScorer::new(&lex, lm.clone(), 4, f64::NEG_INFINITY).unwrap();
        let (x, y) = (lm.id("X").unwrap(), lm.id("Y").unwrap());
        let xx = lm.log_prob(&[BOS], x) + lm.log_prob(&[BOS, x], x);
        let yy = lm.log_prob(&[BOS], y);
        let term = s.score_chars(&[3, 3], true).unwrap();
        let xx_t = xx + lm.log_prob(&[x, x], super::super::ngram::EOS);
        let yy_t = yy + lm.log_prob(&[BOS, y], super::super::ngram::EOS);
        assert!((term - xx_t.max(yy_t)).abs() < 1e-12);
        // non-terminal also lets the second "a" start another X or Y
        let partial = s.score_chars(&[3, 3], false).unwrap();
        assert!(partial >= xx.max(yy) - 1e-12);
    }

    #[test]
    fn single_char_word_delta_is_its_lm_score() {
        let lm = WordNgram::train(&["p q", "q"], [], 3).unwrap();
        let lex = Lexicon::from_entries([("p", vec![3]), ("q", vec![4]), ("qq", vec![4, 4])], 5).unwrap();
        let s = CharScorer::new(&lex, lm.clone(), 5, -5.0).unwrap();
        let (_, d) = s.advance(&s.initial_state(), 3).unwrap();
        assert!((d - lm.log_prob(&[BOS], lm.id("p").unwrap())).abs() < 1e-12);
    }

    #[test]
    fn equal_states_recombine() {
        let lm = WordNgram::train(&["p q"], [], 1).unwrap();
        let lex = Lexicon::from_entries([("p", vec![3]), ("q", vec![4])], 5).unwrap();
        let s = CharScorer::new(&lex, lm, 5, -5.0).unwrap();
        // a unigram model keeps no history and p, q are equally likely
        assert_eq!(s.state_after(&[3, 4]).unwrap(), s.state_after(&[4, 4]).unwrap());
        assert_ne!(s.state_after(&[3, 4]).unwrap(), s.state_after(&[4, 3]).unwrap());
    }
}
