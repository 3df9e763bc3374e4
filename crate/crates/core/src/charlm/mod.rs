//! Character-level language model: a spelling lexicon composed with a
//! word n-gram, queried one character at a time during decoding.

mod lexicon;
mod ngram;
mod scorer;

pub use lexicon::Lexicon;
pub use ngram::{WordId, WordNgram, BOS, EOS, UNK};
pub use scorer::{CharScorer, LmState};
