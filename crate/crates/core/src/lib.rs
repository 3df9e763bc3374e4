//! Listen-Attend-Spell attention encoder-decoder, built from scratch.
//!
//! The crate is layered bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode autodiff and gradient checking
//! * [`layers`]: embedding table, LSTM cell, bidirectional LSTM stack
//! * [`attention`]: content, location-aware and sigmoid-smoothed attention
//! * [`las`]: the full model, frame skipping and checkpoints
//! * [`training`]: cross-entropy, ADAM, clipping, weight noise, the epoch loop
//! * [`charlm`]: character-level LM built from a lexicon and a word trigram
//! * [`decoding`]: temperature beam search with LM fusion, CER and SER
//! * [`harness`]: synthetic data, feature files, configuration and the CLI
//!
//! The guide in `book/` walks through each layer; its code snippets are
//! compiled and run as doc-tests of this crate.

pub mod attention;
pub mod charlm;
pub mod decoding;
mod error;
pub mod harness;
pub mod las;
pub mod layers;
pub mod numerics;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/layers.md")]
    mod layers {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/charlm.md")]
    mod charlm {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
