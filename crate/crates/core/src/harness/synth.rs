//! Synthetic speech-like corpus.
//!
//! Each character owns a random `d`-dimensional template. An utterance
//! emits, per character, a run of noisy copies of its template. Sentences
//! are drawn from a random word lexicon with Markov word transitions, so
//! a word n-gram trained on the transcripts carries real information.
//! Utterances are grouped into pseudo-speakers that share an affine
//! distortion, removed again by per-speaker normalization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::charlm::Lexicon;
use crate::numerics::Tensor;
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub n_chars: usize,
    pub feat_dim: usize,
    pub frames_mean: usize,
    pub frames_jitter: usize,
    pub noise_std: f64,
    /// Transcript length range in characters, inclusive.
    pub min_chars: usize,
    pub max_chars: usize,
    pub n_words: usize,
    /// Allowed successors per word.
    pub successors: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Consecutive utterances sharing one pseudo-speaker.
    pub speaker_block: usize,
    /// Std of the per-speaker additive offset.
    pub speaker_offset: f64,
    /// Std of the log of the per-speaker gain.
    pub speaker_scale: f64,
    pub template_min_dist: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            n_chars: 20,
            feat_dim: 8,
            frames_mean: 3,
            frames_jitter: 1,
            noise_std: 0.3,
            min_chars: 2,
            max_chars: 12,
            n_words: 60,
            successors: 5,
            n_train: 2000,
            n_valid: 200,
            n_test: 200,
            speaker_block: 50,
            speaker_offset: 1.0,
            speaker_scale: 0.2,
            template_min_dist: 1.5,
            seed: 7,
        }
    }
}

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.into()));
        if self.n_chars < 2 || self.n_chars > ALPHABET.len() {
            return err("n_chars must be between 2 and 36");
        }
        if self.feat_dim == 0 || self.frames_mean == 0 || self.frames_jitter >= self.frames_mean {
            return err("feat_dim and frames_mean must be positive and frames_jitter < frames_mean");
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return err("need 1 <= min_chars <= max_chars");
        }
        if self.n_words == 0 || self.successors == 0 || self.speaker_block == 0 {
            return err("n_words, successors and speaker_block must be positive");
        }
        if self.n_train + self.n_valid + self.n_test == 0 {
            return err("at least one utterance is required");
        }
        if !(self.noise_std >= 0.0 && self.speaker_offset >= 0.0 && self.speaker_scale >= 0.0) {
            return err("noise and speaker spreads must be non-negative");
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_chars", self.n_chars.to_string()),
            ("feat_dim", self.feat_dim.to_string()),
            ("frames_mean", self.frames_mean.to_string()),
            ("frames_jitter", self.frames_jitter.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("min_chars", self.min_chars.to_string()),
            ("max_chars", self.max_chars.to_string()),
            ("n_words", self.n_words.to_string()),
            ("successors", self.successors.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_valid", self.n_valid.to_string()),
            ("n_test", self.n_test.to_string()),
            ("speaker_block", self.speaker_block.to_string()),
            ("speaker_offset", self.speaker_offset.to_string()),
            ("speaker_scale", self.speaker_scale.to_string()),
            ("template_min_dist", self.template_min_dist.to_string()),
            ("data_seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key} expects {what}, got {value:?}"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        match key {
            "n_chars" => self.n_chars = int()?,
            "feat_dim" => self.feat_dim = int()?,
            "frames_mean" => self.frames_mean = int()?,
            "frames_jitter" => self.frames_jitter = int()?,
            "noise_std" => self.noise_std = float()?,
            "min_chars" => self.min_chars = int()?,
            "max_chars" => self.max_chars = int()?,
            "n_words" => self.n_words = int()?,
            "successors" => self.successors = int()?,
            "n_train" => self.n_train = int()?,
            "n_valid" => self.n_valid = int()?,
            "n_test" => self.n_test = int()?,
            "speaker_block" => self.speaker_block = int()?,
            "speaker_offset" => self.speaker_offset = float()?,
            "speaker_scale" => self.speaker_scale = float()?,
            "template_min_dist" => self.template_min_dist = float()?,
            "data_seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Characters `a, b, c, …`.
    pub fn characters(&self) -> Vec<String> {
        ALPHABET.chars().take(self.n_chars).map(String::from).collect()
    }
}

/// One generated utterance before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker: String,
    /// Words separated by single spaces.
    pub transcript: String,
    pub features: Tensor,
}

/// The sampled world: templates, words and word transitions.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub vocab: Vocab,
    /// `[n_chars × d]`, row `i` belongs to character id `i + 3`.
    pub templates: Tensor,
    /// Word spellings as character ids.
    pub words: Vec<Vec<usize>>,
    /// Per word: allowed next words with probabilities.
    pub transitions: Vec<Vec<(usize, f64)>>,
    rng: ChaCha8Rng,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let vocab = Vocab::new(spec.characters());
        let templates = sample_templates(&spec, &mut rng)?;
        let words = sample_words(&spec, &mut rng)?;
        let transitions = (0..words.len())
            .map(|_| {
                let k = spec.successors.min(words.len());
                let next: Vec<usize> = rand::seq::index::sample(&mut rng, words.len(), k).into_vec();
                let weights: Vec<f64> = next.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                next.into_iter().zip(weights).map(|(w, p)| (w, p / total)).collect()
            })
            .collect();
        Ok(SyntheticTask {
            spec,
            vocab,
            templates,
            words,
            transitions,
            rng,
        })
    }

    pub fn word_text(&self, w: usize) -> String {
        self.vocab.decode(&self.words[w])
    }

    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for (w, s) in self.words.iter().enumerate() {
            lex.insert(self.word_text(w), s.clone(), self.vocab.len())
                .expect("generated words are valid and distinct");
        }
        lex
    }

    /// Word sequence whose spelling has `min_chars..=max_chars` characters
    /// and never repeats a character back to back.
    pub fn sample_sentence(&mut self) -> Vec<usize> {
        let spec = &self.spec;
        loop {
            let target = self.rng.random_range(spec.min_chars..=spec.max_chars);
            let mut sent = vec![self.rng.random_range(0..self.words.len())];
            let mut len = self.words[sent[0]].len();
            while len < target {
                let last = *sent.last().unwrap();
                let last_char = *self.words[last].last().unwrap();
                let options: Vec<&(usize, f64)> = self.transitions[last]
                    .iter()
                    .filter(|(w, _)| self.words[*w][0] != last_char && len + self.words[*w].len() <= spec.max_chars)
                    .collect();
                let Ok(&&(next, _)) = options.choose_weighted(&mut self.rng, |(_, p)| *p) else {
                    break;
                };
                len += self.words[next].len();
                sent.push(next);
            }
            if (spec.min_chars..=spec.max_chars).contains(&len) {
                return sent;
            }
        }
    }

    /// Frames for a character string, before speaker distortion.
    pub fn render(&mut self, chars: &[usize]) -> Tensor {
        let spec = &self.spec;
        let d = spec.feat_dim;
        let noise = Normal::new(0.0, spec.noise_std).expect("validated");
        let mut data = Vec::new();
        for &c in chars {
            let run = self
                .rng
                .random_range(spec.frames_mean - spec.frames_jitter..=spec.frames_mean + spec.frames_jitter);
            let row = self.templates.row(c - crate::vocab::RESERVED.len()).to_vec();
            for _ in 0..run {
                data.extend(row.iter().map(|&x| x + noise.sample(&mut self.rng)));
            }
        }
        let t = data.len() / d;
        Tensor::new(&[t, d], data).expect("rows are complete")
    }

    /// `count` utterances named `{prefix}{index}`. Speaker ids are
    /// `{prefix}spk{block}`.
    pub fn sample_split(&mut self, prefix: &str, count: usize) -> Vec<SynthUtterance> {
        let d = self.spec.feat_dim;
        let mut out = Vec::with_capacity(count);
        let mut distortion = (vec![0.0; d], 1.0);
        for i in 0..count {
            if i % self.spec.speaker_block == 0 {
                let off = Normal::new(0.0, self.spec.speaker_offset).expect("validated");
                let gain = Normal::new(0.0, self.spec.speaker_scale).expect("validated");
                distortion = (
                    (0..d).map(|_| off.sample(&mut self.rng)).collect(),
                    gain.sample(&mut self.rng).exp(),
                );
            }
            let sent = self.sample_sentence();
            let chars: Vec<usize> = sent.iter().flat_map(|&w| self.words[w].clone()).collect();
            let mut feats = self.render(&chars);
            let (offset, scale) = &distortion;
            for r in 0..feats.rows() {
                for (j, o) in offset.iter().enumerate() {
                    let x = &mut feats.data_mut()[r * d + j];
                    *x = (*x * scale + o) as f32 as f64;
                }
            }
            let transcript: Vec<String> = sent.iter().map(|&w| self.word_text(w)).collect();
            out.push(SynthUtterance {
                id: format!("{prefix}{i:05}"),
                speaker: format!("{prefix}spk{:03}", i / self.spec.speaker_block),
                transcript: transcript.join(" "),
                features: feats,
            });
        }
        out
    }
}

fn sample_templates(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..10_000 {
        let t = Tensor::new(
            &[spec.n_chars, spec.feat_dim],
            (0..spec.n_chars * spec.feat_dim).map(|_| normal.sample(rng)).collect(),
        )?;
        if min_pairwise_distance(&t) >= spec.template_min_dist {
            return Ok(t);
        }
    }
    Err(Error::Config(format!(
        "could not place {} templates in {} dimensions at distance {}",
        spec.n_chars, spec.feat_dim, spec.template_min_dist
    )))
}

pub fn min_pairwise_distance(rows: &Tensor) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.rows() {
        for j in i + 1..rows.rows() {
            let d: f64 = rows.row(i).iter().zip(rows.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

fn sample_words(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let first = crate::vocab::RESERVED.len();
    let longest = spec.max_chars.min(4);
    let mut words: Vec<Vec<usize>> = Vec::new();
    let mut attempts = 0;
    while words.len() < spec.n_words {
        attempts += 1;
        if attempts > 100 * spec.n_words + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {} distinct words over {} characters",
                spec.n_words, spec.n_chars
            )));
        }
        let len = rng.random_range(1..=longest);
        let mut w: Vec<usize> = Vec::with_capacity(len);
        while w.len() < len {
            let c = rng.random_range(first..first + spec.n_chars);
            if w.last() != Some(&c) {
                w.push(c);
            }
        }
        if !words.contains(&w) {
            words.push(w);
        }
    }
    Ok(words)
}

/// Summary of a corpus written by [`generate`].
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub root: PathBuf,
    pub counts: [usize; 3],
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Writes the corpus under `out`:
///
/// ```text
/// vocab.txt  lexicon.txt
/// {train,valid,test}/manifest.tsv   id, feature path, transcript
/// {train,valid,test}/text.tsv       id, transcript
/// {train,valid,test}/speakers.tsv   id, speaker
/// {train,valid,test}/feats/<id>.lasf
/// ```
pub fn generate(spec: &SyntheticTaskSpec, out: &Path) -> Result<GeneratedCorpus> {
    let mut task = SyntheticTask::new(spec.clone())?;
    task.vocab.save(&out.join("vocab.txt"))?;
    task.lexicon().save(&out.join("lexicon.txt"), &task.vocab)?;
    let counts = [spec.n_train, spec.n_valid, spec.n_test];
    for (split, &n) in SPLITS.iter().zip(&counts) {
        let dir = out.join(split);
        let utts = task.sample_split(&format!("{split}_"), n);
        let (mut manifest, mut text, mut speakers) = (String::new(), String::new(), String::new());
        for u in &utts {
            let rel = format!("feats/{}.lasf", u.id);
            super::features::write(&dir.join(&rel), &u.features)?;
            let _ = writeln!(manifest, "{}\t{rel}\t{}", u.id, u.transcript);
            let _ = writeln!(text, "{}\t{}", u.id, u.transcript);
            let _ = writeln!(speakers, "{}\t{}", u.id, u.speaker);
        }
        super::write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())?;
        super::write_atomic(&dir.join("text.tsv"), text.as_bytes())?;
        super::write_atomic(&dir.join("speakers.tsv"), speakers.as_bytes())?;
    }
    Ok(GeneratedCorpus {
        root: out.to_path_buf(),
        counts,
    })
}
