//! `las` command line.
//!
//! Every command accepts `--config FILE` (`key = value` lines) and any
//! number of `--set key=value` overrides, and writes a reproducibility
//! stamp next to its outputs. Exit status: 0 ok, 1 usage or
//! configuration, 2 data, 3 numeric failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{load_split, read_table};
use super::settings::Settings;
use super::{output_path, synth, write_atomic};
use crate::charlm::{CharScorer, Lexicon, WordNgram};
use crate::decoding::{corpus_cer, decode_batch, ser, Hypothesis};
use crate::las::{checkpoint, LasModel};
use crate::training::{train_loop, Example};
use crate::vocab::Vocab;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "las", version, about = "Listen-Attend-Spell speech recognizer on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes model.lasc, metrics.tsv and stamp.txt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a split with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// ARPA word n-gram for LM fusion.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Lexicon for the LM; defaults to the corpus lexicon.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value = "runs/decode.tsv")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score hypotheses against references (both `id<TAB>text…`).
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "runs/eval.tsv")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a word n-gram on the training transcripts.
    BuildLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "runs/lm.arpa")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode once per value of one setting; emits (value, CER, SER).
    Sweep {
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        lm: Option<PathBuf>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            i32::from(e.exit_code())
        }
    }
}

fn settings(common: &Common) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(p) = &common.config {
        s.apply_file(p)?;
    }
    s.apply_overrides(&common.overrides)?;
    s.validate()?;
    Ok(s)
}

fn stamp_dir(dir: &Path, s: &Settings, command: &str) -> Result<()> {
    write_atomic(&dir.join("stamp.txt"), s.stamp(command).as_bytes())
}

fn stamp_file(file: &Path, s: &Settings, command: &str) -> Result<()> {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    write_atomic(&file.with_file_name(name), s.stamp(command).as_bytes())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, common } => {
            let s = settings(&common)?;
            let out = output_path(&out);
            let c = synth::generate(&s.data, &out)?;
            stamp_dir(&out, &s, "gen-data")?;
            println!(
                "wrote {} train, {} valid, {} test utterances to {}",
                c.counts[0],
                c.counts[1],
                c.counts[2],
                out.display()
            );
            Ok(())
        }
        Command::Train { data, out, common } => {
            let s = settings(&common)?;
            train_command(s, &data, &output_path(&out))
        }
        Command::Decode {
            model,
            data,
            split,
            lm,
            lexicon,
            out,
            common,
        } => {
            let s = settings(&common)?;
            let ctx = DecodeContext::load(&s, &model, &data, &split, lm.as_deref(), lexicon.as_deref())?;
            let hyps = ctx.decode(&s)?;
            let out = output_path(&out);
            let mut text = String::new();
            for (ex, h) in ctx.examples.iter().zip(&hyps) {
                let _ = writeln!(
                    text,
                    "{}\t{}\t{:.6}\t{:.6}",
                    ex.id,
                    ctx.vocab.decode(&h.chars),
                    h.model_log_prob,
                    h.fused_cost
                );
            }
            write_atomic(&out, text.as_bytes())?;
            stamp_file(&out, &s, "decode")?;
            let (cer, ser) = ctx.score(&hyps)?;
            let incomplete = hyps.iter().filter(|h| !h.completed).count();
            println!("decoded {} utterances to {}", hyps.len(), out.display());
            println!("CER\t{cer:.4}\nSER\t{ser:.4}");
            if incomplete > 0 {
                eprintln!("warning: {incomplete} hypotheses did not reach <eos>");
            }
            Ok(())
        }
        Command::Eval {
            reference,
            hyp,
            out,
            common,
        } => {
            let s = settings(&common)?;
            let (cer, ser, n) = eval_files(&reference, &hyp)?;
            let out = output_path(&out);
            let report = format!("metric\tvalue\nCER\t{cer:.6}\nSER\t{ser:.6}\nutterances\t{n}\n");
            write_atomic(&out, report.as_bytes())?;
            stamp_file(&out, &s, "eval")?;
            println!("CER\t{cer:.4}\nSER\t{ser:.4}\nutterances\t{n}");
            Ok(())
        }
        Command::BuildLm { data, out, common } => {
            let s = settings(&common)?;
            let vocab = Vocab::load(&data.join("vocab.txt"))?;
            let lexicon = Lexicon::load(&data.join("lexicon.txt"), &vocab)?;
            let sentences: Vec<String> = read_table(&data.join("train").join("text.tsv"))?
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let words = lexicon.entries().iter().map(|(w, _)| w.clone());
            let lm = WordNgram::train(&sentences, words, s.lm_order)?;
            let out = output_path(&out);
            lm.save(&out)?;
            stamp_file(&out, &s, "build-lm")?;
            println!(
                "trained a {}-gram on {} sentences ({} words) -> {}",
                s.lm_order,
                sentences.len(),
                lm.words().len(),
                out.display()
            );
            Ok(())
        }
        Command::Sweep {
            param,
            values,
            model,
            data,
            split,
            lm,
            lexicon,
            out,
            common,
        } => {
            let s = settings(&common)?;
            let ctx = DecodeContext::load(&s, &model, &data, &split, lm.as_deref(), lexicon.as_deref())?;
            let mut table = format!("{param}\tCER\tSER\n");
            for v in &values {
                let mut t = s.clone();
                t.set(&param, v)?;
                t.validate()?;
                let (cer, ser) = ctx.score(&ctx.decode(&t)?)?;
                let _ = writeln!(table, "{v}\t{cer:.6}\t{ser:.6}");
                eprintln!("{param}={v}: CER {cer:.4} SER {ser:.4}");
            }
            let out = output_path(&out.unwrap_or_else(|| PathBuf::from(format!("runs/sweep_{param}.tsv"))));
            write_atomic(&out, table.as_bytes())?;
            stamp_file(&out, &s, "sweep")?;
            print!("{table}");
            Ok(())
        }
    }
}

fn train_command(mut s: Settings, data: &Path, out: &Path) -> Result<()> {
    let vocab = Vocab::load(&data.join("vocab.txt"))?;
    let train = load_split(&data.join("train"), &vocab, s.normalize)?;
    let valid = load_split(&data.join("valid"), &vocab, s.normalize)?;
    s.model.input_dim = train[0].features.cols();
    s.model.vocab_size = vocab.len();
    s.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    stamp_dir(out, &s, "train")?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.train.seed);
    let model = LasModel::new(s.model.clone(), &mut rng)?;
    eprintln!(
        "training {} parameters on {} utterances ({} valid)",
        model.param_count(),
        train.len(),
        valid.len()
    );
    let metrics_path = out.join("metrics.tsv");
    let ckpt = out.join("model.lasc");
    let mut log = String::from("epoch\ttrain_loss_per_char\tvalid_loss_per_char\tlr\twall_seconds\n");
    let mut io_error = None;
    let mut best_seen = f64::INFINITY;
    let outcome = train_loop(&model, &train, &valid, &s.train, |row, best| {
        log.push_str(&row.tsv_line());
        log.push('\n');
        eprintln!("{}", row.tsv_line());
        let mut step = || -> Result<()> {
            write_atomic(&metrics_path, log.as_bytes())?;
            if row.valid_loss_per_char < best_seen {
                best_seen = row.valid_loss_per_char;
                checkpoint::save(best, &ckpt, s.train.precision)?;
            }
            Ok(())
        };
        if let Err(e) = step() {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    checkpoint::save(&outcome.best, &ckpt, s.train.precision)?;
    let _ = std::io::stderr().flush();
    println!(
        "best epoch {} (valid loss/char {:.4}); model written to {}",
        outcome.best_epoch,
        outcome.metrics[outcome.best_epoch.max(1) - 1].valid_loss_per_char,
        ckpt.display()
    );
    Ok(())
}

/// Loaded model, data and optional LM for decoding one split.
struct DecodeContext {
    model: LasModel,
    vocab: Vocab,
    examples: Vec<Example>,
    scorer: Option<CharScorer>,
}

impl DecodeContext {
    fn load(
        s: &Settings,
        model: &Path,
        data: &Path,
        split: &str,
        lm: Option<&Path>,
        lexicon: Option<&Path>,
    ) -> Result<Self> {
        let vocab = Vocab::load(&data.join("vocab.txt"))?;
        let (model, _) = checkpoint::load(model)?;
        if model.config.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model has {} output tokens, corpus vocabulary has {}",
                model.config.vocab_size,
                vocab.len()
            )));
        }
        let examples = load_split(&data.join(split), &vocab, s.normalize)?;
        let scorer = match lm {
            Some(lm_path) => {
                let lex_path = lexicon.map_or_else(|| data.join("lexicon.txt"), Path::to_path_buf);
                let lex = Lexicon::load(&lex_path, &vocab)?;
                Some(CharScorer::new(&lex, WordNgram::load(lm_path)?, vocab.len(), s.unk_penalty)?)
            }
            None => None,
        };
        Ok(DecodeContext {
            model,
            vocab,
            examples,
            scorer,
        })
    }

    fn decode(&self, s: &Settings) -> Result<Vec<Hypothesis>> {
        let inputs: Vec<&crate::numerics::Tensor> = self.examples.iter().map(|e| &e.features).collect();
        decode_batch(&self.model, &inputs, &s.decode, self.scorer.as_ref(), s.threads)
    }

    fn score(&self, hyps: &[Hypothesis]) -> Result<(f64, f64)> {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = self
            .examples
            .iter()
            .zip(hyps)
            .map(|(e, h)| (e.chars.clone(), h.chars.clone()))
            .collect();
        Ok((corpus_cer(&pairs)?, ser(&pairs)?))
    }
}

/// Corpus CER, SER and utterance count. Texts are compared character by
/// character with whitespace removed; hypotheses are matched by id.
pub fn eval_files(reference: &Path, hyp: &Path) -> Result<(f64, f64, usize)> {
    let refs = read_table(reference)?;
    let hyps: HashMap<String, String> = read_table(hyp)?.into_iter().collect();
    let mut ids: HashMap<char, usize> = HashMap::new();
    let mut intern = |text: &str| -> Vec<usize> {
        text.chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| {
                let next = ids.len() + crate::vocab::RESERVED.len();
                *ids.entry(c).or_insert(next)
            })
            .collect()
    };
    let mut pairs = Vec::with_capacity(refs.len());
    for (id, text) in &refs {
        let h = hyps
            .get(id)
            .ok_or_else(|| Error::format(hyp, format!("no hypothesis for utterance {id}")))?;
        pairs.push((intern(text), intern(h)));
    }
    if pairs.is_empty() {
        return Err(Error::format(reference, "no reference utterances"));
    }
    Ok((corpus_cer(&pairs)?, ser(&pairs)?, pairs.len()))
}
