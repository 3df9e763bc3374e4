//! The Listen-Attend-Spell model.
//!
//! The listener is a BLSTM stack over acoustic frames. The speller is a
//! single LSTM whose input at step `i` is `[embed(y_{i-1}), c_{i-1}]`.
//! With the default `attend_with = new_state` ordering a step runs
//!
//! ```text
//! s_i    = LSTM([embed(y_{i-1}), c_{i-1}], s_{i-1})
//! c_i    = Attend(s_i, h, α_{i-1})
//! logits = [s_i, c_i]·W_o + b_o
//! ```
//!
//! while `attend_with = prev_state` scores with `s_{i-1}` before the LSTM
//! update. During training the listener sees every `frame_skip`-th frame;
//! decoding always uses all frames.

pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{load, load_expecting, save, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};

use crate::attention::{AttentionDims, AttentionKind, AttentionParams, Memory};
use crate::layers::{binder, Blstm, Embedding, LstmCell};
use crate::numerics::{Graph, Tensor, Var};
use crate::vocab::{EOS, SOS};
use crate::{Error, Result};

/// Which decoder state the attention scorer reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttendWith {
    #[default]
    NewState,
    PrevState,
}

impl FromStr for AttendWith {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new_state" => Ok(AttendWith::NewState),
            "prev_state" => Ok(AttendWith::PrevState),
            other => Err(Error::Config(format!(
                "attend_with must be new_state or prev_state, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AttendWith {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttendWith::NewState => "new_state",
            AttendWith::PrevState => "prev_state",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Frame skipping applies.
    Train,
    /// All frames are used.
    Decode,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LasConfig {
    pub input_dim: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub attention: AttentionKind,
    pub attn_dim: usize,
    pub loc_filters: usize,
    pub loc_width: usize,
    pub frame_skip: usize,
    pub attend_with: AttendWith,
}

impl Default for LasConfig {
    /// Desk-scale model for 20-character synthetic tasks.
    fn default() -> Self {
        LasConfig {
            input_dim: 8,
            enc_layers: 1,
            enc_hidden: 32,
            dec_hidden: 32,
            vocab_size: 23,
            embed_dim: 16,
            attention: AttentionKind::Content,
            attn_dim: 32,
            loc_filters: 4,
            loc_width: 5,
            frame_skip: 2,
            attend_with: AttendWith::NewState,
        }
    }
}

impl LasConfig {
    /// Full-size configuration: 3×256 BLSTM over 240-dim filterbanks with
    /// deltas, a 256-unit speller and 6,925 output labels.
    pub fn full_scale() -> Self {
        LasConfig {
            input_dim: 240,
            enc_layers: 3,
            enc_hidden: 256,
            dec_hidden: 256,
            vocab_size: 6925,
            embed_dim: 64,
            attn_dim: 256,
            ..LasConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_dim", self.input_dim),
            ("enc_layers", self.enc_layers),
            ("enc_hidden", self.enc_hidden),
            ("dec_hidden", self.dec_hidden),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("loc_filters", self.loc_filters),
            ("loc_width", self.loc_width),
            ("frame_skip", self.frame_skip),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must exceed the three reserved tokens".into()));
        }
        if self.loc_width % 2 == 0 {
            return Err(Error::Config(format!("loc_width must be odd, got {}", self.loc_width)));
        }
        Ok(())
    }

    pub fn memory_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    pub(crate) fn attention_dims(&self) -> AttentionDims {
        AttentionDims {
            state: self.dec_hidden,
            memory: self.memory_dim(),
            hidden: self.attn_dim,
            filters: self.loc_filters,
            width: self.loc_width,
        }
    }

    /// Number of scalar parameters, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let lstm = |d: usize, h: usize| d * 4 * h + h * 4 * h + 4 * h;
        let (h, s, a, n) = (self.enc_hidden, self.dec_hidden, self.attn_dim, self.vocab_size);
        let mut total = 0;
        for l in 0..self.enc_layers {
            let d = if l == 0 { self.input_dim } else { 2 * h };
            total += 2 * lstm(d, h);
        }
        total += n * self.embed_dim;
        total += a + s * a + 2 * h * a + a;
        if self.attention == AttentionKind::Location {
            total += self.loc_filters * a + self.loc_filters * self.loc_width;
        }
        total += lstm(self.embed_dim + 2 * h, s);
        total += (s + 2 * h) * n + n;
        total
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("input_dim", self.input_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_hidden", self.enc_hidden.to_string()),
            ("dec_hidden", self.dec_hidden.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("attention", self.attention.to_string()),
            ("attn_dim", self.attn_dim.to_string()),
            ("loc_filters", self.loc_filters.to_string()),
            ("loc_width", self.loc_width.to_string()),
            ("frame_skip", self.frame_skip.to_string()),
            ("attend_with", self.attend_with.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys that
    /// are not model settings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key} expects a non-negative integer, got {v:?}")))
        };
        match key {
            "input_dim" => self.input_dim = num(value)?,
            "enc_layers" => self.enc_layers = num(value)?,
            "enc_hidden" => self.enc_hidden = num(value)?,
            "dec_hidden" => self.dec_hidden = num(value)?,
            "vocab_size" => self.vocab_size = num(value)?,
            "embed_dim" => self.embed_dim = num(value)?,
            "attention" => self.attention = value.parse()?,
            "attn_dim" => self.attn_dim = num(value)?,
            "loc_filters" => self.loc_filters = num(value)?,
            "loc_width" => self.loc_width = num(value)?,
            "frame_skip" => self.frame_skip = num(value)?,
            "attend_with" => self.attend_with = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub(crate) fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = LasConfig::default();
        let keys: Vec<&str> = cfg.to_pairs().into_iter().map(|(k, _)| k).collect();
        for k in &keys {
            let v = pairs
                .get(*k)
                .ok_or_else(|| Error::Checkpoint(format!("stored configuration lacks {k}")))?;
            cfg.set(k, v)?;
        }
        if let Some(extra) = pairs.keys().find(|k| !keys.contains(&k.as_str())) {
            return Err(Error::Checkpoint(format!("unknown configuration field {extra}")));
        }
        Ok(cfg)
    }
}

/// All trainable weights of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct LasParams<P> {
    pub listener: Blstm<P>,
    pub embedding: Embedding<P>,
    pub attention: AttentionParams<P>,
    pub speller: LstmCell<P>,
    pub out_w: P,
    pub out_b: P,
}

impl<P> LasParams<P> {
    /// Visits every parameter in checkpoint order.
    pub fn map<Q>(&self, f: &mut impl FnMut(&str, &P) -> Q) -> LasParams<Q> {
        LasParams {
            listener: self.listener.map("listener", f),
            embedding: self.embedding.map("embedding", f),
            attention: self.attention.map("attention", f),
            speller: self.speller.map("speller", f),
            out_w: f("output.w", &self.out_w),
            out_b: f("output.b", &self.out_b),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut P)) {
        self.listener.for_each_mut("listener", f);
        self.embedding.for_each_mut("embedding", f);
        self.attention.for_each_mut("attention", f);
        self.speller.for_each_mut("speller", f);
        f("output.w", &mut self.out_w);
        f("output.b", &mut self.out_b);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let _ = self.map(&mut |n, _| names.push(n.to_string()));
        names
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LasModel {
    pub config: LasConfig,
    pub params: LasParams<Tensor>,
}

impl LasModel {
    /// Glorot-initialized weights, zero biases.
    pub fn new<R: Rng + ?Sized>(config: LasConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.enc_hidden;
        let params = LasParams {
            listener: Blstm::new(config.input_dim, h, config.enc_layers, rng)?,
            embedding: Embedding::new(config.vocab_size, config.embed_dim, rng)?,
            attention: AttentionParams::new(config.attention, config.attention_dims(), rng)?,
            speller: LstmCell::new(config.embed_dim + 2 * h, config.dec_hidden, rng)?,
            out_w: crate::layers::glorot_init(&[config.dec_hidden + 2 * h, config.vocab_size], rng)?,
            out_b: Tensor::zeros(&[config.vocab_size]),
        };
        Ok(LasModel { config, params })
    }

    /// Model whose every parameter is zero.
    pub fn zeros(config: LasConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut m = LasModel::new(config, &mut rng)?;
        m.params.for_each_mut(&mut |_, t| t.data_mut().fill(0.0));
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let _ = self.params.map(&mut |_, t| n += t.len());
        n
    }

    /// Parameters in checkpoint order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let _ = self.params.map(&mut |_, t| out.push(t.clone()));
        out
    }

    /// Rebuilds the model from tensors in checkpoint order.
    pub fn with_tensors(&self, tensors: &[Tensor]) -> Result<Self> {
        let mut it = tensors.iter();
        let mut err = None;
        let params = self.params.map(&mut |name, t| match it.next() {
            Some(n) if n.shape() == t.shape() => n.clone(),
            other => {
                err.get_or_insert_with(|| {
                    Error::dim(
                        "with_tensors",
                        format!(
                            "{name} expects {:?}, got {:?}",
                            t.shape(),
                            other.map(|o| o.shape().to_vec())
                        ),
                    )
                });
                t.clone()
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::dim("with_tensors", "too many tensors"));
        }
        Ok(LasModel {
            config: self.config.clone(),
            params,
        })
    }

    /// Places the weights on `g` as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Speller {
        Speller {
            config: self.config.clone(),
            params: self.params.map(&mut binder(g, trainable)),
        }
    }

    /// Builds a speller from graph nodes given in checkpoint order.
    pub fn bind_vars(&self, vars: &[Var]) -> Speller {
        let mut it = vars.iter().copied();
        Speller {
            config: self.config.clone(),
            params: self.params.map(&mut |_, _| it.next().expect("one node per parameter")),
        }
    }

    /// Teacher-forced `log p(y_i | x, y_<i)` values. `targets` must end
    /// with `<eos>`.
    pub fn log_probs(&self, features: &Tensor, targets: &[usize], mode: Mode) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let sp = self.bind(&mut g, false);
        let steps = sp.forward_teacher_forced(&mut g, features, targets, mode)?;
        Ok(steps.iter().map(|&v| g.value(v).item()).collect())
    }
}

/// Decoder recurrent state between steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub s: Var,
    pub cell: Var,
    pub context: Var,
    pub alpha: Var,
}

/// Model weights bound to a graph; runs the forward computations.
pub struct Speller {
    pub config: LasConfig,
    pub params: LasParams<Var>,
}

impl Speller {
    /// Encodes `features[T×d]`. In [`Mode::Train`] only frames
    /// `0, k, 2k, …` reach the BLSTM.
    pub fn listen(&self, g: &mut Graph, features: &Tensor, mode: Mode) -> Result<Vec<Var>> {
        if features.ndim() != 2 {
            return Err(Error::Input(format!(
                "features must be a [T × d] matrix, got {:?}",
                features.shape()
            )));
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::dim(
                "listen",
                format!(
                    "feature dimension {} does not match model input_dim {}",
                    features.cols(),
                    self.config.input_dim
                ),
            ));
        }
        let step = match mode {
            Mode::Train => self.config.frame_skip,
            Mode::Decode => 1,
        };
        let frames: Vec<Var> = (0..features.rows())
            .step_by(step)
            .map(|t| g.constant(Tensor::vector(features.row(t).to_vec())))
            .collect();
        self.params.listener.forward(g, &frames)
    }

    pub fn memory(&self, g: &mut Graph, h: &[Var]) -> Result<Memory> {
        self.params.attention.memory(g, h)
    }

    /// State before the first step: zero LSTM state and context, uniform
    /// previous alignment.
    pub fn initial_state(&self, g: &mut Graph, memory: &Memory) -> DecoderState {
        let (s, cell) = self.params.speller.zero_state(g);
        DecoderState {
            s,
            cell,
            context: g.constant(Tensor::zeros(&[self.config.memory_dim()])),
            alpha: self.params.attention.initial_alignment(g, memory),
        }
    }

    /// One speller step; returns the new state and the output logits.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        memory: &Memory,
        y_prev: usize,
        prev: &DecoderState,
    ) -> Result<(DecoderState, Var)> {
        if y_prev >= self.config.vocab_size {
            return Err(Error::Vocabulary {
                id: y_prev,
                size: self.config.vocab_size,
            });
        }
        let emb = self.params.embedding.embed(g, y_prev)?;
        let input = g.concat(&[emb, prev.context])?;
        let (s, cell, att) = match self.config.attend_with {
            AttendWith::NewState => {
                let (s, cell) = self.params.speller.step(g, input, prev.s, prev.cell)?;
                let att = self.params.attention.attend(g, s, memory, prev.alpha)?;
                (s, cell, att)
            }
            AttendWith::PrevState => {
                let att = self.params.attention.attend(g, prev.s, memory, prev.alpha)?;
                let (s, cell) = self.params.speller.step(g, input, prev.s, prev.cell)?;
                (s, cell, att)
            }
        };
        let joint = g.concat(&[s, att.context])?;
        let logits = g.matmul(joint, self.params.out_w)?;
        let logits = g.add(logits, self.params.out_b)?;
        Ok((
            DecoderState {
                s,
                cell,
                context: att.context,
                alpha: att.alpha,
            },
            logits,
        ))
    }

    /// Per-step gold log-probabilities under teacher forcing, starting
    /// from `<sos>`. `targets` includes the final `<eos>`.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph,
        features: &Tensor,
        targets: &[usize],
        mode: Mode,
    ) -> Result<Vec<Var>> {
        if targets.last() != Some(&EOS) {
            return Err(Error::Input("target sequence must end with <eos>".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        let h = self.listen(g, features, mode)?;
        let memory = self.memory(g, &h)?;
        let mut state = self.initial_state(g, &memory);
        let mut y_prev = SOS;
        let mut out = Vec::with_capacity(targets.len());
        for &y in targets {
            let (next, logits) = self.decode_step(g, &memory, y_prev, &state)?;
            let lp = g.log_softmax(logits)?;
            out.push(g.pick(lp, y)?);
            state = next;
            y_prev = y;
        }
        Ok(out)
    }
}
