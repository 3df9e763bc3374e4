//! MLP attention over encoder states, in three flavours.
//!
//! * **content**: `e_j = w·tanh(W s + V h_j + b)`, softmax-normalized.
//! * **location**: adds `U f_j`, where `f = F * α_prev` convolves the
//!   previous alignment with `k` filters of odd width `r`; `f_j` is the
//!   `k`-vector at frame `j`.
//! * **smoothed**: content scores normalized with an element-wise sigmoid
//!   instead of a softmax. Alignments then lie in `(0, 1)` but need not
//!   sum to one, and the context is the plain weighted sum.
//!
//! The first location-aware step sees a uniform previous alignment `1/T`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::layers::{glorot_init, join};
use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    #[default]
    Content,
    Location,
    Smoothed,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [
        AttentionKind::Content,
        AttentionKind::Location,
        AttentionKind::Smoothed,
    ];

    pub fn normalization(self) -> Normalization {
        match self {
            AttentionKind::Smoothed => Normalization::Sigmoid,
            _ => Normalization::Softmax,
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(AttentionKind::Content),
            "location" => Ok(AttentionKind::Location),
            "smoothed" => Ok(AttentionKind::Smoothed),
            other => Err(Error::Config(format!(
                "attention must be content, location or smoothed, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Content => "content",
            AttentionKind::Location => "location",
            AttentionKind::Smoothed => "smoothed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Softmax,
    Sigmoid,
}

/// Scorer parameters. `w[a×1]`, `w_s[s×a]`, `v[2H×a]`, `b[a]`; the
/// location variant adds `u[k×a]` and `filters[k×r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub kind: AttentionKind,
    pub w: P,
    pub w_s: P,
    pub v: P,
    pub b: P,
    pub location: Option<LocationParams<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocationParams<P> {
    pub u: P,
    pub filters: P,
}

/// Sizes needed to build a scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub state: usize,
    pub memory: usize,
    pub hidden: usize,
    pub filters: usize,
    pub width: usize,
}

impl AttentionParams<Tensor> {
    pub fn new<R: Rng + ?Sized>(kind: AttentionKind, dims: AttentionDims, rng: &mut R) -> Result<Self> {
        let a = dims.hidden;
        let location = if kind == AttentionKind::Location {
            if dims.width % 2 == 0 {
                return Err(Error::Config(format!(
                    "location filter width must be odd, got {}",
                    dims.width
                )));
            }
            Some(LocationParams {
                u: glorot_init(&[dims.filters, a], rng)?,
                filters: glorot_init(&[dims.filters, dims.width], rng)?,
            })
        } else {
            None
        };
        Ok(AttentionParams {
            kind,
            w: glorot_init(&[a, 1], rng)?,
            w_s: glorot_init(&[dims.state, a], rng)?,
            v: glorot_init(&[dims.memory, a], rng)?,
            b: Tensor::zeros(&[a]),
            location,
        })
    }

    /// All-zero scorer of the given shape.
    pub fn zeros(kind: AttentionKind, dims: AttentionDims) -> Self {
        let a = dims.hidden;
        AttentionParams {
            kind,
            w: Tensor::zeros(&[a, 1]),
            w_s: Tensor::zeros(&[dims.state, a]),
            v: Tensor::zeros(&[dims.memory, a]),
            b: Tensor::zeros(&[a]),
            location: (kind == AttentionKind::Location).then(|| LocationParams {
                u: Tensor::zeros(&[dims.filters, a]),
                filters: Tensor::zeros(&[dims.filters, dims.width]),
            }),
        }
    }
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            kind: self.kind,
            w: f(&join(prefix, "w"), &self.w),
            w_s: f(&join(prefix, "w_s"), &self.w_s),
            v: f(&join(prefix, "v"), &self.v),
            b: f(&join(prefix, "b"), &self.b),
            location: self.location.as_ref().map(|l| LocationParams {
                u: f(&join(prefix, "u"), &l.u),
                filters: f(&join(prefix, "filters"), &l.filters),
            }),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "w_s"), &mut self.w_s);
        f(&join(prefix, "v"), &mut self.v);
        f(&join(prefix, "b"), &mut self.b);
        if let Some(l) = &mut self.location {
            f(&join(prefix, "u"), &mut l.u);
            f(&join(prefix, "filters"), &mut l.filters);
        }
    }
}

/// Encoder states prepared for attention: `h[T×2H]` and its projection
/// `h·V[T×a]`, which does not depend on the decoder step.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub states: Var,
    pub keys: Var,
    pub len: usize,
}

/// Alignment and context of one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub alpha: Var,
    pub context: Var,
}

impl AttentionParams<Var> {
    pub fn memory(&self, g: &mut Graph, h: &[Var]) -> Result<Memory> {
        let states = g.stack_rows(h)?;
        let keys = g.matmul(states, self.v)?;
        Ok(Memory {
            states,
            keys,
            len: h.len(),
        })
    }

    /// Uniform `1/T` alignment used before the first step.
    pub fn initial_alignment(&self, g: &mut Graph, memory: &Memory) -> Var {
        g.constant(Tensor::full(&[memory.len], 1.0 / memory.len as f64))
    }

    /// Unnormalized scores `e[T]`. `alpha_prev` is read only by the
    /// location variant.
    pub fn score(&self, g: &mut Graph, s_prev: Var, memory: &Memory, alpha_prev: Var) -> Result<Var> {
        let query = g.matmul(s_prev, self.w_s)?;
        let query = g.add(query, self.b)?;
        let mut pre = g.add_bias(memory.keys, query)?;
        if let Some(loc) = &self.location {
            if g.shape(alpha_prev) != [memory.len] {
                return Err(Error::dim(
                    "score",
                    format!(
                        "previous alignment has shape {:?}, memory has {} frames",
                        g.shape(alpha_prev),
                        memory.len
                    ),
                ));
            }
            let feats = g.conv1d(alpha_prev, loc.filters)?;
            let proj = g.matmul(feats, loc.u)?;
            pre = g.add(pre, proj)?;
        }
        let act = g.tanh(pre);
        let e = g.matmul(act, self.w)?;
        g.reshape(e, &[memory.len])
    }

    /// Full step: score, normalize with the variant's rule, weighted sum.
    pub fn attend(&self, g: &mut Graph, s_prev: Var, memory: &Memory, alpha_prev: Var) -> Result<AttentionState> {
        let e = self.score(g, s_prev, memory, alpha_prev)?;
        let alpha = normalize(g, e, self.kind.normalization())?;
        let context = context(g, alpha, memory.states)?;
        Ok(AttentionState { alpha, context })
    }
}

/// Softmax or element-wise sigmoid of the scores.
pub fn normalize(g: &mut Graph, e: Var, mode: Normalization) -> Result<Var> {
    if !g.value(e).all_finite() {
        return Err(Error::Numeric("attention scores are not finite".into()));
    }
    match mode {
        Normalization::Softmax => g.softmax(e),
        Normalization::Sigmoid => Ok(g.sigmoid(e)),
    }
}

/// `c = Σ_j α_j h_j` for `alpha[T]` and `states[T×2H]`.
pub fn context(g: &mut Graph, alpha: Var, states: Var) -> Result<Var> {
    if g.value(alpha).ndim() != 1 || g.shape(states).first() != Some(&g.value(alpha).len()) {
        return Err(Error::dim(
            "context",
            format!(
                "alignment {:?} does not match states {:?}",
                g.shape(alpha),
                g.shape(states)
            ),
        ));
    }
    g.matmul(alpha, states)
}
