//! Character embedding, LSTM cell and bidirectional LSTM stack.
//!
//! Layer structs are generic over the parameter slot `P`. With
//! `P = Tensor` they own stored weights; with `P = Var` they refer to
//! nodes of a [`Graph`] and carry the forward computations. `map`
//! converts between the two and visits parameters in a fixed order under
//! dotted names such as `listener.0.fwd.w_x`.
//!
//! Weights are stored input-major (`[fan_in × fan_out]`) so a row vector
//! multiplies from the left: `y = x·W + b`.

use rand::Rng;

use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Glorot/Xavier "normalized" initialization of a `[fan_in, fan_out]`
/// matrix: uniform on `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    match shape {
        [fan_in, fan_out] if *fan_in > 0 && *fan_out > 0 => {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Ok(Tensor::uniform(shape, bound, rng))
        }
        _ => Err(Error::Config(format!(
            "weight initialization needs a 2-D (fan_in, fan_out) shape, got {shape:?}"
        ))),
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Lookup table `W_e[n × m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding<P> {
    pub table: P,
}

impl Embedding<Tensor> {
    pub fn new<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Embedding {
            table: glorot_init(&[vocab, dim], rng)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

impl<P> Embedding<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Embedding<Q> {
        Embedding {
            table: f(&join(prefix, "table"), &self.table),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "table"), &mut self.table);
    }
}

impl Embedding<Var> {
    /// Row `index` of the table; only that row receives gradient.
    pub fn embed(&self, g: &mut Graph, index: usize) -> Result<Var> {
        g.gather_row(self.table, index)
    }
}

/// LSTM cell with fused gate weights.
///
/// Gate blocks are laid out as `[input | forget | output | candidate]`
/// along the `4H` axis:
///
/// ```text
/// z = x·W_x + h·W_h + b
/// i = σ(z_i)   f = σ(z_f)   o = σ(z_o)   g = tanh(z_g)
/// c' = f⊙c + i⊙g
/// h' = o⊙tanh(c')
/// ```
///
/// All biases, including the forget gate's, start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<P> {
    pub w_x: P,
    pub w_h: P,
    pub b: P,
    pub hidden: usize,
}

impl LstmCell<Tensor> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let blocks = |fan_in: usize, rng: &mut R| -> Result<Tensor> {
            let gates = (0..4)
                .map(|_| glorot_init(&[fan_in, hidden], rng))
                .collect::<Result<Vec<_>>>()?;
            let mut data = Vec::with_capacity(fan_in * 4 * hidden);
            for r in 0..fan_in {
                for gate in &gates {
                    data.extend_from_slice(gate.row(r));
                }
            }
            Tensor::new(&[fan_in, 4 * hidden], data)
        };
        Ok(LstmCell {
            w_x: blocks(input, rng)?,
            w_h: blocks(hidden, rng)?,
            b: Tensor::zeros(&[4 * hidden]),
            hidden,
        })
    }

    /// All-zero cell; useful for closed-form checks.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCell {
            w_x: Tensor::zeros(&[input, 4 * hidden]),
            w_h: Tensor::zeros(&[hidden, 4 * hidden]),
            b: Tensor::zeros(&[4 * hidden]),
            hidden,
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_x.rows()
    }
}

impl<P> LstmCell<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> LstmCell<Q> {
        LstmCell {
            w_x: f(&join(prefix, "w_x"), &self.w_x),
            w_h: f(&join(prefix, "w_h"), &self.w_h),
            b: f(&join(prefix, "b"), &self.b),
            hidden: self.hidden,
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "w_x"), &mut self.w_x);
        f(&join(prefix, "w_h"), &mut self.w_h);
        f(&join(prefix, "b"), &mut self.b);
    }
}

impl LstmCell<Var> {
    /// Zero `(h, c)` state.
    pub fn zero_state(&self, g: &mut Graph) -> (Var, Var) {
        let h = g.constant(Tensor::zeros(&[self.hidden]));
        let c = g.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    /// One recurrence step, returning the new `(h, c)`.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
        let hs = self.hidden;
        for (what, v) in [("h_prev", h_prev), ("c_prev", c_prev)] {
            if g.shape(v) != [hs] {
                return Err(Error::dim(
                    "lstm_step",
                    format!("{what} has shape {:?}, cell hidden size is {hs}", g.shape(v)),
                ));
            }
        }
        let zx = g.matmul(x, self.w_x)?;
        let zh = g.matmul(h_prev, self.w_h)?;
        let z = g.add(zx, zh)?;
        let z = g.add(z, self.b)?;
        let zi = g.slice(z, 0, hs)?;
        let zf = g.slice(z, hs, hs)?;
        let zo = g.slice(z, 2 * hs, hs)?;
        let zg = g.slice(z, 3 * hs, hs)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let o = g.sigmoid(zo);
        let cand = g.tanh(zg);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let squashed = g.tanh(c);
        let h = g.mul(o, squashed)?;
        Ok((h, c))
    }
}

/// Stack of bidirectional LSTM layers. Each layer emits
/// `concat(h_forward[t], h_backward[t])` of size `2H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blstm<P> {
    pub layers: Vec<BlstmLayer<P>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmLayer<P> {
    pub forward: LstmCell<P>,
    pub backward: LstmCell<P>,
}

impl Blstm<Tensor> {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a BLSTM needs at least one layer".into()));
        }
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let d = if l == 0 { input } else { 2 * hidden };
            out.push(BlstmLayer {
                forward: LstmCell::new(d, hidden, rng)?,
                backward: LstmCell::new(d, hidden, rng)?,
            });
        }
        Ok(Blstm { layers: out })
    }
}

impl<P> Blstm<P> {
    pub fn hidden(&self) -> usize {
        self.layers[0].forward.hidden
    }

    pub fn output_size(&self) -> usize {
        2 * self.hidden()
    }

    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Blstm<Q> {
        Blstm {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, layer)| {
                    let p = join(prefix, &l.to_string());
                    BlstmLayer {
                        forward: layer.forward.map(&join(&p, "fwd"), f),
                        backward: layer.backward.map(&join(&p, "bwd"), f),
                    }
                })
                .collect(),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &l.to_string());
            layer.forward.for_each_mut(&join(&p, "fwd"), f);
            layer.backward.for_each_mut(&join(&p, "bwd"), f);
        }
    }
}

impl Blstm<Var> {
    /// Runs every layer in both directions; output length equals input length.
    pub fn forward(&self, g: &mut Graph, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::Input("BLSTM input sequence is empty".into()));
        }
        let mut seq = xs.to_vec();
        for layer in &self.layers {
            let t_len = seq.len();
            let mut fwd = Vec::with_capacity(t_len);
            let (mut h, mut c) = layer.forward.zero_state(g);
            for &x in &seq {
                (h, c) = layer.forward.step(g, x, h, c)?;
                fwd.push(h);
            }
            let mut bwd = vec![h; t_len];
            let (mut h, mut c) = layer.backward.zero_state(g);
            for t in (0..t_len).rev() {
                (h, c) = layer.backward.step(g, seq[t], h, c)?;
                bwd[t] = h;
            }
            seq = fwd
                .into_iter()
                .zip(bwd)
                .map(|(f, b)| g.concat(&[f, b]))
                .collect::<Result<_>>()?;
        }
        Ok(seq)
    }
}

/// Binds stored parameters into `g` as trainable leaves (`param`) or as
/// constants.
pub(crate) fn binder(g: &mut Graph, trainable: bool) -> impl FnMut(&str, &Tensor) -> Var + '_ {
    move |_, t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    }
}
