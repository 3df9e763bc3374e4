//! Left-to-right beam search with softmax temperature and LM fusion, and
//! the CER/SER metrics.
//!
//! A hypothesis' fused cost is `-(log p(y|x) + γ·lm)`, lower is better.
//! The temperature `τ` flattens the per-step distribution used to rank
//! and prune the beam; the reported model log-probability stays
//! untempered unless `temper_scores` is set.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::attention::Memory;
use crate::charlm::{CharScorer, LmState};
use crate::las::{LasModel, Mode, Speller};
use crate::numerics::{log_softmax, softmax, Graph, Tensor};
use crate::vocab::{self, EOS, RESERVED, SOS};
use crate::{Error, Result};

/// `softmax(o / τ)`.
pub fn tempered_distribution(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / tau).collect();
    Ok(softmax(&scaled))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// When the external LM enters the search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LmMode {
    /// Added to the cost after every character.
    #[default]
    PerStep,
    /// Search without the LM, then re-sort finished hypotheses.
    Rescore,
}

impl FromStr for LmMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(LmMode::PerStep),
            "rescore" => Ok(LmMode::Rescore),
            _ => Err(Error::Config(format!("lm_mode must be per_step or rescore, got {s:?}"))),
        }
    }
}

impl fmt::Display for LmMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmMode::PerStep => "per_step",
            LmMode::Rescore => "rescore",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub temperature: f64,
    pub lm_weight: f64,
    /// Longest output in characters, `<eos>` excluded. `None` means twice
    /// the number of input frames.
    pub max_len: Option<usize>,
    pub lm_mode: LmMode,
    /// Use tempered log-probabilities in the fused cost as well.
    pub temper_scores: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 30,
            temperature: 2.0,
            lm_weight: 0.1,
            max_len: None,
            lm_mode: LmMode::PerStep,
            temper_scores: false,
        }
    }
}

impl DecodeConfig {
    /// Beam 1, `τ = 1`, no LM.
    pub fn greedy() -> Self {
        DecodeConfig {
            beam: 1,
            temperature: 1.0,
            lm_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        check_tau(self.temperature)?;
        if !(self.lm_weight >= 0.0 && self.lm_weight.is_finite()) {
            return Err(Error::Config(format!("lm_weight must be >= 0, got {}", self.lm_weight)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beam", self.beam.to_string()),
            ("temperature", self.temperature.to_string()),
            ("lm_weight", self.lm_weight.to_string()),
            ("max_len", self.max_len.map_or("auto".into(), |n| n.to_string())),
            ("lm_mode", self.lm_mode.to_string()),
            ("temper_scores", self.temper_scores.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key} expects {what}, got {value:?}"));
        match key {
            "beam" => self.beam = value.parse().map_err(|_| bad("a positive integer"))?,
            "temperature" => self.temperature = value.parse().map_err(|_| bad("a number"))?,
            "lm_weight" => self.lm_weight = value.parse().map_err(|_| bad("a number"))?,
            "max_len" => {
                self.max_len = match value {
                    "auto" => None,
                    v => Some(v.parse().map_err(|_| bad("an integer or auto"))?),
                }
            }
            "lm_mode" => self.lm_mode = value.parse()?,
            "temper_scores" => self.temper_scores = value.parse().map_err(|_| bad("true or false"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A decoder the search can drive one token at a time.
pub trait StepModel {
    type State: Clone;
    /// Output vocabulary size, reserved tokens included.
    fn vocab_size(&self) -> usize;
    /// Input frames seen by the decoder; sets the default length limit.
    fn frames(&self) -> usize;
    fn initial(&mut self) -> Result<Self::State>;
    /// Logits for the token after `y_prev`, and the state that follows.
    fn step(&mut self, state: &Self::State, y_prev: usize) -> Result<(Self::State, Vec<f64>)>;
}

/// Decoder state of [`LasStepper`] held as plain tensors.
#[derive(Clone, Debug)]
pub struct LasState {
    s: Tensor,
    cell: Tensor,
    context: Tensor,
    alpha: Tensor,
}

/// Runs a [`LasModel`] on one utterance in decode mode. The listener
/// output stays on the graph; each step's nodes are dropped afterwards.
pub struct LasStepper {
    graph: Graph,
    speller: Speller,
    memory: Memory,
    mark: usize,
}

impl LasStepper {
    pub fn new(model: &LasModel, features: &Tensor) -> Result<Self> {
        let mut graph = Graph::new();
        let speller = model.bind(&mut graph, false);
        let h = speller.listen(&mut graph, features, Mode::Decode)?;
        let memory = speller.memory(&mut graph, &h)?;
        let mark = graph.len();
        Ok(LasStepper {
            graph,
            speller,
            memory,
            mark,
        })
    }
}

impl StepModel for LasStepper {
    type State = LasState;

    fn vocab_size(&self) -> usize {
        self.speller.config.vocab_size
    }

    fn frames(&self) -> usize {
        self.memory.len
    }

    fn initial(&mut self) -> Result<LasState> {
        let g = &mut self.graph;
        let st = self.speller.initial_state(g, &self.memory);
        let out = LasState {
            s: g.value(st.s).clone(),
            cell: g.value(st.cell).clone(),
            context: g.value(st.context).clone(),
            alpha: g.value(st.alpha).clone(),
        };
        g.truncate(self.mark);
        Ok(out)
    }

    fn step(&mut self, state: &LasState, y_prev: usize) -> Result<(LasState, Vec<f64>)> {
        let g = &mut self.graph;
        let prev = crate::las::DecoderState {
            s: g.constant(state.s.clone()),
            cell: g.constant(state.cell.clone()),
            context: g.constant(state.context.clone()),
            alpha: g.constant(state.alpha.clone()),
        };
        let result = self.speller.decode_step(g, &self.memory, y_prev, &prev);
        let out = result.map(|(next, logits)| {
            (
                LasState {
                    s: g.value(next.s).clone(),
                    cell: g.value(next.cell).clone(),
                    context: g.value(next.context).clone(),
                    alpha: g.value(next.alpha).clone(),
                },
                g.value(logits).data().to_vec(),
            )
        });
        g.truncate(self.mark);
        out
    }
}

/// One search result.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Character ids, `<eos>` excluded.
    pub chars: Vec<usize>,
    /// `Σ log p(y_i | x, y_<i)`, untempered unless `temper_scores`.
    pub model_log_prob: f64,
    pub lm_score: f64,
    pub fused_cost: f64,
    /// False only for the fallback returned when nothing reached `<eos>`.
    pub completed: bool,
}

struct Live<S> {
    chars: Vec<usize>,
    last: usize,
    model_lp: f64,
    tempered_lp: f64,
    lm: f64,
    state: S,
    lm_state: Option<LmState>,
}

struct Candidate {
    parent: usize,
    token: usize,
    model_lp: f64,
    tempered_lp: f64,
    lm: f64,
    lm_state: Option<LmState>,
    rank: f64,
}

fn fused(cfg: &DecodeConfig, model_lp: f64, tempered_lp: f64, lm: f64) -> f64 {
    let m = if cfg.temper_scores { tempered_lp } else { model_lp };
    if cfg.lm_weight == 0.0 {
        -m
    } else {
        -(m + cfg.lm_weight * lm)
    }
}

/// Beam search over `model`. Expands every hypothesis with `<eos>` and
/// every character (not `<unk>` or `<sos>`), keeps the `beam` best by
/// tempered score plus weighted LM score, and moves hypotheses that end in
/// `<eos>` to a finished pool of at most `beam` entries. Stops when no
/// live hypothesis can beat the worst pooled one, when all have finished,
/// or at the length limit. Results are sorted by fused cost; ties go to
/// the lower token id.
pub fn beam_search<M: StepModel>(model: &mut M, cfg: &DecodeConfig, lm: Option<&CharScorer>) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let vocab_size = model.vocab_size();
    let max_len = cfg.max_len.unwrap_or(2 * model.frames());
    let per_step_lm = match lm {
        Some(s) if cfg.lm_mode == LmMode::PerStep && cfg.lm_weight > 0.0 => Some(s),
        _ => None,
    };
    let expansions: Vec<usize> = std::iter::once(EOS).chain(RESERVED.len()..vocab_size).collect();

    let mut live = vec![Live {
        chars: Vec::new(),
        last: SOS,
        model_lp: 0.0,
        tempered_lp: 0.0,
        lm: 0.0,
        state: model.initial()?,
        lm_state: per_step_lm.map(CharScorer::initial_state),
    }];
    let mut pool: Vec<Hypothesis> = Vec::new();

    for depth in 0..=max_len {
        let mut candidates = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (pi, h) in live.iter().enumerate() {
            let (state, logits) = model.step(&h.state, h.last)?;
            if logits.len() != vocab_size || logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric("decoder produced invalid logits".into()));
            }
            let lp = log_softmax(&logits);
            let tlp = if cfg.temperature == 1.0 {
                lp.clone()
            } else {
                let scaled: Vec<f64> = logits.iter().map(|x| x / cfg.temperature).collect();
                log_softmax(&scaled)
            };
            next_states.push(state);
            for &y in &expansions {
                if depth == max_len && y != EOS {
                    continue;
                }
                let (lm_delta, lm_state) = match (per_step_lm, &h.lm_state) {
                    (Some(s), Some(ls)) if y == EOS => (s.finish_delta(ls), None),
                    (Some(s), Some(ls)) => {
                        let (next, d) = s.advance(ls, y)?;
                        (d, Some(next))
                    }
                    _ => (0.0, None),
                };
                let lm_total = h.lm + lm_delta;
                let tempered_lp = h.tempered_lp + tlp[y];
                let rank = if per_step_lm.is_some() {
                    tempered_lp + cfg.lm_weight * lm_total
                } else {
                    tempered_lp
                };
                if rank == f64::NEG_INFINITY || rank.is_nan() {
                    continue;
                }
                candidates.push(Candidate {
                    parent: pi,
                    token: y,
                    model_lp: h.model_lp + lp[y],
                    tempered_lp,
                    lm: lm_total,
                    lm_state,
                    rank,
                });
            }
        }
        // stable: equal ranks keep (parent, token) order
        candidates.sort_by(|a, b| b.rank.partial_cmp(&a.rank).unwrap_or(Ordering::Equal));
        candidates.truncate(cfg.beam);

        let mut next_live = Vec::new();
        for c in candidates {
            let parent = &live[c.parent];
            if c.token == EOS {
                let hyp = Hypothesis {
                    chars: parent.chars.clone(),
                    model_log_prob: if cfg.temper_scores { c.tempered_lp } else { c.model_lp },
                    lm_score: c.lm,
                    fused_cost: fused(cfg, c.model_lp, c.tempered_lp, c.lm),
                    completed: true,
                };
                insert_capped(&mut pool, hyp, cfg.beam);
            } else {
                let mut chars = parent.chars.clone();
                chars.push(c.token);
                next_live.push(Live {
                    chars,
                    last: c.token,
                    model_lp: c.model_lp,
                    tempered_lp: c.tempered_lp,
                    lm: c.lm,
                    state: next_states[c.parent].clone(),
                    lm_state: c.lm_state,
                });
            }
        }
        if next_live.is_empty() {
            if pool.is_empty() {
                pool.push(fallback(cfg, live));
            }
            live = Vec::new();
            break;
        }
        live = next_live;
        if pool.len() == cfg.beam {
            let worst = pool.last().map_or(f64::INFINITY, |h| h.fused_cost);
            let best_live = live
                .iter()
                .map(|h| fused(cfg, h.model_lp, h.tempered_lp, h.lm))
                .fold(f64::INFINITY, f64::min);
            if best_live >= worst {
                break;
            }
        }
    }

    if let (Some(s), LmMode::Rescore) = (lm, cfg.lm_mode) {
        if cfg.lm_weight > 0.0 {
            for h in &mut pool {
                h.lm_score = s.score_chars(&h.chars, true)?;
                h.fused_cost = -(h.model_log_prob + cfg.lm_weight * h.lm_score);
            }
            pool.sort_by(|a, b| a.fused_cost.partial_cmp(&b.fused_cost).unwrap_or(Ordering::Equal));
        }
    }
    if pool.is_empty() {
        pool.push(fallback(cfg, live));
    }
    Ok(pool)
}

/// Best unfinished hypothesis, flagged as such.
fn fallback<S>(cfg: &DecodeConfig, live: Vec<Live<S>>) -> Hypothesis {
    let cost = |h: &Live<S>| fused(cfg, h.model_lp, h.tempered_lp, h.lm);
    let best = live
        .into_iter()
        .min_by(|a, b| cost(a).partial_cmp(&cost(b)).unwrap_or(Ordering::Equal))
        .expect("search starts with one live hypothesis");
    Hypothesis {
        fused_cost: cost(&best),
        model_log_prob: if cfg.temper_scores { best.tempered_lp } else { best.model_lp },
        lm_score: best.lm,
        chars: best.chars,
        completed: false,
    }
}

/// Keeps `pool` sorted by fused cost and at most `cap` long. A newcomer
/// tying an existing cost goes after it.
fn insert_capped(pool: &mut Vec<Hypothesis>, hyp: Hypothesis, cap: usize) {
    let at = pool.partition_point(|h| h.fused_cost <= hyp.fused_cost);
    if at < cap {
        pool.insert(at, hyp);
        pool.truncate(cap);
    }
}

/// Argmax decoding: beam 1, no temperature, no LM.
pub fn greedy<M: StepModel>(model: &mut M, max_len: Option<usize>) -> Result<Hypothesis> {
    let cfg = DecodeConfig {
        max_len,
        ..DecodeConfig::greedy()
    };
    Ok(beam_search(model, &cfg, None)?.remove(0))
}

/// Decodes one utterance with a LAS model.
pub fn decode_utterance(
    model: &LasModel,
    features: &Tensor,
    cfg: &DecodeConfig,
    lm: Option<&CharScorer>,
) -> Result<Hypothesis> {
    let mut stepper = LasStepper::new(model, features)?;
    Ok(beam_search(&mut stepper, cfg, lm)?.remove(0))
}

/// Decodes many utterances on up to `threads` workers. Output order
/// follows the input.
pub fn decode_batch(
    model: &LasModel,
    inputs: &[&Tensor],
    cfg: &DecodeConfig,
    lm: Option<&CharScorer>,
    threads: usize,
) -> Result<Vec<Hypothesis>> {
    let threads = threads.clamp(1, inputs.len().max(1));
    let chunk = inputs.len().div_ceil(threads).max(1);
    let results: Vec<Result<Vec<Hypothesis>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|x| decode_utterance(model, x, cfg, lm))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(inputs.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of one utterance. Reserved tokens are ignored.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    let r = vocab::strip_special(reference);
    let h = vocab::strip_special(hypothesis);
    if r.is_empty() {
        return Err(Error::Input("CER needs a non-empty reference".into()));
    }
    Ok(edit_distance(&r, &h) as f64 / r.len() as f64)
}

/// Total edits over total reference characters.
pub fn corpus_cer(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut edits = 0;
    let mut chars = 0;
    for (r, h) in pairs {
        let (r, h) = (vocab::strip_special(r), vocab::strip_special(h));
        edits += edit_distance(&r, &h);
        chars += r.len();
    }
    if chars == 0 {
        return Err(Error::Input("CER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / chars as f64)
}

/// Fraction of utterances whose hypothesis differs from the reference.
pub fn ser(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("SER needs at least one utterance".into()));
    }
    let wrong = pairs
        .iter()
        .filter(|(r, h)| vocab::strip_special(r) != vocab::strip_special(h))
        .count();
    Ok(wrong as f64 / pairs.len() as f64)
}
