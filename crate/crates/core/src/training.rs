//! Cross-entropy training with ADAM, global-norm clipping, coupled L2
//! decay and Gaussian weight noise.
//!
//! One update on a batch:
//!
//! 1. perturb a copy of the weights with `N(0, σ²)` noise (from
//!    `noise_from_epoch` on);
//! 2. run the teacher-forced forward pass on the noisy copy and
//!    backpropagate the per-character cross-entropy;
//! 3. add `λθ` of the *clean* weights to the gradient;
//! 4. clip the global gradient norm to `clip_norm`;
//! 5. apply an ADAM step to the clean weights.
//!
//! The learning rate starts at `lr_initial` and drops to `lr_decayed`
//! once, after `patience` epochs without a validation improvement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::las::{LasModel, Mode};
use crate::numerics::{Graph, Precision, Tensor, Var};
use crate::vocab::EOS;
use crate::{Error, Result};

/// One training or evaluation utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[T × d]` acoustic frames.
    pub features: Tensor,
    /// Character ids, without `<sos>`/`<eos>`.
    pub chars: Vec<usize>,
}

impl Example {
    /// Characters followed by `<eos>`.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.chars.clone();
        t.push(EOS);
        t
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Summed negative log-likelihood over `chars` predicted characters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub chars: usize,
}

impl Loss {
    pub fn per_char(&self) -> f64 {
        self.total / self.chars as f64
    }
}

/// Cross-entropy of gold labels under per-step log-probability vectors.
/// `gold` includes the closing `<eos>`.
pub fn xent_loss(step_log_probs: &[Vec<f64>], gold: &[usize]) -> Result<Loss> {
    if step_log_probs.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} prediction steps for {} gold labels",
            step_log_probs.len(),
            gold.len()
        )));
    }
    let mut total = 0.0;
    for (lp, &y) in step_log_probs.iter().zip(gold) {
        let v = lp.get(y).ok_or(Error::Vocabulary { id: y, size: lp.len() })?;
        total -= v;
    }
    Ok(Loss {
        total,
        chars: gold.len(),
    })
}

/// Global L2 norm of a set of gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns
/// the norm before clipping. Gradients are left untouched on error.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    Ok(norm)
}

/// Copy of `params` with i.i.d. `N(0, σ²)` noise added. `σ = 0` returns
/// an exact copy without drawing from `rng`.
pub fn add_weight_noise<R: Rng + ?Sized>(params: &[Tensor], sigma: f64, rng: &mut R) -> Vec<Tensor> {
    if sigma == 0.0 {
        return params.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    params
        .iter()
        .map(|p| {
            let mut q = p.clone();
            for x in q.data_mut() {
                *x += normal.sample(rng);
            }
            q
        })
        .collect()
}

/// Adds `λθ` to each gradient; 1-D tensors (biases) are skipped unless
/// `decay_biases`.
pub fn add_l2(grads: &mut [Tensor], params: &[Tensor], lambda: f64, decay_biases: bool) {
    for (g, p) in grads.iter_mut().zip(params) {
        if p.ndim() == 1 && !decay_biases {
            continue;
        }
        for (gx, px) in g.data_mut().iter_mut().zip(p.data()) {
            *gx += lambda * px;
        }
    }
}

/// ADAM moments and step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter {:?} with gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_decayed: f64,
    pub clip_norm: f64,
    pub l2: f64,
    pub decay_biases: bool,
    pub weight_noise: f64,
    /// First 1-based epoch that uses weight noise.
    pub noise_from_epoch: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 1e-3,
            lr_decayed: 1e-4,
            clip_norm: 1.0,
            l2: 1e-5,
            decay_biases: true,
            weight_noise: 0.01,
            noise_from_epoch: 2,
            batch_size: 8,
            max_epochs: 30,
            patience: 3,
            seed: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_initial", self.lr_initial),
            ("lr_decayed", self.lr_decayed),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.l2 >= 0.0) || !(self.weight_noise >= 0.0) {
            return Err(Error::Config("l2 and weight_noise must be non-negative".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "patience, batch_size and max_epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_initial", self.lr_initial.to_string()),
            ("lr_decayed", self.lr_decayed.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("l2", self.l2.to_string()),
            ("decay_biases", self.decay_biases.to_string()),
            ("weight_noise", self.weight_noise.to_string()),
            ("noise_from_epoch", self.noise_from_epoch.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| Error::Config(format!("{key} expects {what}, got {value:?}"));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        match key {
            "lr_initial" => self.lr_initial = float()?,
            "lr_decayed" => self.lr_decayed = float()?,
            "clip_norm" => self.clip_norm = float()?,
            "l2" => self.l2 = float()?,
            "decay_biases" => self.decay_biases = value.parse().map_err(|_| bad("true or false"))?,
            "weight_noise" => self.weight_noise = float()?,
            "noise_from_epoch" => self.noise_from_epoch = int()?,
            "batch_size" => self.batch_size = int()?,
            "max_epochs" => self.max_epochs = int()?,
            "patience" => self.patience = int()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "precision" => self.precision = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss_per_char: f64,
    pub valid_loss_per_char: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    /// `epoch  train_loss  valid_loss  lr  wall_seconds`, tab-separated.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:e}\t{:.3}",
            self.epoch, self.train_loss_per_char, self.valid_loss_per_char, self.lr, self.wall_seconds
        )
    }
}

/// Plateau-triggered one-shot learning-rate switch.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    initial: f64,
    decayed: f64,
    patience: usize,
    best: f64,
    stale: usize,
    switched_at: Option<usize>,
}

impl LrSchedule {
    pub fn new(initial: f64, decayed: f64, patience: usize) -> Self {
        LrSchedule {
            initial,
            decayed,
            patience,
            best: f64::INFINITY,
            stale: 0,
            switched_at: None,
        }
    }

    pub fn lr(&self) -> f64 {
        if self.switched_at.is_some() {
            self.decayed
        } else {
            self.initial
        }
    }

    pub fn switched_at(&self) -> Option<usize> {
        self.switched_at
    }

    /// Records the validation loss of `epoch`; returns true when it is a
    /// new best.
    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> bool {
        let improved = valid_loss < self.best;
        if improved {
            self.best = valid_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.switched_at.is_none() && self.stale >= self.patience {
                self.switched_at = Some(epoch);
            }
        }
        improved
    }
}

/// Per-character cross-entropy of `examples` with the listener in `mode`.
pub fn evaluate(model: &LasModel, examples: &[Example], mode: Mode) -> Result<Loss> {
    let mut loss = Loss { total: 0.0, chars: 0 };
    for ex in examples {
        let lp = model.log_probs(&ex.features, &ex.targets(), mode)?;
        loss.total -= lp.iter().sum::<f64>();
        loss.chars += lp.len();
    }
    Ok(loss)
}

/// Teacher-forced loss of one batch and its gradient with respect to
/// `weights` (the tensors the forward pass is run with).
pub fn batch_gradient(template: &LasModel, weights: &[Tensor], batch: &[&Example]) -> Result<(Loss, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = weights.iter().map(|t| g.param(t.clone())).collect();
    let sp = template.bind_vars(&vars);
    let mut terms = Vec::new();
    for ex in batch {
        terms.extend(sp.forward_teacher_forced(&mut g, &ex.features, &ex.targets(), Mode::Train)?);
    }
    let log_lik = g.add_all(&terms)?;
    let loss = Loss {
        total: -g.value(log_lik).item(),
        chars: terms.len(),
    };
    if !loss.total.is_finite() {
        return Ok((loss, Vec::new()));
    }
    let objective = g.scale(log_lik, -1.0 / loss.chars as f64);
    g.backward(objective)?;
    let grads = vars
        .iter()
        .zip(weights)
        .map(|(&v, w)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(w.shape())))
        .collect();
    Ok((loss, grads))
}

/// Mutable state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    template: LasModel,
    pub params: Vec<Tensor>,
    pub adam: Adam,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &LasModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = model.tensors();
        for p in &mut params {
            config.precision.round(p);
        }
        let adam = Adam::new(&params, config.lr_initial);
        Ok(Trainer {
            noise_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_401e),
            config,
            template: model.clone(),
            params,
            adam,
        })
    }

    pub fn model(&self) -> LasModel {
        self.template
            .with_tensors(&self.params)
            .expect("trainer keeps parameter shapes")
    }

    /// One update. `epoch` is 1-based and gates the weight noise. Returns
    /// the batch loss measured on the (possibly noisy) forward pass.
    pub fn step(&mut self, batch: &[&Example], epoch: usize) -> Result<Loss> {
        let sigma = if epoch >= self.config.noise_from_epoch {
            self.config.weight_noise
        } else {
            0.0
        };
        let weights = add_weight_noise(&self.params, sigma, &mut self.noise_rng);
        let (loss, mut grads) = batch_gradient(&self.template, &weights, batch)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("batch loss is {}", loss.total)));
        }
        add_l2(&mut grads, &self.params, self.config.l2, self.config.decay_biases);
        clip_gradients(&mut grads, self.config.clip_norm)?;
        self.adam.step(&mut self.params, &grads)?;
        for p in &mut self.params {
            self.config.precision.round(p);
        }
        Ok(loss)
    }
}

/// Groups examples into batches of similar input length. Shuffles, sorts
/// windows of `50 × batch_size` by frame count, cuts batches and shuffles
/// their order.
pub fn make_batches<R: Rng + ?Sized>(examples: &[Example], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks(50 * batch_size) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| examples[i].frames());
        batches.extend(w.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: LasModel,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    pub lr_switched_at: Option<usize>,
}

/// Full training run. Validation runs the listener on all frames, as
/// decoding does. `on_epoch` sees each metrics row as it is produced.
pub fn train_loop(
    model: &LasModel,
    train: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &LasModel),
) -> Result<TrainOutcome> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut schedule = LrSchedule::new(config.lr_initial, config.lr_decayed, config.patience);
    let mut metrics = Vec::new();
    let mut best = (trainer.model(), 0usize);
    let mut last_finite = f64::NAN;
    let start = Instant::now();

    for epoch in 1..=config.max_epochs {
        trainer.adam.lr = schedule.lr();
        let mut epoch_loss = Loss { total: 0.0, chars: 0 };
        for batch in make_batches(train, config.batch_size, &mut shuffle_rng) {
            let refs: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let loss = match trainer.step(&refs, epoch) {
                Ok(l) => l,
                Err(Error::Numeric(_)) => return Err(Error::Diverged { epoch, last_finite }),
                Err(e) => return Err(e),
            };
            last_finite = loss.per_char();
            epoch_loss.total += loss.total;
            epoch_loss.chars += loss.chars;
        }
        let current = trainer.model();
        let valid_loss = evaluate(&current, valid, Mode::Decode)?;
        if !valid_loss.total.is_finite() {
            return Err(Error::Diverged { epoch, last_finite });
        }
        let row = EpochMetrics {
            epoch,
            train_loss_per_char: epoch_loss.per_char(),
            valid_loss_per_char: valid_loss.per_char(),
            lr: trainer.adam.lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if schedule.observe(epoch, valid_loss.per_char()) {
            best = (current, epoch);
        }
        on_epoch(&row, &best.0);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        metrics,
        lr_switched_at: schedule.switched_at(),
    })
}
