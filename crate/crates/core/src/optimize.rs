//! Plain SGD over truncated subsequences with gradient clipping, weight
//! noise, per-parameter learning-rate multipliers, the inverse-decay and
//! validation-halving schedules, and early stopping on validation loss.

use std::fmt;

use crate::data::SubseqChunk;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::grad::{bptt, clip_gradients_in_place, GradSet};
use crate::math::Rng;
use crate::model::{Frame, HiddenState, ModelConfig, ParamSet};

/// `1 / (1 + max(0, τ − τ0) / β)`.
pub fn lr_inverse(tau: u64, tau0: u64, beta: f64) -> f64 {
    let over = tau.saturating_sub(tau0) as f64;
    1.0 / (1.0 + over / beta)
}

/// Halves the rate unless validation loss dropped by more than
/// `significance_threshold`.
pub fn lr_halving_step(current_lr: f64, prev_val_nll: f64, new_val_nll: f64, significance_threshold: f64) -> f64 {
    if new_val_nll > prev_val_nll - significance_threshold {
        current_lr / 2.0
    } else {
        current_lr
    }
}

/// Copy of `params` with i.i.d. `N(0, std²)` added to every weight and
/// bias.
pub fn perturb_weights(params: &ParamSet, rng: &mut Rng, std: f64) -> ParamSet {
    let mut out = params.clone();
    if std > 0.0 {
        for p in out.iter_mut() {
            p.value.as_mut_slice().iter_mut().for_each(|v| *v += std * rng.normal());
        }
    }
    out
}

/// `θ ← θ − lr · multiplier · g` for every parameter.
pub fn apply_update(params: &mut ParamSet, grads: &GradSet, lr: f64) {
    for (i, p) in params.iter_mut().enumerate() {
        let step = lr * p.lr_multiplier;
        for (w, g) in p.value.as_mut_slice().iter_mut().zip(grads.by_index(i).as_slice()) {
            *w -= step * g;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau0 {
    /// Fixed at the first validation whose loss went up.
    Auto,
    At(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// `base_lr · lr_inverse(τ, τ0, β)`.
    Inverse { base_lr: f64, tau0: Tau0, beta: f64 },
    Halving {
        initial_lr: f64,
        significance_threshold: f64,
    },
}

impl Schedule {
    fn initial_lr(&self) -> f64 {
        match *self {
            Schedule::Inverse { base_lr, .. } => base_lr,
            Schedule::Halving { initial_lr, .. } => initial_lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub schedule: Schedule,
    pub clip_threshold: f64,
    pub weight_noise_std: f64,
    pub max_epochs: usize,
    /// Hard cap on updates; `None` for no cap.
    pub max_updates: Option<u64>,
    /// Validations without a new best before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Updates between validations; `None` validates once per epoch.
    pub eval_every: Option<u64>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if let Schedule::Inverse { beta, .. } = self.schedule {
            if !(beta > 0.0) {
                return Err(Error::config("beta must be positive"));
            }
        }
        if self.schedule.initial_lr() <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::config("clip threshold must be positive"));
        }
        if !(self.weight_noise_std >= 0.0) {
            return Err(Error::config("weight noise std must be non-negative"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub update: u64,
    pub lr: f64,
    /// Mean per-step training loss since the previous record.
    pub train_nll: f64,
    /// Mean per-step validation loss.
    pub valid_nll: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalReason {
    Patience,
    MaxEpochs,
    MaxUpdates,
    Diverged,
}

impl fmt::Display for TerminalReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminalReason::Patience => "patience",
            TerminalReason::MaxEpochs => "max_epochs",
            TerminalReason::MaxUpdates => "max_updates",
            TerminalReason::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub terminal: Option<TerminalReason>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "update,lr,train_nll,valid_nll";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.update, r.lr, r.train_nll, r.valid_nll));
        }
        out
    }

    pub fn best(&self) -> Option<&LogRecord> {
        self.records.iter().min_by(|a, b| a.valid_nll.total_cmp(&b.valid_nll))
    }
}

/// Training chunks in order, plus whole validation sequences.
pub struct TrainData<'a> {
    pub train: Vec<SubseqChunk<'a>>,
    pub valid: &'a [Vec<Frame>],
    pub valid_chunk_len: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub params: ParamSet,
    pub log: TrainLog,
}

#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub log: TrainLog,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted after {} validation(s): {}", self.log.records.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Trainer<'a> {
    on_record: &'a mut dyn FnMut(&LogRecord),
    config: &'a ModelConfig,
    plan: &'a TrainPlan,
    data: &'a TrainData<'a>,
    params: ParamSet,
    best: Option<(f64, ParamSet)>,
    log: TrainLog,
    update: u64,
    lr: f64,
    tau0: Option<u64>,
    prev_valid: Option<f64>,
    stale: usize,
    train_sum: f64,
    train_steps: usize,
}

impl Trainer<'_> {
    fn current_lr(&self) -> f64 {
        match self.plan.schedule {
            Schedule::Inverse { base_lr, beta, .. } => match self.tau0 {
                Some(t0) => base_lr * lr_inverse(self.update, t0, beta),
                None => base_lr,
            },
            Schedule::Halving { .. } => self.lr,
        }
    }

    fn step(&mut self, chunk: &SubseqChunk<'_>, state: &HiddenState) -> Result<HiddenState> {
        let lr = self.current_lr();
        let noisy;
        let at = if self.plan.weight_noise_std > 0.0 {
            let mut rng = Rng::with_stream(self.plan.seed, self.update);
            noisy = perturb_weights(&self.params, &mut rng, self.plan.weight_noise_std);
            &noisy
        } else {
            &self.params
        };
        let mut bp = bptt(at, self.config, chunk.inputs, chunk.targets, state)?;
        if self.plan.clip_threshold.is_finite() {
            clip_gradients_in_place(&mut bp.grads, self.plan.clip_threshold);
        }
        if !bp.grads.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at update {}", self.update)));
        }
        apply_update(&mut self.params, &bp.grads, lr);
        self.update += 1;
        self.train_sum += bp.total_nll;
        self.train_steps += chunk.len();
        Ok(bp.final_state)
    }

    /// Returns true when training should stop.
    fn validate(&mut self) -> Result<bool> {
        let report = evaluate(&self.params, self.config, self.data.valid, self.data.valid_chunk_len)?;
        let valid = report.nll_per_step;
        let lr = self.current_lr();
        self.log.records.push(LogRecord {
            update: self.update,
            lr,
            train_nll: if self.train_steps > 0 {
                self.train_sum / self.train_steps as f64
            } else {
                f64::NAN
            },
            valid_nll: valid,
        });
        (self.on_record)(self.log.records.last().unwrap());
        self.train_sum = 0.0;
        self.train_steps = 0;

        if let Some(prev) = self.prev_valid {
            match self.plan.schedule {
                Schedule::Inverse { tau0: Tau0::Auto, .. } if self.tau0.is_none() && valid > prev => {
                    self.tau0 = Some(self.update);
                }
                Schedule::Halving {
                    significance_threshold,
                    ..
                } => self.lr = lr_halving_step(self.lr, prev, valid, significance_threshold),
                _ => {}
            }
        }
        self.prev_valid = Some(valid);

        if self.best.as_ref().is_none_or(|(b, _)| valid < *b) {
            self.best = Some((valid, self.params.clone()));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        Ok(self.stale >= self.plan.patience)
    }

    fn run(&mut self) -> Result<TerminalReason> {
        let per_epoch = self.plan.eval_every.is_none();
        for _epoch in 0..self.plan.max_epochs {
            let mut state = HiddenState::zeros(self.config);
            for chunk in &self.data.train {
                if !chunk.carry_state {
                    state = HiddenState::zeros(self.config);
                }
                state = self.step(chunk, &state)?;
                if self.plan.eval_every.is_some_and(|k| self.update % k == 0) && self.validate()? {
                    return Ok(TerminalReason::Patience);
                }
                if self.plan.max_updates.is_some_and(|m| self.update >= m) {
                    if self.log.records.last().is_none_or(|r| r.update != self.update) {
                        self.validate()?;
                    }
                    return Ok(TerminalReason::MaxUpdates);
                }
            }
            if per_epoch && self.validate()? {
                return Ok(TerminalReason::Patience);
            }
        }
        if self.log.records.is_empty() {
            self.validate()?;
        }
        Ok(TerminalReason::MaxEpochs)
    }
}

/// Runs SGD from `params`: per update, optionally perturb the weights,
/// backpropagate through the chunk, clip, and step the clean weights.
pub fn sgd_train(
    config: &ModelConfig,
    params: ParamSet,
    data: &TrainData<'_>,
    plan: &TrainPlan,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    sgd_train_with(config, params, data, plan, |_| {})
}

/// [`sgd_train`] with a callback invoked after every validation.
pub fn sgd_train_with(
    config: &ModelConfig,
    params: ParamSet,
    data: &TrainData<'_>,
    plan: &TrainPlan,
    mut on_record: impl FnMut(&LogRecord),
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let fail = |error: Error, log: TrainLog| TrainFailure { error, log };
    if let Err(e) = plan.validate().and_then(|_| config.validate()) {
        return Err(fail(
            e,
            TrainLog {
                records: Vec::new(),
                terminal: None,
            },
        ));
    }
    let mut trainer = Trainer {
        on_record: &mut on_record,
        config,
        plan,
        data,
        lr: plan.schedule.initial_lr(),
        tau0: match plan.schedule {
            Schedule::Inverse { tau0: Tau0::At(t), .. } => Some(t),
            _ => None,
        },
        params,
        best: None,
        log: TrainLog {
            records: Vec::new(),
            terminal: None,
        },
        update: 0,
        prev_valid: None,
        stale: 0,
        train_sum: 0.0,
        train_steps: 0,
    };
    match trainer.run() {
        Ok(reason) => {
            trainer.log.terminal = Some(reason);
            let params = trainer.best.map(|(_, p)| p).unwrap_or(trainer.params);
            Ok(TrainOutcome {
                params,
                log: trainer.log,
            })
        }
        Err(error) => {
            let mut log = trainer.log;
            if matches!(error, Error::Diverged { .. } | Error::Numeric(_)) {
                log.terminal = Some(TerminalReason::Diverged);
            }
            Err(fail(error, log))
        }
    }
}
