//! The training loop.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::reservoir::derive_seed;
use crate::train::config::TrainConfig;
use crate::train::optim::{clip_grad_norm, Adam, Schedule};

pub const METRICS_CSV_HEADER: &str = "step,lr,loss,smoothed_loss,grad_norm,tokens_per_s,grad_buffers";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub smoothed_loss: f64,
    pub grad_norm: f64,
    pub tokens_per_s: f64,
    /// Parameters that received a gradient buffer this step.
    pub grad_buffers: usize,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{},{},{},{:.1},{}",
            self.step, self.lr, self.loss, self.smoothed_loss, self.grad_norm, self.tokens_per_s, self.grad_buffers
        )
    }
}

/// A batch of `batch` windows: inputs and next-token targets, back to back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
}

/// Deterministic batch for a given (seed, step): window starts are drawn
/// uniformly from the corpus.
pub fn sample_batch(tokens: &[usize], context: usize, batch: usize, seed: u64, step: usize) -> Result<Batch> {
    if tokens.len() < context + 1 {
        return Err(Error::Data(format!(
            "corpus has {} tokens; one sample needs {}",
            tokens.len(),
            context + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step as u64));
    let span = tokens.len() - context;
    let mut inputs = Vec::with_capacity(batch * context);
    let mut targets = Vec::with_capacity(batch * context);
    for _ in 0..batch {
        let s = rng.random_range(0..span);
        inputs.extend_from_slice(&tokens[s..s + context]);
        targets.extend_from_slice(&tokens[s + 1..s + context + 1]);
    }
    Ok(Batch { inputs, targets, batch })
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    /// Number of completed steps.
    pub step: usize,
    /// Bias-corrected EMA state: (raw accumulator, weight).
    pub ema: (f64, f64),
    tokens: Vec<usize>,
}

impl Trainer {
    pub fn new(config: TrainConfig, tokens: Vec<usize>) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model)?;
        Self::from_parts(config, model, None, 0, (0.0, 0.0), tokens)
    }

    /// Reassemble a trainer, e.g. from a checkpoint.
    pub fn from_parts(
        config: TrainConfig,
        model: Model<f32>,
        optimizer: Option<Adam<f32>>,
        step: usize,
        ema: (f64, f64),
        tokens: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        if tokens.len() < config.model.context_size + 1 {
            return Err(Error::Data(format!(
                "training data has {} tokens; one sample needs {}",
                tokens.len(),
                config.model.context_size + 1
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= config.model.vocab) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: config.model.vocab,
            });
        }
        let optimizer = optimizer.unwrap_or_else(|| Adam::new(&model.params));
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            ema,
            tokens,
        })
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.config.peak_lr(),
            warmup: self.config.warmup(),
            total: self.config.total_steps,
        }
    }

    pub fn smoothed_loss(&self) -> Option<f64> {
        (self.ema.1 > 0.0).then(|| self.ema.0 / self.ema.1)
    }

    /// Forward, backward, clip, Adam update, re-quantize.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.step + 1;
        let cfg = &self.config;
        let batch = sample_batch(&self.tokens, cfg.model.context_size, cfg.batch_size, cfg.seed, step)?;
        let mut tape = Tape::with_kernel(cfg.kernel);
        let loss_var = self
            .model
            .loss_tape(&mut tape, &batch.inputs, &batch.targets, batch.batch)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { step, loss: f64::NAN },
                e => e,
            })?;
        let loss = tape.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        self.model.params.clear_grads();
        tape.backward(loss_var, &mut self.model.params)?;
        let grad_buffers = self.model.params.grad_buffers();
        let grad_norm = clip_grad_norm(&mut self.model.params, cfg.grad_clip);
        let lr = self.schedule().lr(step);
        self.optimizer.update(&mut self.model.params, lr)?;
        self.model.params.clear_grads();
        self.model.refresh_quantized()?;
        self.step = step;

        let decay = self.config.ema_decay;
        self.ema = (
            decay * self.ema.0 + (1.0 - decay) * loss,
            decay * self.ema.1 + (1.0 - decay),
        );
        let elapsed = start.elapsed().as_secs_f64().max(1e-9);
        Ok(StepMetrics {
            step,
            lr,
            loss,
            smoothed_loss: self.smoothed_loss().unwrap_or(loss),
            grad_norm,
            tokens_per_s: batch.inputs.len() as f64 / elapsed,
            grad_buffers,
        })
    }

    /// Train until `total_steps`, appending one CSV row per step to
    /// `metrics` and calling `on_step` after each step (e.g. to checkpoint).
    pub fn run(
        &mut self,
        mut metrics: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let mut history = Vec::new();
        while self.step < self.config.total_steps {
            let m = self.train_step()?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", m.csv_row())?;
            }
            on_step(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }
}
