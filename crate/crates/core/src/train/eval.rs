//! Held-out evaluation and greedy generation.

use crate::autodiff::{LinearKernel, Tape};
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::real::Real;
use crate::train::tokenizer::{detokenize, tokenize_bytes, PAD_ID};

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean next-token cross-entropy over non-overlapping windows of
/// `context_size + 1` tokens (a trailing partial window is dropped).
pub fn evaluate<F: Real>(model: &Model<F>, tokens: &[usize]) -> Result<EvalReport> {
    let ctx = model.config().context_size;
    let windows: Vec<&[usize]> = tokens.chunks_exact(ctx + 1).collect();
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "evaluation needs at least {} tokens, got {}",
            ctx + 1,
            tokens.len()
        )));
    }
    let mut total = 0.0;
    for group in windows.chunks(EVAL_BATCH) {
        let mut inputs = Vec::with_capacity(group.len() * ctx);
        let mut targets = Vec::with_capacity(group.len() * ctx);
        for w in group {
            inputs.extend_from_slice(&w[..ctx]);
            targets.extend_from_slice(&w[1..]);
        }
        let mut tape = Tape::with_kernel(LinearKernel::AddSub);
        let loss = model.loss_tape(&mut tape, &inputs, &targets, group.len())?;
        total += tape.value(loss).item().as_f64() * targets.len() as f64;
    }
    let n = windows.len() * ctx;
    let mean_loss = total / n as f64;
    Ok(EvalReport {
        mean_loss,
        perplexity: mean_loss.exp(),
        tokens: n,
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<F: Real>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt` by `n_tokens` ids. An empty prompt is
/// started from the padding id.
pub fn generate_ids<F: Real>(model: &Model<F>, prompt: &[usize], n_tokens: usize) -> Result<Vec<usize>> {
    let mut out = prompt.to_vec();
    if n_tokens == 0 {
        return Ok(out);
    }
    let mut state = model.decode_state();
    let seed = if prompt.is_empty() { &[PAD_ID][..] } else { prompt };
    let mut logits = Vec::new();
    for &t in seed {
        logits = model.decode_step(&mut state, t)?;
    }
    for i in 0..n_tokens {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < n_tokens {
            logits = model.decode_step(&mut state, next)?;
        }
    }
    Ok(out)
}

/// Byte-level wrapper around [`generate_ids`]; returns prompt + continuation.
pub fn generate<F: Real>(model: &Model<F>, prompt: &[u8], n_tokens: usize) -> Result<Vec<u8>> {
    Ok(detokenize(&generate_ids(model, &tokenize_bytes(prompt), n_tokens)?))
}
