use super::{argmax, sample_logits, LmModel};
use crate::data::{eval_batches, Dataset};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tape};
use crate::tokenizer::{TokenSequence, BOS, EOS};

const EVAL_BATCH: usize = 16;

/// Token-level totals over an evaluation set.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalStats {
    /// Sum of `-ln P(x_t | x_<t)` over predicted positions.
    pub nll_sum: f64,
    pub tokens: usize,
    /// Positions where the highest logit (lowest id on ties) is the target.
    pub correct: usize,
}

impl EvalStats {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.tokens as f64
    }

    pub fn perplexity(&self) -> f64 {
        self.mean_nll().exp()
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens as f64
    }
}

pub fn evaluate(model: &LmModel, data: &Dataset) -> Result<EvalStats> {
    if data.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let v = model.config().vocab_size;
    let mut stats = EvalStats::default();
    for batch in eval_batches(data, EVAL_BATCH) {
        let batch = batch?;
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let logits = model.forward_on_tape(&mut tape, &vars, &batch.inputs, batch.batch, batch.seq, None)?;
        let logits = tape.data(logits);
        for (pos, target) in batch.targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &logits[pos * v..][..v];
            stats.nll_sum += log_sum_exp(row) - row[t];
            stats.tokens += 1;
            if argmax(row) == t {
                stats.correct += 1;
            }
        }
    }
    if stats.tokens == 0 {
        return Err(Error::Input("evaluation set has no predicted positions".into()));
    }
    Ok(stats)
}

/// `exp` of the token-weighted mean negative log-likelihood.
pub fn perplexity(model: &LmModel, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data)?.perplexity())
}

pub fn next_token_accuracy(model: &LmModel, data: &Dataset) -> Result<f64> {
    Ok(evaluate(model, data)?.accuracy())
}

/// Ancestral sampling from `softmax(logits / temperature)` until EOS,
/// `max_new` new tokens, or the context limit. An empty prefix starts from BOS;
/// `temperature <= 0` decodes greedily.
pub fn generate(
    model: &LmModel,
    prefix: &TokenSequence,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSequence> {
    let max_len = model.config().max_seq_len;
    let mut ids = if prefix.is_empty() { vec![BOS] } else { prefix.ids.clone() };
    if ids.len() >= max_len {
        return Err(Error::Length {
            len: ids.len(),
            detail: format!("prefix must be shorter than the context ({max_len})"),
        });
    }
    let v = model.config().vocab_size;
    let mut rng = crate::rng::stream(seed, "lm-generate");
    for _ in 0..max_new {
        if ids.len() >= max_len {
            break;
        }
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape, false);
        let logits = model.forward_on_tape(&mut tape, &vars, &ids, 1, ids.len(), None)?;
        let last = &tape.data(logits)[(ids.len() - 1) * v..][..v];
        let next = sample_logits(last, temperature, &mut rng);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(ids))
}
