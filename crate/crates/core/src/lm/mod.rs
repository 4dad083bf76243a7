//! GPT-style causal decoder-only language model.
//!
//! Pre-norm blocks (layer norm -> causal multi-head attention -> residual,
//! layer norm -> GELU MLP -> residual), learned positions, final layer norm and
//! an output projection tied to the token embedding.

mod eval;
mod train;

pub use eval::{evaluate, generate, next_token_accuracy, perplexity, EvalStats};
pub use train::{train_lm, train_lm_with, CurveRow, TrainSettings, TrainingCurve};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
pub use crate::tensor::argmax;
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl LmConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 64, MLP 256, context 64.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            n_layer: 4,
            n_head: 4,
            d_model: 64,
            d_ff: 256,
            max_seq_len: 64,
            vocab_size,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_problems("lm", &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn collect_problems(&self, section: &str, problems: &mut Vec<String>) {
        if self.n_layer == 0 {
            problems.push(format!("{section}.n_layer must be at least 1"));
        }
        if self.n_head == 0 || self.d_model % self.n_head != 0 {
            problems.push(format!(
                "{section}.d_model ({}) must be divisible by {section}.n_head ({})",
                self.d_model, self.n_head
            ));
        }
        if self.d_model == 0 {
            problems.push(format!("{section}.d_model must be positive"));
        }
        if self.d_ff == 0 {
            problems.push(format!("{section}.d_ff must be positive"));
        }
        if self.max_seq_len < 2 {
            problems.push(format!("{section}.max_seq_len must be at least 2"));
        }
        if self.vocab_size < 5 {
            problems.push(format!("{section}.vocab_size must be at least 5, got {}", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("{section}.dropout must be in [0, 1), got {}", self.dropout));
        }
    }

    /// Number of scalar parameters this configuration allocates.
    pub fn num_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let per_layer = 2 * d + d * 3 * d + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        self.vocab_size * d + self.max_seq_len * d + self.n_layer * per_layer + 2 * d
    }

    /// `key=value` lines, in field order.
    pub fn to_kv(&self) -> String {
        format!(
            "n_layer={}\nn_head={}\nd_model={}\nd_ff={}\nmax_seq_len={}\nvocab_size={}\ndropout={:?}\n",
            self.n_layer, self.n_head, self.d_model, self.d_ff, self.max_seq_len, self.vocab_size, self.dropout
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = crate::io::parse_kv(text)?;
        let cfg = LmConfig {
            n_layer: kv.get_parsed("n_layer")?,
            n_head: kv.get_parsed("n_head")?,
            d_model: kv.get_parsed("d_model")?,
            d_ff: kv.get_parsed("d_ff")?,
            max_seq_len: kv.get_parsed("max_seq_len")?,
            vocab_size: kv.get_parsed("vocab_size")?,
            dropout: kv.get_parsed("dropout")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const PER_LAYER: usize = 11;

#[derive(Clone, Copy)]
struct LayerVars {
    ln1_g: Var,
    ln1_b: Var,
    w_qkv: Var,
    w_attn_out: Var,
    b_attn_out: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_mlp_in: Var,
    b_mlp_in: Var,
    w_mlp_out: Var,
    b_mlp_out: Var,
}

/// Language model parameters (token/position embeddings, blocks, final norm)
/// with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct LmModel {
    config: LmConfig,
    params: ParamStore,
}

impl LmModel {
    /// Fresh model: N(0, 0.02) embeddings and input projections, residual
    /// output projections scaled by `1/sqrt(2 * n_layer)`, zero biases (the attention input projection has none), unit
    /// layer-norm gains.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        Self::with_init_std(config, seed, 0.02)
    }

    /// Like [`LmModel::new`] with a different base standard deviation.
    pub fn with_init_std(config: LmConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "lm-init");
        let normal = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| dist.sample(rng))
        };
        let (v, d, f, l) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        let resid_std = std / (2.0 * config.n_layer as f64).sqrt();
        let mut params = ParamStore::new();
        params.push("wte", normal(&mut rng, &[v, d], std));
        params.push("wpe", normal(&mut rng, &[l, d], std));
        for i in 0..config.n_layer {
            params.push(format!("h{i}.ln1.g"), Tensor::full(&[d], 1.0));
            params.push(format!("h{i}.ln1.b"), Tensor::zeros(&[d]));
            params.push(format!("h{i}.attn.w_qkv"), normal(&mut rng, &[d, 3 * d], std));
            params.push(format!("h{i}.attn.w_out"), normal(&mut rng, &[d, d], resid_std));
            params.push(format!("h{i}.attn.b_out"), Tensor::zeros(&[d]));
            params.push(format!("h{i}.ln2.g"), Tensor::full(&[d], 1.0));
            params.push(format!("h{i}.ln2.b"), Tensor::zeros(&[d]));
            params.push(format!("h{i}.mlp.w_in"), normal(&mut rng, &[d, f], std));
            params.push(format!("h{i}.mlp.b_in"), Tensor::zeros(&[f]));
            params.push(format!("h{i}.mlp.w_out"), normal(&mut rng, &[f, d], resid_std));
            params.push(format!("h{i}.mlp.b_out"), Tensor::zeros(&[d]));
        }
        params.push("ln_f.g", Tensor::full(&[d], 1.0));
        params.push("ln_f.b", Tensor::zeros(&[d]));
        Ok(LmModel { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets the (tied) token embedding to zero, which makes every prediction
    /// uniform over the vocabulary.
    pub fn zero_output_projection(&mut self) {
        if let Some(p) = self.params.iter_mut().find(|p| p.name == "wte") {
            p.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
        }
    }

    fn layer(vars: &[Var], i: usize) -> LayerVars {
        let b = 2 + i * PER_LAYER;
        LayerVars {
            ln1_g: vars[b],
            ln1_b: vars[b + 1],
            w_qkv: vars[b + 2],
            w_attn_out: vars[b + 3],
            b_attn_out: vars[b + 4],
            ln2_g: vars[b + 5],
            ln2_b: vars[b + 6],
            w_mlp_in: vars[b + 7],
            b_mlp_in: vars[b + 8],
            w_mlp_out: vars[b + 9],
            b_mlp_out: vars[b + 10],
        }
    }

    /// Records the forward pass for `[batch x seq]` input ids and returns the
    /// `[batch*seq x vocab]` logits. Dropout is applied only when `rng` is given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        ids: &[usize],
        batch: usize,
        seq: usize,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let cfg = &self.config;
        if seq == 0 || seq > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq,
                detail: format!("model context is 1..={}", cfg.max_seq_len),
            });
        }
        if ids.len() != batch * seq {
            return Err(Error::dim("lm_forward", &[batch, seq], &[ids.len()]));
        }
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let (wte, wpe) = (vars[0], vars[1]);
        let tok = tape.embedding(wte, ids)?;
        let pos = tape.embedding(wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = dropout(tape, x, cfg.dropout, rng.as_deref_mut())?;

        for i in 0..cfg.n_layer {
            let l = Self::layer(vars, i);
            let h = tape.layer_norm(x, l.ln1_g, l.ln1_b)?;
            // no qkv bias: a key bias cancels in the softmax and a value bias
            // folds into the output bias
            let qkv = tape.matmul(h, l.w_qkv)?;
            let a = tape.causal_attention(qkv, batch, seq, cfg.n_head)?;
            let a = tape.matmul(a, l.w_attn_out)?;
            let a = tape.add_bias(a, l.b_attn_out)?;
            let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut())?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, l.ln2_g, l.ln2_b)?;
            let m = tape.matmul(h, l.w_mlp_in)?;
            let m = tape.add_bias(m, l.b_mlp_in)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, l.w_mlp_out)?;
            let m = tape.add_bias(m, l.b_mlp_out)?;
            let m = dropout(tape, m, cfg.dropout, rng.as_deref_mut())?;
            x = tape.add(x, m)?;
        }
        let n = vars.len();
        let x = tape.layer_norm(x, vars[n - 2], vars[n - 1])?;
        let wte_t = tape.transpose(wte)?;
        tape.matmul(x, wte_t)
    }

    /// Mean next-token cross-entropy of `batch` recorded on `tape`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.forward_on_tape(tape, vars, &batch.inputs, batch.batch, batch.seq, rng)?;
        tape.cross_entropy_masked(logits, &batch.targets)
    }
}

fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
        _ => Ok(x),
    }
}

/// Logits `[B x T x |V|]` for a batch of equal-length sequences, evaluation
/// mode.
pub fn lm_forward(model: &LmModel, seqs: &[TokenSequence]) -> Result<Tensor> {
    let first = seqs.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let seq = first.len();
    if let Some(other) = seqs.iter().find(|s| s.len() != seq) {
        return Err(Error::dim("lm_forward", &[seq], &[other.len()]));
    }
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let logits = model.forward_on_tape(&mut tape, &vars, &ids, seqs.len(), seq, None)?;
    tape.value(logits)
        .clone()
        .reshaped(&[seqs.len(), seq, model.config.vocab_size])
}

/// Mean over all predicted positions of `-log P(x_t | x_<t)`, evaluation mode.
pub fn lm_loss(model: &LmModel, seqs: &[TokenSequence]) -> Result<f64> {
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs)?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape, false);
    let loss = model.loss_on_tape(&mut tape, &vars, &batch, None)?;
    Ok(tape.value(loss).item())
}

/// Samples an index from unnormalized `logits / temperature`; greedy (lowest
/// index among ties) when `temperature <= 0`.
pub(crate) fn sample_logits(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let mut probs = vec![0.0; scaled.len()];
    crate::tensor::softmax_into(&scaled, &mut probs);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests;
