//! Discrete-sequence GAN. The generator maps Gaussian noise to per-position
//! token logits relaxed by Gumbel-Softmax; the discriminator scores token
//! distributions, so real one-hot rows and relaxed fake rows share one input
//! path.

mod toy;
mod train;

pub use toy::{empirical_distribution, js_divergence, optimal_discriminator, value_at_optimal_d, ToyDistribution};
pub use train::{train_gan, GanCurve, GanRow, COLLAPSE_PATIENCE, COLLAPSE_THRESHOLD};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::{gumbel_softmax_on_tape, Mode, TemperatureSchedule};
use crate::optim::{AdamConfig, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Discriminator outputs are clamped into `[SCORE_CLAMP, 1 - SCORE_CLAMP]`
/// before taking logs.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub noise_dim: usize,
    /// Generated sequence length.
    pub seq_len: usize,
    pub vocab_size: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_embed: usize,
    pub disc_hidden: usize,
    pub leaky_slope: f64,
    pub batch_size: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Relaxation used while training the generator.
    pub train_mode: Mode,
    pub temperature: TemperatureSchedule,
    pub optimizer: AdamConfig,
}

impl GanConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` and generated
    /// length `seq_len`.
    pub fn desk(vocab_size: usize, seq_len: usize) -> Self {
        GanConfig {
            noise_dim: 32,
            seq_len,
            vocab_size,
            gen_hidden: vec![128, 128],
            disc_embed: 64,
            disc_hidden: 64,
            leaky_slope: 0.2,
            batch_size: 32,
            d_steps: 1,
            g_steps: 1,
            train_mode: Mode::Soft,
            temperature: TemperatureSchedule::default(),
            optimizer: AdamConfig::gan_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_problems("gan", &mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn collect_problems(&self, section: &str, problems: &mut Vec<String>) {
        let positive = [
            ("noise_dim", self.noise_dim),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("disc_embed", self.disc_embed),
            ("disc_hidden", self.disc_hidden),
            ("batch_size", self.batch_size),
            ("d_steps", self.d_steps),
            ("g_steps", self.g_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{section}.{name} must be at least 1"));
            }
        }
        if self.gen_hidden.is_empty() || self.gen_hidden.contains(&0) {
            problems.push(format!("{section}.gen_hidden must list positive widths, got {:?}", self.gen_hidden));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            problems.push(format!("{section}.leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        self.temperature.validate(&format!("{section}.temperature"), problems);
        self.optimizer.validate(&format!("{section}.optimizer"), problems);
    }

    /// `key=value` lines, in field order.
    pub fn to_kv(&self) -> String {
        let hidden: Vec<String> = self.gen_hidden.iter().map(usize::to_string).collect();
        let mode = match self.train_mode {
            Mode::Soft => "soft",
            Mode::Hard => "hard",
        };
        let o = &self.optimizer;
        let t = &self.temperature;
        format!(
            "noise_dim={}\nseq_len={}\nvocab_size={}\ngen_hidden={}\ndisc_embed={}\ndisc_hidden={}\n\
             leaky_slope={:?}\nbatch_size={}\nd_steps={}\ng_steps={}\ntrain_mode={mode}\n\
             temperature.start={:?}\ntemperature.end={:?}\ntemperature.decay={:?}\n\
             optimizer.lr={:?}\noptimizer.beta1={:?}\noptimizer.beta2={:?}\noptimizer.eps={:?}\n\
             optimizer.warmup_steps={}\n",
            self.noise_dim,
            self.seq_len,
            self.vocab_size,
            hidden.join(","),
            self.disc_embed,
            self.disc_hidden,
            self.leaky_slope,
            self.batch_size,
            self.d_steps,
            self.g_steps,
            t.start,
            t.end,
            t.decay,
            o.lr,
            o.beta1,
            o.beta2,
            o.eps,
            o.warmup_steps,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = crate::io::parse_kv(text)?;
        let gen_hidden = kv
            .get("gen_hidden")?
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Corrupt(format!("gen_hidden: {e}")))?;
        let train_mode = match kv.get("train_mode")? {
            "soft" => Mode::Soft,
            "hard" => Mode::Hard,
            other => return Err(Error::Corrupt(format!("unknown train_mode {other:?}"))),
        };
        let cfg = GanConfig {
            noise_dim: kv.get_parsed("noise_dim")?,
            seq_len: kv.get_parsed("seq_len")?,
            vocab_size: kv.get_parsed("vocab_size")?,
            gen_hidden,
            disc_embed: kv.get_parsed("disc_embed")?,
            disc_hidden: kv.get_parsed("disc_hidden")?,
            leaky_slope: kv.get_parsed("leaky_slope")?,
            batch_size: kv.get_parsed("batch_size")?,
            d_steps: kv.get_parsed("d_steps")?,
            g_steps: kv.get_parsed("g_steps")?,
            train_mode,
            temperature: TemperatureSchedule {
                start: kv.get_parsed("temperature.start")?,
                end: kv.get_parsed("temperature.end")?,
                decay: kv.get_parsed("temperature.decay")?,
            },
            optimizer: AdamConfig {
                lr: kv.get_parsed("optimizer.lr")?,
                beta1: kv.get_parsed("optimizer.beta1")?,
                beta2: kv.get_parsed("optimizer.beta2")?,
                eps: kv.get_parsed("optimizer.eps")?,
                warmup_steps: kv.get_parsed("optimizer.warmup_steps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng))
}

/// Feed-forward generator `z -> hidden -> ... -> seq_len x vocab_size` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    config: GanConfig,
    params: ParamStore,
}

impl Generator {
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "gan-generator-init");
        let mut params = ParamStore::new();
        let mut fan_in = config.noise_dim;
        for (i, &h) in config.gen_hidden.iter().enumerate() {
            params.push(format!("g.l{i}.w"), dense(&mut rng, fan_in, h, 2f64.sqrt()));
            params.push(format!("g.l{i}.b"), Tensor::zeros(&[h]));
            fan_in = h;
        }
        let out = config.seq_len * config.vocab_size;
        params.push("g.out.w", dense(&mut rng, fan_in, out, 1.0));
        params.push("g.out.b", Tensor::zeros(&[out]));
        Ok(Generator { config, params })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Logits `[B*seq_len x vocab_size]` for noise `z` of shape `[B x noise_dim]`.
    pub fn logits_on_tape(&self, tape: &mut Tape, vars: &[Var], z: Var) -> Result<Var> {
        let c = &self.config;
        let b = match tape.shape(z) {
            [b, n] if *n == c.noise_dim => *b,
            other => return Err(Error::dim("generator", other, &[0, c.noise_dim])),
        };
        let mut h = z;
        let layers = c.gen_hidden.len();
        for l in 0..layers {
            h = tape.matmul(h, vars[2 * l])?;
            h = tape.add_bias(h, vars[2 * l + 1])?;
            h = tape.leaky_relu(h, c.leaky_slope);
        }
        let out = tape.matmul(h, vars[2 * layers])?;
        let out = tape.add_bias(out, vars[2 * layers + 1])?;
        tape.reshape(out, &[b * c.seq_len, c.vocab_size])
    }

    /// Relaxed samples `[B*seq_len x vocab_size]` recorded on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        tau: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let logits = self.logits_on_tape(tape, vars, z)?;
        gumbel_softmax_on_tape(tape, logits, tau, mode, rng)
    }

    /// Logits `[B x seq_len x vocab_size]`, without sampling.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let out = self.logits_on_tape(&mut tape, &vars, zv)?;
        let b = z.shape()[0];
        tape.value(out).clone().reshaped(&[b, self.config.seq_len, self.config.vocab_size])
    }
}

/// Standard-normal noise `[batch x noise_dim]`.
pub fn sample_noise<R: Rng + ?Sized>(batch: usize, noise_dim: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(&[batch, noise_dim], |_| StandardNormal.sample(rng))
}

/// Per-position Gumbel-Softmax samples `[B x seq_len x vocab_size]`; every
/// row sums to one.
pub fn gen_forward(g: &Generator, z: &Tensor, tau: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = g.params.bind(&mut tape, false);
    let zv = tape.constant(z);
    let y = g.forward_on_tape(&mut tape, &vars, zv, tau, mode, rng)?;
    let c = &g.config;
    tape.value(y).clone().reshaped(&[z.shape()[0], c.seq_len, c.vocab_size])
}

/// Scores a sequence of token distributions.
///
/// Each position `t` has its own embedding table, and a position's input is
/// the distribution-weighted average of that table's rows. The position
/// embeddings are mean-pooled and passed through one hidden layer and a
/// sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: GanConfig,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(config: GanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "gan-discriminator-init");
        let (t, v, e, h) = (config.seq_len, config.vocab_size, config.disc_embed, config.disc_hidden);
        let mut params = ParamStore::new();
        // one unit-variance row per (position, token)
        params.push("d.embed", dense(&mut rng, 1, t * v * e, 1.0).reshaped(&[t * v, e])?);
        params.push("d.hidden.w", dense(&mut rng, e, h, 2f64.sqrt()));
        params.push("d.hidden.b", Tensor::zeros(&[h]));
        params.push("d.out.w", dense(&mut rng, h, 1, 1.0));
        params.push("d.out.b", Tensor::zeros(&[1]));
        Ok(Discriminator { config, params })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Probabilities `[B x 1]` for distributions `x` laid out as
    /// `[B*seq_len x vocab_size]` or `[B x seq_len x vocab_size]`.
    pub fn score_on_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let c = &self.config;
        let width = c.seq_len * c.vocab_size;
        let n = tape.value(x).numel();
        if tape.value(x).last_dim() != c.vocab_size || n % width != 0 || n == 0 {
            return Err(Error::dim("discriminator", tape.shape(x), &[c.seq_len, c.vocab_size]));
        }
        let flat = tape.reshape(x, &[n / width, width])?;
        let pooled = tape.matmul(flat, vars[0])?;
        let pooled = tape.scale(pooled, 1.0 / c.seq_len as f64);
        let h = tape.matmul(pooled, vars[1])?;
        let h = tape.add_bias(h, vars[2])?;
        let h = tape.leaky_relu(h, c.leaky_slope);
        let o = tape.matmul(h, vars[3])?;
        let o = tape.add_bias(o, vars[4])?;
        Ok(tape.sigmoid(o))
    }

    /// Probabilities, one per sequence in `x`.
    pub fn score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let s = self.score_on_tape(&mut tape, &vars, xv)?;
        Ok(tape.data(s).to_vec())
    }
}

/// One-hot rows `[B*seq_len x vocab_size]` for equal-length id rows.
pub fn one_hot_rows(rows: &[&[usize]], seq_len: usize, vocab_size: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[rows.len() * seq_len, vocab_size]);
    for (b, row) in rows.iter().enumerate() {
        if row.len() != seq_len {
            return Err(Error::Length {
                len: row.len(),
                detail: format!("GAN sequences must have length {seq_len}"),
            });
        }
        for (t, &id) in row.iter().enumerate() {
            if id >= vocab_size {
                return Err(Error::Index {
                    op: "one_hot_rows",
                    index: id,
                    bound: vocab_size,
                });
            }
            out.data_mut()[(b * seq_len + t) * vocab_size + id] = 1.0;
        }
    }
    Ok(out)
}

fn clamped_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let p = tape.clamp(p, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    tape.ln(p)
}

/// `-mean ln D(real) - mean ln(1 - D(fake))` from recorded scores.
pub fn disc_loss_on_tape(tape: &mut Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    if tape.value(real_scores).numel() == 0 || tape.value(fake_scores).numel() == 0 {
        return Err(Error::Input("discriminator loss needs non-empty batches".into()));
    }
    let lr = clamped_log(tape, real_scores)?;
    let lr = tape.mean(lr);
    let one_minus = tape.affine(fake_scores, -1.0, 1.0);
    let lf = clamped_log(tape, one_minus)?;
    let lf = tape.mean(lf);
    let total = tape.add(lr, lf)?;
    Ok(tape.scale(total, -1.0))
}

/// `-mean ln D(fake)` from recorded scores.
pub fn gen_loss_on_tape(tape: &mut Tape, fake_scores: Var) -> Result<Var> {
    if tape.value(fake_scores).numel() == 0 {
        return Err(Error::Input("generator loss needs a non-empty batch".into()));
    }
    let l = clamped_log(tape, fake_scores)?;
    let l = tape.mean(l);
    Ok(tape.scale(l, -1.0))
}

/// Discriminator loss on real one-hot rows and fake distributions, both laid
/// out as `[B*seq_len x vocab_size]`.
pub fn disc_loss(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = d.params.bind(&mut tape, false);
    let (r, f) = (tape.constant(real), tape.constant(fake));
    let sr = d.score_on_tape(&mut tape, &vars, r)?;
    let sf = d.score_on_tape(&mut tape, &vars, f)?;
    let loss = disc_loss_on_tape(&mut tape, sr, sf)?;
    Ok(tape.value(loss).item())
}

pub fn gen_loss(d: &Discriminator, fake: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = d.params.bind(&mut tape, false);
    let f = tape.constant(fake);
    let sf = d.score_on_tape(&mut tape, &vars, f)?;
    let loss = gen_loss_on_tape(&mut tape, sf)?;
    Ok(tape.value(loss).item())
}
