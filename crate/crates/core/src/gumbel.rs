//! Gumbel noise, the Gumbel-Softmax relaxation of categorical sampling, its
//! straight-through hard variant and temperature annealing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_into, Tape, Tensor, Var};

/// Uniform draws are kept inside `[UNIFORM_CLAMP, 1 - UNIFORM_CLAMP]`.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Relaxed sample, differentiable.
    #[default]
    Soft,
    /// One-hot forward value, soft gradient backward.
    Hard,
}

/// Inverse-CDF transform of a uniform draw.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
    -(-u.ln()).ln()
}

/// Tensor of independent Gumbel(0, 1) draws.
pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| gumbel_from_uniform(rng.random()))
}

/// One relaxed draw together with the inputs that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub logits: Tensor,
    pub noise: Tensor,
    pub temperature: f64,
    pub mode: Mode,
    /// Rows of `softmax((logits + noise) / temperature)`, or their one-hot
    /// argmax in hard mode.
    pub y: Tensor,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("temperature must be positive, got {tau}")))
    }
}

/// Row-wise relaxation of `logits` under fixed `noise`.
pub fn relax(logits: &Tensor, noise: &Tensor, tau: f64, mode: Mode) -> Result<GumbelSample> {
    check_temperature(tau)?;
    if logits.shape() != noise.shape() {
        return Err(Error::dim("gumbel_softmax", logits.shape(), noise.shape()));
    }
    let k = logits.last_dim();
    let scaled: Vec<f64> = logits.data().iter().zip(noise.data()).map(|(u, g)| (u + g) / tau).collect();
    let mut y = vec![0.0; scaled.len()];
    for (row, out) in scaled.chunks(k).zip(y.chunks_mut(k)) {
        softmax_into(row, out);
    }
    let mut y = Tensor::new(logits.shape(), y)?;
    if mode == Mode::Hard {
        y = one_hot_argmax(&y);
    }
    Ok(GumbelSample {
        logits: logits.clone(),
        noise: noise.clone(),
        temperature: tau,
        mode,
        y,
    })
}

/// Soft Gumbel-Softmax draw with fresh noise.
pub fn gumbel_softmax<R: Rng + ?Sized>(logits: &Tensor, tau: f64, rng: &mut R) -> Result<GumbelSample> {
    check_temperature(tau)?;
    let noise = sample_gumbel(logits.shape(), rng);
    relax(logits, &noise, tau, Mode::Soft)
}

/// Hard (one-hot) Gumbel-Softmax draw with fresh noise.
pub fn gumbel_softmax_hard<R: Rng + ?Sized>(logits: &Tensor, tau: f64, rng: &mut R) -> Result<GumbelSample> {
    check_temperature(tau)?;
    let noise = sample_gumbel(logits.shape(), rng);
    relax(logits, &noise, tau, Mode::Hard)
}

/// One-hot rows at the first maximum of each row of `y`.
pub fn one_hot_argmax(y: &Tensor) -> Tensor {
    let k = y.last_dim();
    let mut out = Tensor::zeros(y.shape());
    for (row, o) in y.data().chunks(k).zip(out.data_mut().chunks_mut(k)) {
        o[argmax(row)] = 1.0;
    }
    out
}

/// Records the relaxation of `logits` under fixed `noise` on `tape`. In hard
/// mode the forward value is one-hot and the gradient is that of the soft
/// sample.
pub fn relax_on_tape(tape: &mut Tape, logits: Var, noise: &Tensor, tau: f64, mode: Mode) -> Result<Var> {
    check_temperature(tau)?;
    let g = tape.constant(noise);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.scale(perturbed, 1.0 / tau);
    let soft = tape.softmax(scaled)?;
    match mode {
        Mode::Soft => Ok(soft),
        Mode::Hard => {
            let hard = one_hot_argmax(tape.value(soft));
            tape.straight_through(soft, hard)
        }
    }
}

/// Like [`relax_on_tape`] with fresh noise drawn from `rng`.
pub fn gumbel_softmax_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_temperature(tau)?;
    let noise = sample_gumbel(tape.shape(logits), rng);
    relax_on_tape(tape, logits, &noise, tau, mode)
}

/// Exponential decay from `start` towards `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.3,
            decay: 1e-3,
        }
    }
}

impl TemperatureSchedule {
    pub fn constant(tau: f64) -> Self {
        TemperatureSchedule {
            start: tau,
            end: tau,
            decay: 0.0,
        }
    }

    pub fn validate(&self, section: &str, problems: &mut Vec<String>) {
        if !(self.end > 0.0 && self.end.is_finite()) {
            problems.push(format!("{section}.end must be positive, got {}", self.end));
        }
        if !(self.start >= self.end && self.start.is_finite()) {
            problems.push(format!(
                "{section}.start must be finite and at least end ({}), got {}",
                self.end, self.start
            ));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            problems.push(format!("{section}.decay must be non-negative, got {}", self.decay));
        }
    }

    /// `end + (start - end) * exp(-decay * step)`, clamped to `[end, start]`.
    pub fn anneal(&self, step: usize) -> Result<f64> {
        let mut problems = Vec::new();
        self.validate("temperature", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        let tau = self.end + (self.start - self.end) * (-self.decay * step as f64).exp();
        Ok(tau.clamp(self.end, self.start))
    }
}
