use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{sample_noise, Generator};
use crate::error::{Error, Result};
use crate::gumbel::{relax, sample_gumbel, Mode};
use crate::tensor::{argmax, Tensor};

pub const MAX_TOY_LEN: usize = 4;
pub const MAX_TOY_VOCAB: usize = 6;
const NORMALIZATION_TOL: f64 = 1e-12;

/// Explicit probability table over every sequence of `seq_len` tokens drawn
/// from `0..vocab_size`. Sequences are indexed in base `vocab_size`, first
/// position most significant.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDistribution {
    seq_len: usize,
    vocab_size: usize,
    probs: Vec<f64>,
}

impl ToyDistribution {
    pub fn new(seq_len: usize, vocab_size: usize, probs: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if !(1..=MAX_TOY_LEN).contains(&seq_len) {
            problems.push(format!("toy sequence length must be in 1..={MAX_TOY_LEN}, got {seq_len}"));
        }
        if !(1..=MAX_TOY_VOCAB).contains(&vocab_size) {
            problems.push(format!("toy vocabulary must be in 1..={MAX_TOY_VOCAB}, got {vocab_size}"));
        }
        if problems.is_empty() && probs.len() != vocab_size.pow(seq_len as u32) {
            problems.push(format!(
                "table has {} entries, expected {}",
                probs.len(),
                vocab_size.pow(seq_len as u32)
            ));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            problems.push("probabilities must be finite and non-negative".into());
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            problems.push(format!("probabilities sum to {total}, not 1"));
        }
        if problems.is_empty() {
            Ok(ToyDistribution {
                seq_len,
                vocab_size,
                probs,
            })
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Table proportional to non-negative `weights`.
    pub fn from_weights(seq_len: usize, vocab_size: usize, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Validation(vec![format!("weights sum to {total}")]));
        }
        let mut probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        // the last positive entry absorbs the rounding residue, so the
        // left-to-right sum is exactly one
        if let Some(k) = probs.iter().rposition(|&p| p > 0.0) {
            probs[k] = 1.0 - probs[..k].iter().sum::<f64>();
        }
        Self::new(seq_len, vocab_size, probs)
    }

    pub fn uniform(seq_len: usize, vocab_size: usize) -> Result<Self> {
        Self::from_weights(seq_len, vocab_size, &vec![1.0; vocab_size.pow(seq_len as u32)])
    }

    /// Random table with exponentially distributed weights; `sparsity` is the
    /// chance that an entry is zeroed (at least one entry stays positive).
    pub fn random<R: Rng + ?Sized>(seq_len: usize, vocab_size: usize, sparsity: f64, rng: &mut R) -> Result<Self> {
        let n = vocab_size.pow(seq_len as u32);
        let mut w: Vec<f64> = (0..n)
            .map(|_| {
                let e = -(1.0 - rng.random::<f64>()).ln();
                if rng.random::<f64>() < sparsity {
                    0.0
                } else {
                    e
                }
            })
            .collect();
        if w.iter().all(|&x| x == 0.0) {
            w[rng.random_range(0..n)] = 1.0;
        }
        Self::from_weights(seq_len, vocab_size, &w)
    }

    /// Point mass on `seq`.
    pub fn point(vocab_size: usize, seq: &[usize]) -> Result<Self> {
        let mut d = Self::uniform(seq.len(), vocab_size)?;
        let i = d.index_of(seq)?;
        d.probs.iter_mut().for_each(|p| *p = 0.0);
        d.probs[i] = 1.0;
        Ok(d)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index_of(&self, seq: &[usize]) -> Result<usize> {
        if seq.len() != self.seq_len {
            return Err(Error::Length {
                len: seq.len(),
                detail: format!("toy sequences have length {}", self.seq_len),
            });
        }
        seq.iter().try_fold(0, |acc, &t| {
            if t < self.vocab_size {
                Ok(acc * self.vocab_size + t)
            } else {
                Err(Error::Index {
                    op: "toy_distribution",
                    index: t,
                    bound: self.vocab_size,
                })
            }
        })
    }

    pub fn sequence(&self, index: usize) -> Vec<usize> {
        let mut seq = vec![0; self.seq_len];
        let mut rest = index;
        for slot in seq.iter_mut().rev() {
            *slot = rest % self.vocab_size;
            rest /= self.vocab_size;
        }
        seq
    }

    pub fn prob(&self, seq: &[usize]) -> Result<f64> {
        Ok(self.probs[self.index_of(seq)?])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return self.sequence(i);
            }
        }
        self.sequence(last)
    }

    fn check_compatible(&self, other: &ToyDistribution) -> Result<()> {
        if self.seq_len != other.seq_len || self.vocab_size != other.vocab_size {
            return Err(Error::dim(
                "toy_distribution",
                &[self.seq_len, self.vocab_size],
                &[other.seq_len, other.vocab_size],
            ));
        }
        Ok(())
    }
}

fn d_star(pd: f64, pg: f64) -> f64 {
    if pd + pg == 0.0 {
        0.5
    } else {
        pd / (pd + pg)
    }
}

/// `p_data(x) / (p_data(x) + p_g(x))`, and 0.5 where both vanish.
pub fn optimal_discriminator(p_data: &ToyDistribution, p_g: &ToyDistribution, x: &[usize]) -> Result<f64> {
    p_data.check_compatible(p_g)?;
    Ok(d_star(p_data.prob(x)?, p_g.prob(x)?))
}

fn check_normalized(p: &ToyDistribution) -> Result<()> {
    let total: f64 = p.probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL || p.probs.iter().any(|v| *v < 0.0) {
        return Err(Error::Validation(vec![format!("distribution sums to {total}, not 1")]));
    }
    Ok(())
}

// a * ln(a / b) with 0 ln 0 = 0
fn xlogy_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * (a / b).ln()
    }
}

/// Jensen-Shannon divergence in nats.
pub fn js_divergence(p: &ToyDistribution, q: &ToyDistribution) -> Result<f64> {
    p.check_compatible(q)?;
    check_normalized(p)?;
    check_normalized(q)?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        kl_p += xlogy_ratio(a, m);
        kl_q += xlogy_ratio(b, m);
    }
    Ok((0.5 * kl_p + 0.5 * kl_q).max(0.0))
}

/// Value of the minimax objective at the optimal discriminator, computed as
/// the expectation `E_data ln D* + E_g ln(1 - D*)` and as
/// `-ln 4 + 2 JS(p_data, p_g)`. Returns `(direct, closed_form)`; the two must
/// agree to 1e-10.
pub fn value_at_optimal_d(p_data: &ToyDistribution, p_g: &ToyDistribution) -> Result<(f64, f64)> {
    let js = js_divergence(p_data, p_g)?;
    let mut direct = 0.0;
    for (&pd, &pg) in p_data.probs.iter().zip(&p_g.probs) {
        let d = d_star(pd, pg);
        if pd > 0.0 {
            direct += pd * d.ln();
        }
        if pg > 0.0 {
            direct += pg * (1.0 - d).ln();
        }
    }
    let closed = -(4f64.ln()) + 2.0 * js;
    if (direct - closed).abs() > 1e-10 {
        return Err(Error::Consistency(format!(
            "V(D*, G): expectation {direct} differs from -ln 4 + 2 JS = {closed}"
        )));
    }
    Ok((direct, closed))
}

/// Distribution of `n` hard generator samples (a toy-sized generator).
pub fn empirical_distribution(g: &Generator, n: usize, rng: &mut ChaCha8Rng) -> Result<ToyDistribution> {
    if n == 0 {
        return Err(Error::Validation(vec!["empirical distribution needs at least one sample".into()]));
    }
    let c = g.config();
    let (t, v) = (c.seq_len, c.vocab_size);
    let mut counts = vec![0u64; v.pow(t as u32)];
    let template = ToyDistribution::uniform(t, v)?;
    const CHUNK: usize = 4096;
    let mut done = 0;
    while done < n {
        let b = CHUNK.min(n - done);
        let z = sample_noise(b, c.noise_dim, rng);
        let logits = g.logits(&z)?.reshaped(&[b * t, v])?;
        let noise: Tensor = sample_gumbel(logits.shape(), rng);
        // temperature does not change the argmax
        let y = relax(&logits, &noise, 1.0, Mode::Hard)?.y;
        for row in y.data().chunks(t * v) {
            let seq: Vec<usize> = row.chunks(v).map(argmax).collect();
            counts[template.index_of(&seq)?] += 1;
        }
        done += b;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    ToyDistribution::from_weights(t, v, &weights)
}
