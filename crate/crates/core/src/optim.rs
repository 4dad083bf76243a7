//! Named parameter collections and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Pushes every parameter onto `tape`, as gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(&p.value)
                } else {
                    tape.constant(&p.value)
                }
            })
            .collect()
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Validation(vec![format!(
                "expected {} parameter blocks, found {}",
                self.params.len(),
                other.len()
            )]));
        }
        let mut problems = Vec::new();
        for (p, (name, t)) in self.params.iter().zip(other) {
            if &p.name != name {
                problems.push(format!("block `{name}` where `{}` was expected", p.name));
            } else if p.value.shape() != t.shape() {
                problems.push(format!(
                    "block `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        for (p, (_, t)) in self.params.iter_mut().zip(other) {
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Adam hyperparameters with linear learning-rate warmup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
}

impl AdamConfig {
    /// Language-model defaults: lr 3e-4, betas (0.9, 0.999), 100 warmup steps.
    pub fn lm_default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }

    /// GAN defaults: lr 1e-4, beta1 0.5, no warmup.
    pub fn gan_default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }

    /// Learning rate applied at zero-based `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn validate(&self, section: &str, problems: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("{section}.lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{section}.{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("{section}.eps must be positive, got {}", self.eps));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update from the gradients `tape` holds for `vars` (bound in
    /// store order) and returns the learning rate used. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, vars: &[Var]) -> f64 {
        let lr = self.config.learning_rate(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = tape.grad(vars[i]) else {
                // zero gradient still decays the moments
                self.m[i].iter_mut().for_each(|m| *m *= b1);
                self.v[i].iter_mut().for_each(|v| *v *= b2);
                for ((w, m), v) in p.value.data_mut().iter_mut().zip(&self.m[i]).zip(&self.v[i]) {
                    *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_flat() {
        let cfg = AdamConfig::lm_default();
        assert!((cfg.learning_rate(0) - 3e-6).abs() < 1e-18);
        assert!((cfg.learning_rate(49) - 1.5e-4).abs() < 1e-15);
        assert_eq!(cfg.learning_rate(99), 3e-4);
        assert_eq!(cfg.learning_rate(5000), 3e-4);
        assert_eq!(AdamConfig::gan_default().learning_rate(0), 1e-4);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_gradient_sign() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut cfg = AdamConfig::gan_default();
        cfg.lr = 0.1;
        let mut opt = Adam::new(cfg, &store);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, true);
        let sq = tape.mul(vars[0], vars[0]).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        opt.step(&mut store, &tape, &vars);
        let w = store.get(0).value.data();
        // bias-corrected first step is lr * g/|g| (up to eps)
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap());
        let mut cfg = AdamConfig::gan_default();
        cfg.lr = 0.05;
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, true);
            let sq = tape.mul(vars[0], vars[0]).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            opt.step(&mut store, &tape, &vars);
        }
        assert!(store.get(0).value.data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn load_from_rejects_mismatched_blocks() {
        let mut store = ParamStore::new();
        store.push("a", Tensor::zeros(&[2]));
        let bad = vec![("b".to_string(), Tensor::zeros(&[3]))];
        assert!(matches!(store.load_from(&bad), Err(Error::Validation(_))));
        let good = vec![("a".to_string(), Tensor::full(&[2], 1.5))];
        store.load_from(&good).unwrap();
        assert_eq!(store.get(0).value.data(), &[1.5, 1.5]);
    }
}
