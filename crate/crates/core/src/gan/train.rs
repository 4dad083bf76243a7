use std::fmt::Write as _;

use rand::Rng;

use super::{disc_loss_on_tape, gen_loss_on_tape, one_hot_rows, sample_noise, Discriminator, GanConfig, Generator};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tape;

/// Mean `D(fake)` below this for [`COLLAPSE_PATIENCE`] consecutive iterations
/// raises the mode-collapse warning.
pub const COLLAPSE_THRESHOLD: f64 = 1e-3;
pub const COLLAPSE_PATIENCE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanRow {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub tau: f64,
}

/// Per-iteration GAN statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GanCurve {
    pub rows: Vec<GanRow>,
    /// Iteration at which the discriminator had rejected every fake batch for
    /// [`COLLAPSE_PATIENCE`] iterations in a row.
    pub collapse_warning: Option<usize>,
}

impl GanCurve {
    /// `step,d_loss,g_loss,d_real_mean,d_fake_mean,tau` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,d_loss,g_loss,d_real_mean,d_fake_mean,tau\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.d_loss, r.g_loss, r.d_real_mean, r.d_fake_mean, r.tau
            );
        }
        out
    }

    /// Warnings to surface alongside the curve.
    pub fn warnings(&self) -> Vec<String> {
        self.collapse_warning
            .map(|step| {
                format!(
                    "possible mode collapse: mean D(fake) < {COLLAPSE_THRESHOLD} for {COLLAPSE_PATIENCE} iterations ending at step {step}"
                )
            })
            .into_iter()
            .collect()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Alternating updates: `d_steps` discriminator steps on a real batch and a
/// detached fake batch, then `g_steps` generator steps on the non-saturating
/// loss. `real` holds id rows of length `config.seq_len`, sampled uniformly
/// with replacement.
pub fn train_gan(
    g: &mut Generator,
    d: &mut Discriminator,
    real: &[Vec<usize>],
    config: &GanConfig,
    steps: usize,
    seed: u64,
) -> Result<GanCurve> {
    config.validate()?;
    if real.is_empty() {
        return Err(Error::Input("GAN training needs real sequences".into()));
    }
    if g.config() != config || d.config() != config {
        return Err(Error::Contract("generator and discriminator were built for another configuration".into()));
    }
    let (t, v, b) = (config.seq_len, config.vocab_size, config.batch_size);
    let mut rng = crate::rng::stream(seed, "gan-train");
    let mut opt_d = Adam::new(config.optimizer.clone(), &d.params);
    let mut opt_g = Adam::new(config.optimizer.clone(), &g.params);
    let mut curve = GanCurve::default();
    let mut low_streak = 0;

    for step in 0..steps {
        let tau = config.temperature.anneal(step)?;
        let mut d_loss = 0.0;
        let mut d_real = 0.0;
        let mut d_fake = 0.0;
        for _ in 0..config.d_steps {
            let rows: Vec<&[usize]> = (0..b).map(|_| real[rng.random_range(0..real.len())].as_slice()).collect();
            let real_x = one_hot_rows(&rows, t, v)?;
            let z = sample_noise(b, config.noise_dim, &mut rng);

            let mut tape = Tape::new();
            let gv = g.params.bind(&mut tape, false);
            let dv = d.params.bind(&mut tape, true);
            let zv = tape.constant(&z);
            let rx = tape.constant(&real_x);
            let (sr, sf, loss) = (|| {
                let fake = g.forward_on_tape(&mut tape, &gv, zv, tau, config.train_mode, &mut rng)?;
                let sr = d.score_on_tape(&mut tape, &dv, rx)?;
                let sf = d.score_on_tape(&mut tape, &dv, fake)?;
                Ok((sr, sf, disc_loss_on_tape(&mut tape, sr, sf)?))
            })()
            .map_err(|e: Error| e.at_step(step))?;
            d_loss = tape.value(loss).item();
            if !d_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("discriminator loss is {d_loss}"),
                });
            }
            d_real = mean(tape.data(sr));
            d_fake = mean(tape.data(sf));
            tape.backward(loss)?;
            opt_d.step(&mut d.params, &tape, &dv);
        }

        let mut g_loss = 0.0;
        for _ in 0..config.g_steps {
            let z = sample_noise(b, config.noise_dim, &mut rng);
            let mut tape = Tape::new();
            let gv = g.params.bind(&mut tape, true);
            let zv = tape.constant(&z);
            let dv = d.params.bind(&mut tape, false);
            let loss = (|| {
                let fake = g.forward_on_tape(&mut tape, &gv, zv, tau, config.train_mode, &mut rng)?;
                let sf = d.score_on_tape(&mut tape, &dv, fake)?;
                gen_loss_on_tape(&mut tape, sf)
            })()
            .map_err(|e| e.at_step(step))?;
            g_loss = tape.value(loss).item();
            if !g_loss.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("generator loss is {g_loss}"),
                });
            }
            tape.backward(loss)?;
            opt_g.step(&mut g.params, &tape, &gv);
        }

        if d_fake < COLLAPSE_THRESHOLD {
            low_streak += 1;
            if low_streak >= COLLAPSE_PATIENCE && curve.collapse_warning.is_none() {
                curve.collapse_warning = Some(step);
            }
        } else {
            low_streak = 0;
        }
        curve.rows.push(GanRow {
            step,
            d_loss,
            g_loss,
            d_real_mean: d_real,
            d_fake_mean: d_fake,
            tau,
        });
    }
    Ok(curve)
}
