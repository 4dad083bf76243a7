use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::LmModel;
use crate::data::{Batcher, Dataset};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
}

/// Per-step training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// `step,loss,learning_rate` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,learning_rate\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.step, r.loss, r.learning_rate);
        }
        out
    }
}

/// Maximum-likelihood training with Adam on batches drawn from `data`.
pub fn train_lm(model: &mut LmModel, data: &Dataset, settings: &TrainSettings) -> Result<TrainingCurve> {
    train_lm_with(model, data, settings, |_, _| Ok(()))
}

/// [`train_lm`] calling `after_step(step, model)` after every update.
pub fn train_lm_with(
    model: &mut LmModel,
    data: &Dataset,
    settings: &TrainSettings,
    mut after_step: impl FnMut(usize, &LmModel) -> Result<()>,
) -> Result<TrainingCurve> {
    let mut batcher = Batcher::new(data, settings.batch_size)?;
    let mut rng = crate::rng::stream(settings.seed, "lm-train");
    let mut opt = Adam::new(settings.optimizer.clone(), &model.params);
    let mut curve = TrainingCurve::default();
    for step in 0..settings.steps {
        let batch = batcher.next_batch(&mut rng)?;
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape, true);
        let loss = model
            .loss_on_tape(&mut tape, &vars, &batch, Some(&mut rng))
            .map_err(|e| e.at_step(step))?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let learning_rate = opt.step(&mut model.params, &tape, &vars);
        curve.rows.push(CurveRow {
            step,
            loss: value,
            learning_rate,
        });
        after_step(step, model)?;
    }
    Ok(curve)
}
