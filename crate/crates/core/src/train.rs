//! Deterministic mini-batch training with cross-entropy and SGD + momentum.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor4;

pub const LOG_INTERVAL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            steps: 200,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning_rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One logged step: batch loss and accuracy, and every AGC block's temperature,
/// all taken before that step's update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub temperatures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub logs: Vec<StepLog>,
    /// Full-dataset loss before the first update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

/// Classification loss and accuracy of `images` under frozen parameters.
pub fn evaluate(model: &Model, params: &ParamStore, images: &Tensor4, labels: &[usize]) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let logits = model.forward(&mut tape, &p, x)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let acc = accuracy(tape.value(logits), labels);
    Ok((tape.value(loss).data()[0], acc))
}

/// Fraction of samples whose arg-max logit (first on ties) equals the label.
pub fn accuracy(logits: &Tensor4, labels: &[usize]) -> f64 {
    let k = logits.shape().c;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Trains `params` in place. Batches are drawn from a per-epoch shuffle seeded
/// by `cfg.seed`. Temperatures stay fixed when the model config disables learning them.
pub fn train(model: &Model, params: &mut ParamStore, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (initial_loss, _) = evaluate(model, params, &data.images, &data.labels)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let frozen: Vec<usize> = if model.config().learn_temperature {
        Vec::new()
    } else {
        model.temperatures().iter().map(|id| id.index()).collect()
    };
    let temperature_ids = model.temperatures();
    let mut velocity: Vec<Vec<f64>> = params.values().iter().map(|v| vec![0.0; v.numel()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut logs = Vec::new();

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (images, labels) = data.batch(&batch);

        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.constant(images);
        let logits = model.forward(&mut tape, &p, x)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let batch_acc = accuracy(tape.value(logits), &labels);
        let logged = step % LOG_INTERVAL == 0 || step + 1 == cfg.steps;
        let temperatures: Vec<f64> = if logged {
            temperature_ids.iter().map(|&id| params.get(id).data()[0]).collect()
        } else {
            Vec::new()
        };
        tape.backward(loss)?;

        for (i, (value, vel)) in params.values_mut().iter_mut().zip(velocity.iter_mut()).enumerate() {
            if frozen.contains(&i) {
                continue;
            }
            let Some(grad) = tape.grad(p.vars()[i]) else { continue };
            for ((w, v), g) in value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.learning_rate * *v;
            }
        }

        if logged {
            logs.push(StepLog {
                step,
                loss: loss_value,
                accuracy: batch_acc,
                temperatures,
            });
        }
    }

    let (final_loss, final_accuracy) = evaluate(model, params, &data.images, &data.labels)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: cfg.steps });
    }
    Ok(TrainReport {
        logs,
        initial_loss,
        final_loss,
        final_accuracy,
    })
}
