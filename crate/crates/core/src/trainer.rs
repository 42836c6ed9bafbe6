//! Mini-batch Adam training with validation early stopping, and the two-way
//! split of the training subjects into ensemble parts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::volgrad::{Adam, AdamConfig, Graph};
use crate::voxcnn::{Checkpoint, TrainingMeta, VoxCnnModel};
use crate::{rng, Error, Result, Scalar};

/// Inference batch size. Fixed so that predictions never depend on how a
/// caller chunks a dataset.
pub const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub split_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            batch_size: 10,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            split_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.patience < 1 {
            return Err(Error::config("patience must be at least 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config(format!(
                "split_fraction must lie strictly between 0 and 1, got {}",
                self.split_fraction
            )));
        }
        AdamConfig::with_learning_rate(self.learning_rate).validate()
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("invalid value {value:?} for {key}"));
        match key {
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad())?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad())?,
            "patience" => self.patience = value.parse().map_err(|_| bad())?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "split_fraction" => self.split_fraction = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::config(format!("unknown training option {key:?}"))),
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "learning_rate={:?}\nbatch_size={}\nmax_epochs={}\npatience={}\nseed={}\nsplit_fraction={:?}\n",
            self.learning_rate, self.batch_size, self.max_epochs, self.patience, self.seed, self.split_fraction
        )
    }
}

/// Seeded partition of `n` items into two disjoint parts; the first holds
/// `round(fraction * n)` items, clamped so both parts are non-empty.
pub fn split_two(n: usize, seed: u64, fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::data(format!("cannot split {n} subject(s) into two parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive(seed, "split_two")));
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let b = order.split_off(k);
    Ok((order, b))
}

/// Batches of one epoch. The final partial batch is kept, except that a
/// trailing single sample joins the previous batch: batch normalization
/// needs two samples per batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive_index(seed, "epoch", epoch as u64)));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NoEpochs,
    MaxEpochs,
    Patience,
}

/// Training history. Wall-clock time is kept apart from the rest so that
/// the serialized report is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub stop_reason: StopReason,
    #[serde(skip)]
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn log_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "epoch {:>4}  train_loss {:.6e}  val_mse {:.6e}",
                e.epoch, e.train_loss, e.val_mse
            );
        }
        let _ = writeln!(
            s,
            "stop {:?} at epoch {}; best epoch {} (val_mse {})",
            self.stop_reason,
            self.epochs.len(),
            self.best_epoch,
            self.best_val_mse.map_or("n/a".to_string(), |v| format!("{v:.6e}"))
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub fn mse(predictions: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / predictions.len() as f64
}

/// Inference-mode predictions (the blended output) for every sample.
pub fn predict_dataset<T: Scalar>(model: &VoxCnnModel<T>, data: &Dataset) -> Result<Vec<f64>> {
    let with_tabular = model.config().tabular_dim > 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = data.batch::<T>(chunk, with_tabular)?;
        let p = model.predict(&batch.volumes, batch.tabular.as_ref())?;
        out.extend(p.combined.iter().map(|v| v.to_f64_lossy()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub subject_ids: Vec<String>,
    pub predictions: Vec<f64>,
    /// Present when every sample has a target.
    pub mse: Option<f64>,
}

impl Evaluation {
    pub fn rows(&self) -> Vec<(String, f64)> {
        self.subject_ids
            .iter()
            .cloned()
            .zip(self.predictions.iter().copied())
            .collect()
    }
}

pub fn evaluate<T: Scalar>(model: &VoxCnnModel<T>, data: &Dataset) -> Result<Evaluation> {
    let predictions = predict_dataset(model, data)?;
    let mse = data.targets().ok().map(|t| mse(&predictions, &t));
    Ok(Evaluation {
        subject_ids: data.subject_ids(),
        predictions,
        mse,
    })
}

fn nonfinite_parameter<T: Scalar>(model: &VoxCnnModel<T>) -> Option<String> {
    model.params().into_iter().find_map(|(name, t)| {
        let bad_value = !t.all_finite();
        let bad_grad = t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        (bad_value || bad_grad).then_some(name)
    })
}

fn train_step<T: Scalar>(
    model: &mut VoxCnnModel<T>,
    optimizer: &mut Adam<T>,
    data: &Dataset,
    batch: &[usize],
    rng: &mut rng::Stream,
) -> Result<f64> {
    let with_tabular = model.config().tabular_dim > 0;
    let b = data.batch::<T>(batch, with_tabular)?;
    let targets = b
        .targets
        .ok_or_else(|| Error::data("training batch contains subjects without targets"))?;
    let mut g = Graph::new();
    let x = g.constant(b.volumes);
    let t = b.tabular.map(|t| g.constant(t));
    let out = model.forward_train(&mut g, x, t, rng)?;
    let loss = model.loss(&mut g, &out, &targets)?;
    let loss_value = g.value(loss).data()[0].to_f64_lossy();
    if !loss_value.is_finite() {
        let culprit = nonfinite_parameter(model).unwrap_or_else(|| "none (inputs or targets)".into());
        return Err(Error::numeric(format!(
            "loss is {loss_value}; non-finite parameter: {culprit}"
        )));
    }
    g.backward(loss)?;
    model.zero_grads();
    model.accumulate_grads(&g, &out);
    optimizer.step(model.params_mut())?;
    Ok(loss_value)
}

/// Trains `model` in place on `train`, validating on `val` after every epoch,
/// and returns the best-validation snapshot. `on_epoch` sees each record as
/// it completes.
pub fn train_member_observed<T: Scalar>(
    model: VoxCnnModel<T>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint<T>, TrainReport)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    if train.len() < 2 {
        return Err(Error::data("batch normalization needs at least two training subjects"));
    }
    train.targets()?;
    let val_targets = val.targets()?;
    let started = Instant::now();
    let mut model = model;
    let mut optimizer = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), model.params());
    let mut best = Checkpoint {
        model: model.clone(),
        optimizer: Some(optimizer.clone()),
        meta: TrainingMeta {
            seed: config.seed,
            epoch: 0,
            val_mse: None,
        },
    };
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut stop_reason = if config.max_epochs == 0 {
        StopReason::NoEpochs
    } else {
        StopReason::MaxEpochs
    };

    for epoch in 1..=config.max_epochs {
        let mut dropout_rng = rng::stream(rng::derive_index(config.seed, "dropout", epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, batch) in epoch_batches(train.len(), config.batch_size, config.seed, epoch)
            .iter()
            .enumerate()
        {
            let loss = train_step(&mut model, &mut optimizer, train, batch, &mut dropout_rng).map_err(|e| match e {
                Error::Numeric(m) => Error::numeric(format!("epoch {epoch}, batch {}: {m}", bi + 1)),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_mse = mse(&predict_dataset(&model, val)?, &val_targets);
        if !val_mse.is_finite() {
            return Err(Error::numeric(format!("epoch {epoch}: validation MSE is {val_mse}")));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_mse,
        };
        on_epoch(&record);
        epochs.push(record);

        if best.meta.val_mse.is_none_or(|b| val_mse < b) {
            best = Checkpoint {
                model: model.clone(),
                optimizer: Some(optimizer.clone()),
                meta: TrainingMeta {
                    seed: config.seed,
                    epoch,
                    val_mse: Some(val_mse),
                },
            };
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let report = TrainReport {
        seed: config.seed,
        epochs,
        best_epoch: best.meta.epoch,
        best_val_mse: best.meta.val_mse,
        stop_reason,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best, report))
}

pub fn train_member<T: Scalar>(
    model: VoxCnnModel<T>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<(Checkpoint<T>, TrainReport)> {
    train_member_observed(model, train, val, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_differ_by_at_most_one() {
        let (a, b) = split_two(3739, 1, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (1870, 1869));
        let (a, b) = split_two(4, 9, 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (2, 2));
        assert!(split_two(1, 0, 0.5).is_err());
    }

    #[test]
    fn batches_partition_each_epoch() {
        for n in [2, 9, 10, 11, 21, 37] {
            let batches = epoch_batches(n, 10, 3, 1);
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(batches.iter().all(|b| b.len() >= 2));
        }
    }

    #[test]
    fn constant_mean_predictor_scores_target_variance() {
        let t = [1.0, 2.0, 3.0, 6.0];
        let m = t.iter().sum::<f64>() / 4.0;
        let var = t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
        assert!((mse(&[m; 4], &t) - var).abs() < 1e-15);
        assert_eq!(mse(&t, &t), 0.0);
    }
}
