use crate::dataio::{batch_ranges, window_sequences, Movie, Purpose, Sample, TrackSet};
use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate_run, Aggregation, EvalReport};
use crate::numerics::{AdamConfig, AdamState};
use crate::parallel::Execution;
use crate::rng::{derive_seed, stream_rng, Stream};

use std::ops::ControlFlow;

use rand::seq::SliceRandom;

use super::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a lower validation
    /// valence + arousal MSE, restoring the best weights.
    pub early_stopping_patience: Option<usize>,
    pub aggregation: Aggregation,
    pub exec: Execution,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: crate::dataio::DEFAULT_BATCH_SIZE,
            seed,
            adam: AdamConfig::default(),
            early_stopping_patience: None,
            aggregation: Aggregation::MacroPerMovie,
            exec: Execution::Sequential,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Sample-weighted mean of the batch objectives (cross-entropy + L2).
    pub train_loss: f64,
    pub validation: Option<EvalReport>,
}

fn collect_samples(movies: &[Movie], steps: usize) -> Result<Vec<Sample<'_>>> {
    let mut out = Vec::new();
    for m in movies {
        out.extend(window_sequences(&m.feature_refs(), m.annotations.as_ref(), steps, Purpose::Train)?);
    }
    Ok(out)
}

fn annotations(movies: &[Movie]) -> TrackSet {
    movies
        .iter()
        .filter_map(|m| m.annotations.clone().map(|a| (m.id.clone(), a)))
        .collect()
}

/// Adam over shuffled mini-batches. `on_epoch` sees the model and each log
/// row as soon as the epoch is complete, and may end training early. With
/// batch norm on, the running statistics of the returned model are the
/// population moments of the training windows.
pub fn train(
    model: &mut Model,
    train_movies: &[Movie],
    validation_movies: &[Movie],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochLog) -> Result<ControlFlow<()>>,
) -> Result<Vec<EpochLog>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if config.early_stopping_patience.is_some() && validation_movies.is_empty() {
        return Err(Error::Config("early stopping needs validation movies".into()));
    }
    let samples = collect_samples(train_movies, model.max_sequence_length())?;
    if samples.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    let val_truth = annotations(validation_movies);
    let batchnorm = model.config.fusion.enable_batchnorm;
    let mut adam = AdamState::new(&model.store, config.adam);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, crate::numerics::ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, &[epoch as u64]));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, range) in batch_ranges(order.len(), config.batch_size).into_iter().enumerate() {
            // A single-row batch has no batch statistics.
            if batchnorm && range.len() < 2 {
                continue;
            }
            let batch: Vec<Sample> = order[range].iter().map(|&i| samples[i].clone()).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| derive_seed(config.seed, Stream::Sample, &[epoch as u64, b as u64, i as u64]))
                .collect();
            let bg = model.gradients(&batch, &seeds, config.exec)?;
            model.store.set_grads(&bg.grads)?;
            adam.step(&mut model.store)?;
            if let Some(moments) = &bg.bn_moments {
                model.update_batchnorm(moments);
            }
            loss_sum += bg.loss.total() * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Data("every batch was too small to train on".into()));
        }
        let validation = if validation_movies.is_empty() {
            None
        } else {
            let preds = model.predict_movies(validation_movies, config.batch_size, config.exec)?;
            Some(evaluate_run(&preds, &val_truth, config.aggregation)?)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            validation,
        };
        if !log.train_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {} in epoch {}", log.train_loss, epoch + 1)));
        }
        let flow = on_epoch(model, &log)?;
        let score = log.validation.as_ref().map(|r| r.mse[0] + r.mse[1]);
        logs.push(log);
        if flow.is_break() {
            break;
        }
        if let (Some(patience), Some(score)) = (config.early_stopping_patience, score) {
            if best.as_ref().is_none_or(|(s, _)| score < *s) {
                best = Some((score, model.store.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log::info!("early stopping after epoch {}", epoch + 1);
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    // The EMA trails the weights; the kept model gets exact train-set moments.
    model.recalibrate_batchnorm(&samples, config.batch_size, config.exec)?;
    Ok(logs)
}
