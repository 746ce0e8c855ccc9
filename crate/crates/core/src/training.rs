//! Training: seeded minibatch loop over the sub-sampled objective with beta
//! annealing and Adam, plus weak-supervision split construction and random
//! modality dropout.

use crate::data::Dataset;
use crate::model::{ModelError, MultimodalBatch, MvaeModel, SubsetMask, Variant};
use crate::numerics::{adam_step, AdamState, NumericsError, RngStream, Tensor};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite objective at epoch {epoch}, batch {batch}")]
    NonFiniteObjective { epoch: usize, batch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("weak split requires a bimodal dataset, got {0} modalities")]
    NonBimodal(usize),
    #[error("p_keep must be in (0, 1], got {0}")]
    PKeep(f64),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Random-subset ELBO terms per example group (k in the objective).
    pub k: usize,
    /// Epochs over which beta rises linearly from 0 to 1; 0 keeps beta at 1.
    pub beta_anneal_epochs: usize,
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub variant: Variant,
    /// Share one reparameterization draw across a group's ELBO terms.
    pub fixed_epsilon_diagnostic: bool,
}

impl TrainConfig {
    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(TrainError::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.beta_anneal_epochs > self.epochs {
            return Err(TrainError::InvalidConfig(format!(
                "beta_anneal_epochs {} exceeds epochs {}",
                self.beta_anneal_epochs, self.epochs
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.lambdas.len() != n_modalities {
            return Err(TrainError::InvalidConfig(format!(
                "{} lambdas for {} modalities",
                self.lambdas.len(),
                n_modalities
            )));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(TrainError::InvalidConfig("lambdas must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean sub-sampled objective over the epoch's batches.
    pub objective: f64,
    pub beta: f64,
    /// Mean ELBO per term label (term labels are present-subset index lists).
    pub term_means: Vec<(String, f64)>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Linear warm-up: min(1, epoch / beta_anneal_epochs); constant 1 when the
/// anneal length is 0.
pub fn beta_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if config.beta_anneal_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / config.beta_anneal_epochs as f64).min(1.0)
    }
}

fn gather_batch(pool: &MultimodalBatch, rows: &[usize]) -> MultimodalBatch {
    MultimodalBatch {
        data: pool
            .data
            .iter()
            .map(|t| t.gather_rows(rows).unwrap())
            .collect(),
        masks: rows.iter().map(|&r| pool.masks[r].clone()).collect(),
    }
}

/// All-present pool over a paired dataset.
pub fn fully_paired(dataset: &Dataset) -> MultimodalBatch {
    MultimodalBatch {
        data: dataset.data.clone(),
        masks: vec![SubsetMask::all(dataset.n_modalities()); dataset.n],
    }
}

/// Optimize the model in place. Deterministic given (seed, pool, config):
/// epoch shuffles, subset draws, and reparameterization noise all derive
/// from `config.seed`.
pub fn train(
    model: &mut MvaeModel,
    pool: &MultimodalBatch,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate(model.n_modalities())?;
    let n = pool.len();
    assert!(n > 0, "empty training pool");
    let root = RngStream::new(config.seed, 0);
    let mut shuffle_stream = root.split(1);
    let mut draw_stream = root.split(2);

    let mut adam: Vec<AdamState> = model
        .named_parameters()
        .iter()
        .map(|(_, t)| AdamState::new(t.shape()))
        .collect();

    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let beta = beta_schedule(epoch, config);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_stream.shuffle(&mut order);

        let mut objective_sum = 0.0;
        let mut batches = 0usize;
        let mut term_sums: Vec<(String, f64, usize)> = Vec::new();

        for (batch_idx, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = gather_batch(pool, rows);
            let mut tape = crate::numerics::GradTape::new();
            let binding = model.bind(&mut tape);
            let (objective, terms) = model.sub_sampled_objective_tape(
                &mut tape,
                &binding,
                &batch,
                config.k,
                beta,
                &config.lambdas,
                &mut draw_stream,
                config.fixed_epsilon_diagnostic,
            )?;
            let value = tape.value(objective).scalar_value();
            if !value.is_finite() {
                return Err(TrainError::NonFiniteObjective {
                    epoch,
                    batch: batch_idx,
                });
            }
            objective_sum += value;
            batches += 1;
            for (label, v) in terms {
                match term_sums.iter_mut().find(|(l, _, _)| *l == label) {
                    Some((_, sum, count)) => {
                        *sum += v;
                        *count += 1;
                    }
                    None => term_sums.push((label, v, 1)),
                }
            }

            // Maximize the objective: descend on its negation.
            let loss = tape.scale(objective, -1.0)?;
            let grads = tape.backward(loss)?;
            let leaf_ids = binding.flat();
            for ((param, state), id) in model
                .parameters_mut()
                .into_iter()
                .zip(adam.iter_mut())
                .zip(leaf_ids)
            {
                let grad = match grads.get(&id) {
                    Some(g) => g.reshape(param.shape().to_vec())?,
                    None => Tensor::zeros(param.shape()),
                };
                adam_step(param, &grad, state, config.learning_rate, 0.9, 0.999, 1e-8)?;
            }
        }

        history.epochs.push(EpochRecord {
            epoch,
            objective: objective_sum / batches as f64,
            beta,
            term_means: term_sums
                .into_iter()
                .map(|(l, sum, count)| (l, sum / count as f64))
                .collect(),
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Weak-supervision pool plus the original dataset index behind each
/// example's present modalities (for audits of pairing destruction).
#[derive(Debug, Clone)]
pub struct WeakSplit {
    pub pool: MultimodalBatch,
    pub origins: Vec<[Option<usize>; 2]>,
    pub n_paired: usize,
}

/// Keep both modalities for floor(fraction * n) examples; split the
/// remaining r examples ceil(r/2) / floor(r/2) into modality-0-only and
/// modality-1-only sets, each independently permuted.
pub fn make_weak_split(dataset: &Dataset, fraction_paired: f64, seed: u64) -> Result<WeakSplit> {
    if dataset.n_modalities() != 2 {
        return Err(TrainError::NonBimodal(dataset.n_modalities()));
    }
    if !(0.0..=1.0).contains(&fraction_paired) {
        return Err(TrainError::InvalidConfig(format!(
            "fraction_paired {fraction_paired} outside [0, 1]"
        )));
    }
    let n = dataset.n;
    let mut stream = RngStream::new(seed, 0);
    let mut assignment: Vec<usize> = (0..n).collect();
    stream.shuffle(&mut assignment);

    let n_paired = (fraction_paired * n as f64).floor() as usize;
    let r = n - n_paired;
    let first_half = r.div_ceil(2);
    let mut only0 = assignment[n_paired..n_paired + first_half].to_vec();
    let mut only1 = assignment[n_paired + first_half..].to_vec();
    stream.shuffle(&mut only0);
    stream.shuffle(&mut only1);

    let mut rows = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut origins = Vec::with_capacity(n);
    for &o in &assignment[..n_paired] {
        rows.push(o);
        masks.push(SubsetMask::all(2));
        origins.push([Some(o), Some(o)]);
    }
    for &o in &only0 {
        rows.push(o);
        masks.push(SubsetMask::single(2, 0));
        origins.push([Some(o), None]);
    }
    for &o in &only1 {
        rows.push(o);
        masks.push(SubsetMask::single(2, 1));
        origins.push([None, Some(o)]);
    }
    let data = dataset
        .data
        .iter()
        .map(|t| t.gather_rows(&rows).unwrap())
        .collect();
    Ok(WeakSplit {
        pool: MultimodalBatch { data, masks },
        origins,
        n_paired,
    })
}

/// Independently retain each present modality with probability p_keep;
/// examples left with no modality are dropped from the batch.
pub fn random_modality_dropout(
    batch: &MultimodalBatch,
    p_keep: f64,
    stream: &mut RngStream,
) -> Result<MultimodalBatch> {
    if !(p_keep > 0.0 && p_keep <= 1.0) {
        return Err(TrainError::PKeep(p_keep));
    }
    let mut keep_rows = Vec::new();
    let mut masks = Vec::new();
    for (r, mask) in batch.masks.iter().enumerate() {
        let thinned: Vec<bool> = mask
            .present()
            .iter()
            .map(|&p| p && stream.bernoulli(p_keep))
            .collect();
        if thinned.iter().any(|&p| p) {
            keep_rows.push(r);
            masks.push(SubsetMask::new(thinned));
        }
    }
    let data = batch
        .data
        .iter()
        .map(|t| t.gather_rows(&keep_rows).unwrap())
        .collect();
    Ok(MultimodalBatch { data, masks })
}
