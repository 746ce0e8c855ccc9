//! Importance-sampling estimators for marginal, joint, and conditional
//! log-likelihoods, the variance-of-log-weights inference diagnostic, and
//! cross-modality prediction accuracy. Everything here runs on the plain
//! (gradient-free) forward path with frozen parameters; each example gets
//! its own RNG stream derived from the base stream and the example index.

use crate::gaussian::{self, DiagGaussian};
use crate::model::{Likelihood, ModelError, MultimodalBatch, MvaeModel, SubsetMask};
use crate::numerics::{log_sum_exp_slice, RngStream, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gaussian(#[from] gaussian::GaussianError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("modality {0} absent from example {1}")]
    MissingModality(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("modality {0} is not categorical")]
    NotCategorical(usize),
    #[error("empty proposal mask")]
    EmptyProposal,
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    /// Mean estimate over the evaluation batch, nats per example.
    pub estimate: f64,
    pub n_samples: usize,
    /// Mean per-example unbiased variance of the log importance weights;
    /// absent when n_samples < 2.
    pub log_weight_variance: Option<f64>,
    /// Description of the proposal subset used.
    pub proposal: String,
}

/// Which log-weight population the variance diagnostic measures.
#[derive(Debug, Clone)]
pub enum WeightKind {
    Marginal(usize),
    Joint(Vec<usize>),
    /// Variance of the joint-term weights of the conditional estimator
    /// (proposal fixed to q(z|x_given)).
    Conditional { target: usize, given: usize },
}

fn require_present(batch: &MultimodalBatch, example: usize, i: usize) -> Result<()> {
    if !batch.masks[example].is_present(i) {
        return Err(EvalError::MissingModality(i, example));
    }
    Ok(())
}

fn proposal_label(mask: &SubsetMask) -> String {
    format!("q(z|{:?})", mask.indices())
}

fn example_rows<'a>(batch: &'a MultimodalBatch, example: usize) -> Vec<Option<&'a [f64]>> {
    batch
        .data
        .iter()
        .enumerate()
        .map(|(m, t)| batch.masks[example].is_present(m).then(|| t.row(example)))
        .collect()
}

/// Decode all samples for one target modality and return per-sample
/// log p(x_target | z_s) against the example's observed row.
fn decode_log_liks(
    model: &MvaeModel,
    target: usize,
    zs: &Tensor,
    x_row: &[f64],
) -> Result<Vec<f64>> {
    let params = model.decode_modality(target, zs)?;
    (0..zs.shape()[0])
        .map(|s| Ok(model.log_likelihood(target, params.row(s), x_row)?))
        .collect()
}

fn unbiased_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Per-example log importance weights for a joint target set:
/// w_s = sum_i log p(x_i|z_s) + log p(z_s) - log q(z_s).
fn joint_log_weights(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    example: usize,
    targets: &[usize],
    proposal_mask: &SubsetMask,
    n_samples: usize,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let rows = example_rows(batch, example);
    let q = model.fuse_posterior(&rows, proposal_mask)?;
    let prior = DiagGaussian::standard(model.latent_dim);
    let d = model.latent_dim;
    let mut z_data = Vec::with_capacity(n_samples * d);
    let mut log_q = Vec::with_capacity(n_samples);
    let mut log_p = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let s = gaussian::rsample(&q, stream);
        log_q.push(gaussian::log_pdf(&q, &s.z)?);
        log_p.push(gaussian::log_pdf(&prior, &s.z)?);
        z_data.extend(s.z);
    }
    let zs = Tensor::new(vec![n_samples, d], z_data)?;
    let mut weights = vec![0.0; n_samples];
    for &t in targets {
        require_present(batch, example, t)?;
        let lls = decode_log_liks(model, t, &zs, batch.data[t].row(example))?;
        for (w, ll) in weights.iter_mut().zip(lls) {
            *w += ll;
        }
    }
    for (s, w) in weights.iter_mut().enumerate() {
        *w += log_p[s] - log_q[s];
    }
    Ok(weights)
}

fn report_from_weights(
    per_example_weights: impl Iterator<Item = Result<Vec<f64>>>,
    n_samples: usize,
    proposal: String,
) -> Result<EstimatorReport> {
    let mut estimates = Vec::new();
    let mut variances = Vec::new();
    for weights in per_example_weights {
        let w = weights?;
        estimates.push(log_sum_exp_slice(&w) - (w.len() as f64).ln());
        if w.len() >= 2 {
            variances.push(unbiased_variance(&w));
        }
    }
    let n = estimates.len() as f64;
    Ok(EstimatorReport {
        estimate: estimates.iter().sum::<f64>() / n,
        n_samples,
        log_weight_variance: (n_samples >= 2)
            .then(|| variances.iter().sum::<f64>() / variances.len() as f64),
        proposal,
    })
}

/// log p(x_targets) per example via importance sampling from the proposal
/// posterior: LSE(w) - log n, averaged over the batch.
pub fn estimate_log_joint(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    targets: &[usize],
    proposal_mask: &SubsetMask,
    n_samples: usize,
    stream: &RngStream,
) -> Result<EstimatorReport> {
    if n_samples < 1 {
        return Err(EvalError::TooFewSamples {
            needed: 1,
            got: n_samples,
        });
    }
    if proposal_mask.count() == 0 {
        return Err(EvalError::EmptyProposal);
    }
    report_from_weights(
        (0..batch.len()).map(|e| {
            let mut s = stream.split(e as u64);
            joint_log_weights(model, batch, e, targets, proposal_mask, n_samples, &mut s)
        }),
        n_samples,
        proposal_label(proposal_mask),
    )
}

/// Single-target convenience wrapper around `estimate_log_joint`.
pub fn estimate_log_marginal(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    target: usize,
    proposal_mask: &SubsetMask,
    n_samples: usize,
    stream: &RngStream,
) -> Result<EstimatorReport> {
    estimate_log_joint(model, batch, &[target], proposal_mask, n_samples, stream)
}

/// log p(x_target | x_given): the joint term is importance-sampled from
/// q(z|x_given); the normalizer log E_{p(z)}[p(x_given|z)] is computed as
/// an LSE over prior draws for stability.
pub fn estimate_log_conditional(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    target: usize,
    given: usize,
    n_samples: usize,
    n_prior_samples: usize,
    stream: &RngStream,
) -> Result<EstimatorReport> {
    if n_samples < 1 || n_prior_samples < 1 {
        return Err(EvalError::TooFewSamples {
            needed: 1,
            got: n_samples.min(n_prior_samples),
        });
    }
    let mask = SubsetMask::single(model.n_modalities(), given);
    let prior = DiagGaussian::standard(model.latent_dim);
    let d = model.latent_dim;
    let mut estimates = Vec::with_capacity(batch.len());
    let mut variances = Vec::with_capacity(batch.len());
    for e in 0..batch.len() {
        require_present(batch, e, target)?;
        require_present(batch, e, given)?;
        let mut s = stream.split(e as u64);
        let w = joint_log_weights(model, batch, e, &[target, given], &mask, n_samples, &mut s)?;
        let joint_term = log_sum_exp_slice(&w) - (n_samples as f64).ln();
        if n_samples >= 2 {
            variances.push(unbiased_variance(&w));
        }
        let mut z_data = Vec::with_capacity(n_prior_samples * d);
        for _ in 0..n_prior_samples {
            z_data.extend(gaussian::rsample(&prior, &mut s).z);
        }
        let zs = Tensor::new(vec![n_prior_samples, d], z_data)?;
        let lls = decode_log_liks(model, given, &zs, batch.data[given].row(e))?;
        let evidence_term = log_sum_exp_slice(&lls) - (n_prior_samples as f64).ln();
        estimates.push(joint_term - evidence_term);
    }
    let n = estimates.len() as f64;
    Ok(EstimatorReport {
        estimate: estimates.iter().sum::<f64>() / n,
        n_samples,
        log_weight_variance: (n_samples >= 2)
            .then(|| variances.iter().sum::<f64>() / variances.len() as f64),
        proposal: format!("q(z|[{given}])"),
    })
}

/// Mean per-example unbiased variance of the log importance weights of the
/// given kind.
pub fn iw_log_weight_variance(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    kind: &WeightKind,
    proposal_mask: &SubsetMask,
    n_samples: usize,
    stream: &RngStream,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(EvalError::TooFewSamples {
            needed: 2,
            got: n_samples,
        });
    }
    let (targets, mask) = match kind {
        WeightKind::Marginal(i) => (vec![*i], proposal_mask.clone()),
        WeightKind::Joint(ts) => (ts.clone(), proposal_mask.clone()),
        WeightKind::Conditional { target, given } => (
            vec![*target, *given],
            SubsetMask::single(model.n_modalities(), *given),
        ),
    };
    let mut total = 0.0;
    for e in 0..batch.len() {
        let mut s = stream.split(e as u64);
        let w = joint_log_weights(model, batch, e, &targets, &mask, n_samples, &mut s)?;
        total += unbiased_variance(&w);
    }
    Ok(total / batch.len() as f64)
}

/// Predict categorical modality `to` from modality `from`: one posterior
/// sample per example, argmax of the decoder logits (ties toward the
/// lowest class index), compared with the observed one-hot row.
pub fn cross_modality_accuracy(
    model: &MvaeModel,
    batch: &MultimodalBatch,
    from: usize,
    to: usize,
    stream: &RngStream,
) -> Result<f64> {
    if model.specs[to].likelihood != Likelihood::Categorical {
        return Err(EvalError::NotCategorical(to));
    }
    let mask = SubsetMask::single(model.n_modalities(), from);
    let mut hits = 0usize;
    for e in 0..batch.len() {
        require_present(batch, e, from)?;
        require_present(batch, e, to)?;
        let mut s = stream.split(e as u64);
        let rows = example_rows(batch, e);
        let q = model.fuse_posterior(&rows, &mask)?;
        let z = gaussian::rsample(&q, &mut s).z;
        let zt = Tensor::new(vec![1, model.latent_dim], z)?;
        let logits = model.decode_modality(to, &zt)?;
        let predicted = crate::data::argmax_row(logits.row(0));
        let truth = crate::data::argmax_row(batch.data[to].row(e));
        if predicted == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}
