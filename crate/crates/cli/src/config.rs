//! Strict run configuration: unknown keys are rejected, and every run
//! resolves a single seed (environment variable `MVAE_SEED` overrides the
//! file).

use anyhow::{bail, Context, Result};
use mvae_core::data::{self, BinarizeMode, Dataset};
use mvae_core::model::{Likelihood, ModalitySpec, MvaeModel, Variant};
use mvae_core::numerics::{RngStream, Tensor};
use mvae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SEED_ENV: &str = "MVAE_SEED";

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainBlock,
    #[serde(default)]
    pub eval: EvalBlock,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// One of: synth_bimodal, synth_attributes, linear_gaussian, idx.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_flip_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_modalities: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadings: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_vars: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    /// For idx datasets: threshold, stochastic, or none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binarize: Option<String>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// mvae or mvae_q.
    pub variant: String,
    pub modalities: Vec<ModalityConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    /// bernoulli, categorical, or gaussian.
    pub likelihood: String,
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub embed_first_layer: bool,
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub beta_anneal_epochs: usize,
    #[serde(default)]
    pub fixed_epsilon_diagnostic: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBlock {
    pub n_samples: usize,
    pub n_prior_samples: usize,
    /// Evaluation-set size drawn from the dataset generator.
    pub n_examples: usize,
    /// Modality-index subsets used as proposals.
    pub proposals: Vec<Vec<usize>>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            n_samples: 1000,
            n_prior_samples: 5000,
            n_examples: 200,
            proposals: vec![vec![0], vec![0, 1]],
        }
    }
}

impl RunConfigFile {
    /// Parse the file and apply the environment seed override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfigFile = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .parse()
                .with_context(|| format!("{SEED_ENV}={v} is not a 64-bit unsigned integer"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        if self.model.modalities.is_empty() {
            bail!("model.modalities must not be empty");
        }
        for m in &self.model.modalities {
            likelihood_from_str(&m.likelihood)?;
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        match self.model.variant.as_str() {
            "mvae" => Ok(Variant::Mvae),
            "mvae_q" => Ok(Variant::MvaeQ),
            other => bail!("unknown variant '{other}' (expected mvae or mvae_q)"),
        }
    }

    pub fn modality_specs(&self) -> Result<Vec<ModalitySpec>> {
        self.model
            .modalities
            .iter()
            .map(|m| {
                let mut spec = ModalitySpec::new(
                    &m.name,
                    likelihood_from_str(&m.likelihood)?,
                    m.data_dim,
                    m.hidden.clone(),
                )
                .with_lambda(m.lambda);
                if m.embed_first_layer {
                    spec = spec.with_embedding();
                }
                Ok(spec)
            })
            .collect()
    }

    pub fn build_model(&self) -> Result<MvaeModel> {
        Ok(MvaeModel::new(
            self.model.latent_dim,
            self.modality_specs()?,
            self.variant()?,
            self.seed,
        ))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            k: self.train.k,
            beta_anneal_epochs: self.train.beta_anneal_epochs,
            lambdas: self.model.modalities.iter().map(|m| m.lambda).collect(),
            seed: self.seed,
            variant: self.variant()?,
            fixed_epsilon_diagnostic: self.train.fixed_epsilon_diagnostic,
        })
    }

    /// Materialize the dataset; `seed_offset` lets callers draw disjoint
    /// train/eval sets from the same generator spec.
    pub fn build_dataset(&self, seed_offset: u64) -> Result<Dataset> {
        let d = &self.dataset;
        let seed = self.seed.wrapping_add(seed_offset);
        let n = || d.n.context("dataset.n is required for this kind");
        match d.kind.as_str() {
            "synth_bimodal" => Ok(data::synth_bimodal(
                n()?,
                d.noise_flip_prob.unwrap_or(0.05),
                seed,
            )?),
            "synth_attributes" => Ok(data::synth_attributes(
                n()?,
                d.n_modalities
                    .context("dataset.n_modalities is required for synth_attributes")?,
                seed,
            )?),
            "linear_gaussian" => {
                let spec = data::LinearGaussianSpec::new(
                    d.loadings.clone().context("dataset.loadings required")?,
                    d.noise_vars.clone().context("dataset.noise_vars required")?,
                )?;
                Ok(data::linear_gaussian_dataset(&spec, n()?, seed)?)
            }
            "idx" => self.build_idx_dataset(seed),
            other => bail!("unknown dataset kind '{other}'"),
        }
    }

    fn build_idx_dataset(&self, seed: u64) -> Result<Dataset> {
        let d = &self.dataset;
        let images = data::load_idx(Path::new(
            d.images.as_deref().context("dataset.images path required")?,
        ))?;
        let labels = data::load_idx(Path::new(
            d.labels.as_deref().context("dataset.labels path required")?,
        ))?;
        let (n, rows, cols) = (images.shape()[0], images.shape()[1], images.shape()[2]);
        let mut flat = images.reshape(vec![n, rows * cols])?;
        match d.binarize.as_deref().unwrap_or("threshold") {
            "threshold" => flat = data::binarize(&flat, BinarizeMode::Threshold, None)?,
            "stochastic" => {
                let mut s = RngStream::new(seed, 7);
                flat = data::binarize(&flat, BinarizeMode::Stochastic, Some(&mut s))?;
            }
            "none" => {}
            other => bail!("unknown binarize mode '{other}'"),
        }
        let classes = 10;
        let mut onehot = vec![0.0; n * classes];
        for (r, &c) in labels.data().iter().enumerate() {
            onehot[r * classes + c as usize] = 1.0;
        }
        Ok(Dataset::new(
            vec![flat, Tensor::new(vec![n, classes], onehot)?],
            format!("idx({}, {})", d.images.as_deref().unwrap(), d.labels.as_deref().unwrap()),
        ))
    }

    /// Resolved-config echo written next to run artifacts.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn likelihood_from_str(s: &str) -> Result<Likelihood> {
    match s {
        "bernoulli" => Ok(Likelihood::Bernoulli),
        "categorical" => Ok(Likelihood::Categorical),
        "gaussian" => Ok(Likelihood::Gaussian),
        other => bail!("unknown likelihood '{other}' (expected bernoulli, categorical, or gaussian)"),
    }
}
