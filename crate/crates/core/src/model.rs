//! The MVAE: per-modality MLP encoders and decoders, posterior fusion over
//! any modality subset, the per-subset ELBO, and the sub-sampled training
//! objective.
//!
//! Every training-path computation runs on the gradient tape; a parallel set
//! of plain-tensor forwards (same kernels, same operation order) serves the
//! evaluation module, which never needs gradients.

use crate::gaussian::{self, DiagGaussian, GaussianError, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::numerics::{
    tensor, BinaryKind, GradTape, NodeId, NumericsError, ReduceKind, RngStream, Tensor, UnaryKind,
};
use std::collections::BTreeMap;
use thiserror::Error;

const LOG_TAU: f64 = 1.8378770664093453; // log(2*pi)

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("modality {index}: expected data dim {expected}, got {got}")]
    DataDimMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("subset mask must have at least one present modality")]
    EmptyMask,
    #[error("mask length {0} does not match modality count {1}")]
    MaskLength(usize, usize),
    #[error("modality {0} is not categorical")]
    NotCategorical(usize),
    #[error("class index {0} out of range for {1} classes")]
    ClassOutOfRange(usize, usize),
    #[error("lambda weights: expected {0}, got {1}")]
    LambdaCount(usize, usize),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    Bernoulli,
    Categorical,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mvae,
    MvaeQ,
}

#[derive(Debug, Clone)]
pub struct ModalitySpec {
    pub name: String,
    pub likelihood: Likelihood,
    /// Input size; for categorical modalities, the class count.
    pub data_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub lambda_weight: f64,
    /// Bias-free embedding first layer (used for label modalities).
    pub embed_first_layer: bool,
}

impl ModalitySpec {
    pub fn new(name: &str, likelihood: Likelihood, data_dim: usize, hidden_dims: Vec<usize>) -> Self {
        ModalitySpec {
            name: name.to_string(),
            likelihood,
            data_dim,
            hidden_dims,
            lambda_weight: 1.0,
            embed_first_layer: false,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        assert!(lambda > 0.0);
        self.lambda_weight = lambda;
        self
    }

    pub fn with_embedding(mut self) -> Self {
        self.embed_first_layer = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, bias: bool, stream: &mut RngStream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::new(
            vec![in_dim, out_dim],
            (0..in_dim * out_dim)
                .map(|_| (2.0 * stream.uniform01() - 1.0) * bound)
                .collect(),
        )
        .unwrap();
        let b = bias.then(|| {
            Tensor::vector(
                (0..out_dim)
                    .map(|_| (2.0 * stream.uniform01() - 1.0) * bound)
                    .collect(),
            )
        });
        Linear { w, b }
    }

    fn numel(&self) -> usize {
        self.w.numel() + self.b.as_ref().map_or(0, |b| b.numel())
    }
}

/// MLP with relu between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(dims: &[usize], first_layer_bias: bool, stream: &mut RngStream) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let mut s = stream.split(i as u64);
                Linear::init(pair[0], pair[1], i > 0 || first_layer_bias, &mut s)
            })
            .collect();
        Mlp { layers }
    }

    fn numel(&self) -> usize {
        self.layers.iter().map(Linear::numel).sum()
    }

    /// Plain forward (no tape): relu between layers, linear last.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = tensor::matmul(&h, &layer.w)?;
            if let Some(b) = &layer.b {
                let b2 = b.reshape(vec![1, b.numel()])?;
                h = tensor::apply_binary(BinaryKind::Add, &h, &b2)?;
            }
            if i + 1 < self.layers.len() {
                h = tensor::apply_unary(UnaryKind::Relu, &h)?;
            }
        }
        Ok(h)
    }

    fn forward_tape(&self, tape: &mut GradTape, ids: &[LinearIds], x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in ids.iter().enumerate() {
            h = tape.matmul(h, layer.w)?;
            if let Some(b) = layer.b {
                h = tape.add(h, b)?;
            }
            if i + 1 < ids.len() {
                h = tape.unary(UnaryKind::Relu, h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: NodeId,
    pub b: Option<NodeId>,
}

/// Tape leaves for every model parameter, in `named_parameters` order.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    pub encoders: Vec<Vec<LinearIds>>,
    pub decoders: Vec<Vec<LinearIds>>,
}

impl ModelBinding {
    /// Flat leaf ids in the same order as `MvaeModel::named_parameters`.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for group in [&self.encoders, &self.decoders] {
            for mlp in group.iter() {
                for l in mlp {
                    out.push(l.w);
                    if let Some(b) = l.b {
                        out.push(b);
                    }
                }
            }
        }
        out
    }
}

/// Batched diagonal Gaussian living on the tape ([B x D] mean/log-var).
#[derive(Debug, Clone, Copy)]
pub struct TapeGaussian {
    pub mean: NodeId,
    pub log_var: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SubsetMask {
    present: Vec<bool>,
}

impl SubsetMask {
    pub fn new(present: Vec<bool>) -> Self {
        SubsetMask { present }
    }

    pub fn all(n: usize) -> Self {
        SubsetMask {
            present: vec![true; n],
        }
    }

    pub fn single(n: usize, i: usize) -> Self {
        let mut present = vec![false; n];
        present[i] = true;
        SubsetMask { present }
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Self {
        let mut present = vec![false; n];
        for &i in idx {
            present[i] = true;
        }
        SubsetMask { present }
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn present_mut(&mut self) -> &mut Vec<bool> {
        &mut self.present
    }

    pub fn is_present(&self, i: usize) -> bool {
        self.present[i]
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&i| self.present[i]).collect()
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }
}

/// Per-modality data tensors (batch-major) plus a per-example presence mask.
/// Rows of absent modalities are never read.
#[derive(Debug, Clone)]
pub struct MultimodalBatch {
    pub data: Vec<Tensor>,
    pub masks: Vec<SubsetMask>,
}

impl MultimodalBatch {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Examples grouped by identical mask pattern, in deterministic order.
    pub fn groups(&self) -> BTreeMap<SubsetMask, Vec<usize>> {
        let mut groups: BTreeMap<SubsetMask, Vec<usize>> = BTreeMap::new();
        for (i, m) in self.masks.iter().enumerate() {
            groups.entry(m.clone()).or_default().push(i);
        }
        groups
    }
}

#[derive(Debug, Clone)]
pub struct MvaeModel {
    pub latent_dim: usize,
    pub specs: Vec<ModalitySpec>,
    pub variant: Variant,
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
}

impl MvaeModel {
    pub fn new(latent_dim: usize, specs: Vec<ModalitySpec>, variant: Variant, seed: u64) -> Self {
        let root = RngStream::new(seed, 0);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let mut dims = vec![spec.data_dim];
            dims.extend_from_slice(&spec.hidden_dims);
            dims.push(2 * latent_dim);
            let mut es = root.split(2 * i as u64);
            encoders.push(Mlp::init(&dims, !spec.embed_first_layer, &mut es));

            let mut ddims = vec![latent_dim];
            ddims.extend_from_slice(&spec.hidden_dims);
            ddims.push(spec.data_dim);
            let mut ds = root.split(2 * i as u64 + 1);
            decoders.push(Mlp::init(&ddims, true, &mut ds));
        }
        MvaeModel {
            latent_dim,
            specs,
            variant,
            encoders,
            decoders,
        }
    }

    /// MNIST reference configuration: 784-dim Bernoulli image, 10-class
    /// embedded label, hidden [512, 512], D = 64, lambda = (1, 50).
    pub fn reference_mnist(variant: Variant, seed: u64) -> Self {
        MvaeModel::new(64, reference_mnist_specs(), variant, seed)
    }

    pub fn n_modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.specs.iter().map(|s| s.lambda_weight).collect()
    }

    /// Total scalar parameter count across all encoder networks.
    pub fn count_inference_parameters(&self) -> usize {
        self.encoders.iter().map(Mlp::numel).sum()
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (kind, group) in [("enc", &self.encoders), ("dec", &self.decoders)] {
            for (i, mlp) in group.iter().enumerate() {
                for (l, layer) in mlp.layers.iter().enumerate() {
                    out.push((format!("{kind}.{}.{l}.w", self.specs[i].name), &layer.w));
                    if let Some(b) = &layer.b {
                        out.push((format!("{kind}.{}.{l}.b", self.specs[i].name), b));
                    }
                }
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for group in [&mut self.encoders, &mut self.decoders] {
            for mlp in group.iter_mut() {
                for layer in &mut mlp.layers {
                    out.push(&mut layer.w);
                    if let Some(b) = &mut layer.b {
                        out.push(b);
                    }
                }
            }
        }
        out
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut GradTape) -> ModelBinding {
        let register = |tape: &mut GradTape, group: &[Mlp]| {
            group
                .iter()
                .map(|mlp| {
                    mlp.layers
                        .iter()
                        .map(|l| LinearIds {
                            w: tape.leaf(l.w.clone()),
                            b: l.b.as_ref().map(|b| {
                                let b2 = b.reshape(vec![1, b.numel()]).unwrap();
                                tape.leaf(b2)
                            }),
                        })
                        .collect()
                })
                .collect()
        };
        ModelBinding {
            encoders: register(tape, &self.encoders),
            decoders: register(tape, &self.decoders),
        }
    }

    fn check_data_dim(&self, i: usize, x_cols: usize) -> Result<()> {
        if x_cols != self.specs[i].data_dim {
            return Err(ModelError::DataDimMismatch {
                index: i,
                expected: self.specs[i].data_dim,
                got: x_cols,
            });
        }
        Ok(())
    }

    // ---- tape path -------------------------------------------------------

    /// Encoder forward on the tape: [B x data_dim] -> batched posterior
    /// parameters. Under MVAE-Q the log-variance head passes through the
    /// rescaled sigmoid so every quotient stays well-defined.
    pub fn encode_modality_tape(
        &self,
        tape: &mut GradTape,
        binding: &ModelBinding,
        i: usize,
        x: NodeId,
    ) -> Result<TapeGaussian> {
        self.check_data_dim(i, tape.value(x).shape()[1])?;
        let out = self.encoders[i].forward_tape(tape, &binding.encoders[i], x)?;
        let d = self.latent_dim;
        let mean = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let log_var = match self.variant {
            Variant::Mvae => tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?,
            Variant::MvaeQ => {
                let n = self.n_modalities() as f64;
                let scale = n / (n - 1.0);
                let clamped = tape.clamp(raw, -30.0, 30.0)?;
                let neg = tape.unary(UnaryKind::Neg, clamped)?;
                let sp = tape.unary(UnaryKind::Softplus, neg)?;
                let ln_scale = tape.scalar(scale.ln());
                let lv = tape.sub(ln_scale, sp)?;
                tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?
            }
        };
        Ok(TapeGaussian { mean, log_var })
    }

    /// Posterior fusion over the given experts, batched on the tape.
    ///
    /// MVAE: product of the experts and the prior (Eq. 4 form). MVAE-Q:
    /// quotient of the expert product by m-1 prior units; a single expert
    /// passes through unchanged.
    pub fn fuse_experts_tape(
        &self,
        tape: &mut GradTape,
        experts: &[TapeGaussian],
        batch_size: usize,
    ) -> Result<TapeGaussian> {
        let d = self.latent_dim;
        if experts.is_empty() {
            if self.variant == Variant::MvaeQ {
                return Err(ModelError::EmptyMask);
            }
            let mean = tape.constant(Tensor::zeros(&[batch_size, d]));
            let log_var = tape.constant(Tensor::zeros(&[batch_size, d]));
            return Ok(TapeGaussian { mean, log_var });
        }
        if self.variant == Variant::MvaeQ && experts.len() == 1 {
            return Ok(experts[0]);
        }
        let mut precisions = Vec::with_capacity(experts.len());
        for e in experts {
            let neg_lv = tape.unary(UnaryKind::Neg, e.log_var)?;
            precisions.push(tape.unary(UnaryKind::Exp, neg_lv)?);
        }
        let mut total = precisions[0];
        for &t in &precisions[1..] {
            total = tape.add(total, t)?;
        }
        total = match self.variant {
            Variant::Mvae => {
                let one = tape.scalar(1.0);
                tape.add(total, one)?
            }
            Variant::MvaeQ => {
                // Quotient by m-1 prior units; the rescaled-sigmoid head
                // guarantees strict positivity, checked here anyway.
                let m = experts.len() as f64;
                let denom = tape.scalar(m - 1.0);
                let t = tape.sub(total, denom)?;
                if let Some(d_bad) = tape.value(t).data().iter().position(|&v| v <= 0.0) {
                    return Err(GaussianError::QuotientConstraint(vec![d_bad]).into());
                }
                t
            }
        };
        let mut weighted = tape.mul(experts[0].mean, precisions[0])?;
        for (e, &t) in experts[1..].iter().zip(&precisions[1..]) {
            let wm = tape.mul(e.mean, t)?;
            weighted = tape.add(weighted, wm)?;
        }
        let mean = tape.div(weighted, total)?;
        let log_t = tape.unary(UnaryKind::Log, total)?;
        let neg_log_t = tape.unary(UnaryKind::Neg, log_t)?;
        let log_var = tape.clamp(neg_log_t, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(TapeGaussian { mean, log_var })
    }

    pub fn decode_modality_tape(
        &self,
        tape: &mut GradTape,
        binding: &ModelBinding,
        i: usize,
        z: NodeId,
    ) -> Result<NodeId> {
        Ok(self.decoders[i].forward_tape(tape, &binding.decoders[i], z)?)
    }

    /// Per-example log-likelihood [B] under modality i's likelihood.
    pub fn log_likelihood_tape(
        &self,
        tape: &mut GradTape,
        i: usize,
        params: NodeId,
        x: NodeId,
    ) -> Result<NodeId> {
        match self.specs[i].likelihood {
            Likelihood::Bernoulli => {
                // x * logit - softplus(logit), summed over pixels.
                let xl = tape.mul(x, params)?;
                let sp = tape.unary(UnaryKind::Softplus, params)?;
                let per = tape.sub(xl, sp)?;
                Ok(tape.reduce(ReduceKind::Sum, per, Some(1))?)
            }
            Likelihood::Categorical => {
                // One-hot x against log-softmax of the logits.
                let b = tape.value(params).shape()[0];
                let lse = tape.log_sum_exp(params, 1)?;
                let lse2 = tape.reshape(lse, vec![b, 1])?;
                let ls = tape.sub(params, lse2)?;
                let picked = tape.mul(x, ls)?;
                Ok(tape.reduce(ReduceKind::Sum, picked, Some(1))?)
            }
            Likelihood::Gaussian => {
                // Unit-variance log-density.
                let diff = tape.sub(x, params)?;
                let sq = tape.unary(UnaryKind::Square, diff)?;
                let scaled = tape.scale(sq, -0.5)?;
                let c = tape.scalar(-0.5 * LOG_TAU);
                let per = tape.add(scaled, c)?;
                Ok(tape.reduce(ReduceKind::Sum, per, Some(1))?)
            }
        }
    }

    /// Single-sample reparameterized ELBO over one modality subset
    /// (mean over the rows provided in `data`).
    ///
    /// `data[i]` must be a tape constant for every `i` in `subset`; `noise`
    /// is the [B x D] epsilon draw used for the reparameterized sample.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_subset_tape(
        &self,
        tape: &mut GradTape,
        binding: &ModelBinding,
        data: &[Option<NodeId>],
        subset: &[usize],
        beta: f64,
        lambdas: &[f64],
        noise: NodeId,
    ) -> Result<NodeId> {
        if lambdas.len() != self.n_modalities() {
            return Err(ModelError::LambdaCount(self.n_modalities(), lambdas.len()));
        }
        let batch_size = tape.value(noise).shape()[0];
        let mut experts = Vec::new();
        for &i in subset {
            let x = data[i].expect("subset modality without data");
            experts.push(self.encode_modality_tape(tape, binding, i, x)?);
        }
        if experts.is_empty() && self.variant == Variant::MvaeQ {
            return Err(ModelError::EmptyMask);
        }
        let q = self.fuse_experts_tape(tape, &experts, batch_size)?;

        // z = mu + exp(0.5 log_var) * eps
        let half_lv = tape.scale(q.log_var, 0.5)?;
        let sigma = tape.unary(UnaryKind::Exp, half_lv)?;
        let scaled_noise = tape.mul(sigma, noise)?;
        let z = tape.add(q.mean, scaled_noise)?;

        let mut recon: Option<NodeId> = None;
        for &i in subset {
            let params = self.decode_modality_tape(tape, binding, i, z)?;
            let ll = self.log_likelihood_tape(tape, i, params, data[i].unwrap())?;
            let weighted = tape.scale(ll, lambdas[i])?;
            recon = Some(match recon {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }

        // KL[q || N(0, I)] = 0.5 sum(mu^2 + V - log_var - 1)
        let mu2 = tape.unary(UnaryKind::Square, q.mean)?;
        let var = tape.unary(UnaryKind::Exp, q.log_var)?;
        let s1 = tape.add(mu2, var)?;
        let s2 = tape.sub(s1, q.log_var)?;
        let one = tape.scalar(1.0);
        let s3 = tape.sub(s2, one)?;
        let kl_terms = tape.scale(s3, 0.5)?;
        let kl = tape.reduce(ReduceKind::Sum, kl_terms, Some(1))?;
        let beta_kl = tape.scale(kl, beta)?;

        let per_example = match recon {
            Some(r) => tape.sub(r, beta_kl)?,
            None => tape.unary(UnaryKind::Neg, beta_kl)?,
        };
        Ok(tape.reduce(ReduceKind::Mean, per_example, None)?)
    }

    /// The modality subsets contributing ELBO terms for one example whose
    /// present modalities are `present`: the full present set, each
    /// singleton, and k random strict subsets of size 2..m-1 (duplicates
    /// permitted; skipped entirely when fewer than 3 modalities are
    /// present). A single present modality contributes exactly one term.
    pub fn term_subsets(
        present: &[usize],
        k: usize,
        stream: &mut RngStream,
    ) -> Vec<Vec<usize>> {
        let m = present.len();
        if m <= 1 {
            return vec![present.to_vec()];
        }
        let mut terms = Vec::with_capacity(m + 1 + k);
        terms.push(present.to_vec());
        for &i in present {
            terms.push(vec![i]);
        }
        if m >= 3 {
            for _ in 0..k {
                let size = 2 + stream.below(m - 2);
                terms.push(stream.subset(present, size).expect("size <= m"));
            }
        }
        terms
    }

    /// Eq.-5-style objective: the sum of the full-subset ELBO, every
    /// singleton ELBO, and k random-subset ELBOs, applied per mask group
    /// and combined weighted by group size. Each term draws its own
    /// reparameterization noise unless `fixed_epsilon` shares one draw per
    /// group (the k-sweep diagnostic).
    #[allow(clippy::too_many_arguments)]
    pub fn sub_sampled_objective_tape(
        &self,
        tape: &mut GradTape,
        binding: &ModelBinding,
        batch: &MultimodalBatch,
        k: usize,
        beta: f64,
        lambdas: &[f64],
        stream: &mut RngStream,
        fixed_epsilon: bool,
    ) -> Result<(NodeId, Vec<(String, f64)>)> {
        let n = self.n_modalities();
        let batch_len = batch.len();
        let mut total: Option<NodeId> = None;
        let mut term_values = Vec::new();

        for (mask, rows) in batch.groups() {
            if mask.len() != n {
                return Err(ModelError::MaskLength(mask.len(), n));
            }
            let present = mask.indices();
            if present.is_empty() {
                return Err(ModelError::EmptyMask);
            }
            // Only present modalities are ever gathered onto the tape.
            let mut data: Vec<Option<NodeId>> = vec![None; n];
            for &i in &present {
                let rows_t = batch.data[i].gather_rows(&rows)?;
                data[i] = Some(tape.constant(rows_t));
            }
            let subsets = Self::term_subsets(&present, k, stream);
            let shared_noise = fixed_epsilon.then(|| {
                let eps = Tensor::new(
                    vec![rows.len(), self.latent_dim],
                    stream.normal_vec(rows.len() * self.latent_dim),
                )
                .unwrap();
                tape.constant(eps)
            });
            let mut group_sum: Option<NodeId> = None;
            for subset in &subsets {
                let noise = match shared_noise {
                    Some(id) => id,
                    None => {
                        let eps = Tensor::new(
                            vec![rows.len(), self.latent_dim],
                            stream.normal_vec(rows.len() * self.latent_dim),
                        )
                        .unwrap();
                        tape.constant(eps)
                    }
                };
                let term =
                    self.elbo_subset_tape(tape, binding, &data, subset, beta, lambdas, noise)?;
                term_values.push((format!("{subset:?}"), tape.value(term).scalar_value()));
                group_sum = Some(match group_sum {
                    None => term,
                    Some(acc) => tape.add(acc, term)?,
                });
            }
            let weight = rows.len() as f64 / batch_len as f64;
            let weighted = tape.scale(group_sum.unwrap(), weight)?;
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        Ok((total.expect("non-empty batch"), term_values))
    }

    // ---- plain path (evaluation; no gradients) ---------------------------

    /// Batched encoder forward without a tape: ([B x D] means, log-vars).
    pub fn encode_rows(&self, i: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_data_dim(i, x.shape()[1])?;
        let out = self.encoders[i].forward(x)?;
        let d = self.latent_dim;
        let mean = tensor::slice_cols(&out, 0, d)?;
        let raw = tensor::slice_cols(&out, d, 2 * d)?;
        let log_var = match self.variant {
            Variant::Mvae => tensor::clamp(&raw, LOG_VAR_MIN, LOG_VAR_MAX)?,
            Variant::MvaeQ => {
                let lv = gaussian::constrain_variance_for_quotient(raw.data(), self.n_modalities())?;
                Tensor::new(raw.shape().to_vec(), lv)?
            }
        };
        Ok((mean, log_var))
    }

    /// Single-example encoder forward.
    pub fn encode_modality(&self, i: usize, x_row: &[f64]) -> Result<DiagGaussian> {
        let x = Tensor::new(vec![1, x_row.len()], x_row.to_vec())?;
        let (mean, lv) = self.encode_rows(i, &x)?;
        Ok(DiagGaussian::new(mean.into_data(), lv.into_data())?)
    }

    /// Fused posterior for one example over the present modalities of `mask`.
    pub fn fuse_posterior(
        &self,
        data_rows: &[Option<&[f64]>],
        mask: &SubsetMask,
    ) -> Result<DiagGaussian> {
        if mask.len() != self.n_modalities() {
            return Err(ModelError::MaskLength(mask.len(), self.n_modalities()));
        }
        let mut experts = Vec::new();
        for i in mask.indices() {
            let row = data_rows[i].expect("present modality without data");
            experts.push(self.encode_modality(i, row)?);
        }
        self.fuse_experts(&experts)
    }

    /// Plain-value counterpart of `fuse_experts_tape`.
    pub fn fuse_experts(&self, experts: &[DiagGaussian]) -> Result<DiagGaussian> {
        match self.variant {
            Variant::Mvae => {
                Ok(gaussian::product_of_experts(experts, true, self.latent_dim)?)
            }
            Variant::MvaeQ => {
                if experts.is_empty() {
                    return Err(ModelError::EmptyMask);
                }
                if experts.len() == 1 {
                    return Ok(experts[0].clone());
                }
                let prod = gaussian::product_of_experts(experts, false, self.latent_dim)?;
                let m = experts.len();
                let denom = DiagGaussian::new(
                    vec![0.0; self.latent_dim],
                    vec![-((m - 1) as f64).ln(); self.latent_dim],
                )?;
                Ok(gaussian::quotient_of_experts(&prod, &denom)?)
            }
        }
    }

    /// Batched decoder forward without a tape: [S x D] -> [S x data_dim].
    pub fn decode_modality(&self, i: usize, z: &Tensor) -> Result<Tensor> {
        Ok(self.decoders[i].forward(z)?)
    }

    /// Log-likelihood of one observation row given decoded parameters.
    pub fn log_likelihood(&self, i: usize, params_row: &[f64], x_row: &[f64]) -> Result<f64> {
        match self.specs[i].likelihood {
            Likelihood::Bernoulli => Ok(params_row
                .iter()
                .zip(x_row)
                .map(|(&l, &x)| x * l - tensor::softplus(l))
                .sum()),
            Likelihood::Categorical => {
                let lse = crate::numerics::log_sum_exp_slice(params_row);
                Ok(params_row
                    .iter()
                    .zip(x_row)
                    .map(|(&l, &x)| x * (l - lse))
                    .sum())
            }
            Likelihood::Gaussian => Ok(params_row
                .iter()
                .zip(x_row)
                .map(|(&m, &x)| {
                    let d = x - m;
                    -0.5 * LOG_TAU - 0.5 * d * d
                })
                .sum()),
        }
    }
}

/// The appendix MNIST architecture; the label encoder's first layer is a
/// bias-free embedding, which is what makes the inference-parameter total
/// come out to 1,063,680.
pub fn reference_mnist_specs() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("image", Likelihood::Bernoulli, 784, vec![512, 512]).with_lambda(1.0),
        ModalitySpec::new("label", Likelihood::Categorical, 10, vec![512, 512])
            .with_lambda(50.0)
            .with_embedding(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn toy_specs() -> Vec<ModalitySpec> {
        vec![
            ModalitySpec::new("image", Likelihood::Bernoulli, 6, vec![8]),
            ModalitySpec::new("label", Likelihood::Categorical, 3, vec![8]).with_lambda(5.0),
        ]
    }

    fn toy_model(variant: Variant) -> MvaeModel {
        MvaeModel::new(4, toy_specs(), variant, 77)
    }

    fn zero_model(variant: Variant) -> MvaeModel {
        let mut m = toy_model(variant);
        for p in m.parameters_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        m
    }

    fn toy_batch(model: &MvaeModel, b: usize, seed: u64) -> MultimodalBatch {
        let mut s = RngStream::new(seed, 0);
        let image = Tensor::new(
            vec![b, 6],
            (0..b * 6).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let mut label_data = vec![0.0; b * 3];
        for r in 0..b {
            label_data[r * 3 + s.below(3)] = 1.0;
        }
        let label = Tensor::new(vec![b, 3], label_data).unwrap();
        MultimodalBatch {
            data: vec![image, label],
            masks: vec![SubsetMask::all(model.n_modalities()); b],
        }
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let m = zero_model(Variant::Mvae);
        let g = m.encode_modality(0, &[1.0; 6]).unwrap();
        assert_eq!(g.mean(), &[0.0; 4]);
        assert_eq!(g.log_var(), &[0.0; 4]);
    }

    #[test]
    fn encoder_output_shape_law() {
        let m = toy_model(Variant::Mvae);
        for b in [1, 3, 17] {
            let x = Tensor::zeros(&[b, 6]);
            let (mean, lv) = m.encode_rows(0, &x).unwrap();
            assert_eq!(mean.shape(), &[b, 4]);
            assert_eq!(lv.shape(), &[b, 4]);
        }
    }

    #[test]
    fn encoder_matches_matrix_trace() {
        // Hand-rolled two-layer trace of the reference image encoder on a
        // fixed input, against the module forward.
        let m = MvaeModel::reference_mnist(Variant::Mvae, 5);
        let mut s = RngStream::new(3, 3);
        let x: Vec<f64> = (0..784).map(|_| s.uniform01()).collect();
        let enc = &m.encoders[0];
        let mut h = x.clone();
        for (li, layer) in enc.layers.iter().enumerate() {
            let (in_dim, out_dim) = (layer.w.shape()[0], layer.w.shape()[1]);
            let mut next = vec![0.0; out_dim];
            for o in 0..out_dim {
                let mut acc = 0.0;
                for i in 0..in_dim {
                    acc += h[i] * layer.w.data()[i * out_dim + o];
                }
                acc += layer.b.as_ref().unwrap().data()[o];
                next[o] = if li + 1 < enc.layers.len() { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        let g = m.encode_modality(0, &x).unwrap();
        for d in 0..64 {
            approx(g.mean()[d], h[d], 1e-12);
            approx(g.log_var()[d], h[64 + d].clamp(LOG_VAR_MIN, LOG_VAR_MAX), 1e-12);
        }
    }

    #[test]
    fn fuse_posterior_singleton_is_expert_times_prior() {
        let m = toy_model(Variant::Mvae);
        let x = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expert = m.encode_modality(0, &x).unwrap();
        let expected = gaussian::product_of_experts(&[expert], true, 4).unwrap();
        let fused = m
            .fuse_posterior(&[Some(&x), None], &SubsetMask::single(2, 0))
            .unwrap();
        assert_eq!(fused, expected);
    }

    #[test]
    fn fuse_all_zero_encoders_sums_precisions() {
        let m = zero_model(Variant::Mvae);
        let x0 = [0.0; 6];
        let x1 = [1.0, 0.0, 0.0];
        let fused = m
            .fuse_posterior(&[Some(&x0), Some(&x1)], &SubsetMask::all(2))
            .unwrap();
        for d in 0..4 {
            approx(fused.mean()[d], 0.0, 0.0);
            approx(fused.variances()[d], 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn fused_precision_is_sum_plus_prior() {
        let m = toy_model(Variant::Mvae);
        let x0 = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let x1 = [0.0, 1.0, 0.0];
        let e0 = m.encode_modality(0, &x0).unwrap();
        let e1 = m.encode_modality(1, &x1).unwrap();
        let fused = m
            .fuse_posterior(&[Some(&x0), Some(&x1)], &SubsetMask::all(2))
            .unwrap();
        for d in 0..4 {
            let expected = e0.precisions()[d] + e1.precisions()[d] + 1.0;
            approx(fused.precisions()[d], expected, 1e-12);
        }
    }

    #[test]
    fn zero_decoder_outputs() {
        let m = zero_model(Variant::Mvae);
        let z = Tensor::zeros(&[1, 4]);
        let logits = m.decode_modality(0, &z).unwrap();
        for &l in logits.data() {
            approx(crate::numerics::scalar_sigmoid(l), 0.5, 0.0);
        }
        let class_logits = m.decode_modality(1, &z).unwrap();
        let ll = m
            .log_likelihood(1, class_logits.row(0), &[1.0, 0.0, 0.0])
            .unwrap();
        approx(ll, -(3f64.ln()), 1e-12);
    }

    #[test]
    fn log_likelihood_values() {
        let m = toy_model(Variant::Mvae);
        // Bernoulli at logit 0, x = 1: -ln 2 per pixel.
        let ll = m.log_likelihood(0, &[0.0; 6], &[1.0; 6]).unwrap();
        approx(ll, -6.0 * 2f64.ln(), 1e-12);
        // Categorical uniform over 10 classes.
        let m10 = MvaeModel::new(
            4,
            vec![ModalitySpec::new("label", Likelihood::Categorical, 10, vec![4])],
            Variant::Mvae,
            1,
        );
        let mut onehot = [0.0; 10];
        onehot[7] = 1.0;
        let ll = m10.log_likelihood(0, &[0.3; 10], &onehot).unwrap();
        approx(ll, -(10f64.ln()), 1e-12);
    }

    #[test]
    fn stable_bernoulli_matches_naive_where_finite() {
        let m = toy_model(Variant::Mvae);
        let mut s = RngStream::new(12, 0);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..6).map(|_| 4.0 * s.standard_normal()).collect();
            let x: Vec<f64> = (0..6).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let naive: f64 = logits
                .iter()
                .zip(&x)
                .map(|(&l, &xv)| {
                    let p = crate::numerics::scalar_sigmoid(l);
                    xv * p.ln() + (1.0 - xv) * (1.0 - p).ln()
                })
                .sum();
            let stable = m.log_likelihood(0, &logits, &x).unwrap();
            approx(stable, naive, 1e-9);
        }
    }

    #[test]
    fn reference_mnist_parameter_counts() {
        let m = MvaeModel::reference_mnist(Variant::Mvae, 0);
        assert_eq!(m.encoders[0].numel(), 730_240);
        assert_eq!(m.encoders[1].numel(), 333_440);
        assert_eq!(m.count_inference_parameters(), 1_063_680);
    }

    #[test]
    fn elbo_zero_decoder_beta_zero() {
        let mut m = MvaeModel::reference_mnist(Variant::Mvae, 0);
        for p in m.parameters_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let b = 2;
        let image = Tensor::full(&[b, 784], 1.0);
        let mut tape = GradTape::new();
        let binding = m.bind(&mut tape);
        let x = tape.constant(image);
        let noise = tape.constant(Tensor::zeros(&[b, 64]));
        let elbo = m
            .elbo_subset_tape(&mut tape, &binding, &[Some(x), None], &[0], 0.0, &[1.0, 50.0], noise)
            .unwrap();
        approx(tape.value(elbo).scalar_value(), -784.0 * 2f64.ln(), 1e-9);
    }

    #[test]
    fn elbo_kl_closed_form_zero_encoders() {
        // |X| = 1 zero expert fused with the prior: N(0, 1/2) per dim.
        let m = zero_model(Variant::Mvae);
        let b = 3;
        let mut tape = GradTape::new();
        let binding = m.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[b, 6]));
        let noise = tape.constant(Tensor::zeros(&[b, 4]));
        let elbo = m
            .elbo_subset_tape(&mut tape, &binding, &[Some(x), None], &[0], 1.0, &[1.0, 1.0], noise)
            .unwrap();
        let expected_kl = 0.5 * (0.5 - 0.5f64.ln() - 1.0) * 4.0;
        // Zero image with logit 0: recon = -6 ln 2 per example.
        let expected = -6.0 * 2f64.ln() - expected_kl;
        approx(tape.value(elbo).scalar_value(), expected, 1e-12);
    }

    #[test]
    fn term_subset_counts() {
        let mut s = RngStream::new(0, 0);
        assert_eq!(MvaeModel::term_subsets(&[0, 1], 0, &mut s).len(), 3);
        assert_eq!(MvaeModel::term_subsets(&[1], 7, &mut s).len(), 1);
        // 19 modalities, k = 1: 21 terms.
        let present: Vec<usize> = (0..19).collect();
        assert_eq!(MvaeModel::term_subsets(&present, 1, &mut s).len(), 21);
        // m = 2 has no strict subsets of size >= 2, so k is skipped.
        assert_eq!(MvaeModel::term_subsets(&[0, 1], 5, &mut s).len(), 3);
        // Random subsets are strict, non-singleton subsets of the present set.
        let terms = MvaeModel::term_subsets(&[0, 2, 5, 6], 10, &mut s);
        assert_eq!(terms.len(), 4 + 1 + 10);
        for t in &terms[5..] {
            assert!(t.len() >= 2 && t.len() < 4);
            assert!(t.iter().all(|i| [0, 2, 5, 6].contains(i)));
        }
    }

    #[test]
    fn expectation_consistency_with_frozen_noise() {
        // k = 0 and a shared epsilon: objective equals
        // elbo(full) + sum elbo(singletons) exactly.
        let m = toy_model(Variant::Mvae);
        let batch = toy_batch(&m, 4, 9);
        let lambdas = m.lambdas();

        let mut s = RngStream::new(42, 1);
        let mut tape = GradTape::new();
        let binding = m.bind(&mut tape);
        let (obj, _) = m
            .sub_sampled_objective_tape(&mut tape, &binding, &batch, 0, 0.7, &lambdas, &mut s, true)
            .unwrap();
        let total = tape.value(obj).scalar_value();

        // Replay the same noise draw.
        let mut s2 = RngStream::new(42, 1);
        let eps = Tensor::new(vec![4, 4], s2.normal_vec(16)).unwrap();
        let mut tape2 = GradTape::new();
        let binding2 = m.bind(&mut tape2);
        let x0 = tape2.constant(batch.data[0].clone());
        let x1 = tape2.constant(batch.data[1].clone());
        let noise = tape2.constant(eps);
        let data = [Some(x0), Some(x1)];
        let mut sum = 0.0;
        for subset in [vec![0, 1], vec![0], vec![1]] {
            let e = m
                .elbo_subset_tape(&mut tape2, &binding2, &data, &subset, 0.7, &lambdas, noise)
                .unwrap();
            sum += tape2.value(e).scalar_value();
        }
        assert_eq!(total, sum);
    }

    #[test]
    fn tape_and_plain_fusion_agree() {
        for variant in [Variant::Mvae, Variant::MvaeQ] {
            let m = toy_model(variant);
            let batch = toy_batch(&m, 1, 31);
            let plain = m
                .fuse_posterior(
                    &[Some(batch.data[0].row(0)), Some(batch.data[1].row(0))],
                    &SubsetMask::all(2),
                )
                .unwrap();
            let mut tape = GradTape::new();
            let binding = m.bind(&mut tape);
            let x0 = tape.constant(batch.data[0].clone());
            let x1 = tape.constant(batch.data[1].clone());
            let e0 = m.encode_modality_tape(&mut tape, &binding, 0, x0).unwrap();
            let e1 = m.encode_modality_tape(&mut tape, &binding, 1, x1).unwrap();
            let fused = m.fuse_experts_tape(&mut tape, &[e0, e1], 1).unwrap();
            for d in 0..4 {
                approx(tape.value(fused.mean).data()[d], plain.mean()[d], 1e-12);
                approx(tape.value(fused.log_var).data()[d], plain.log_var()[d], 1e-12);
            }
        }
    }

    #[test]
    fn mvae_q_constraint_never_fires_with_rescaled_sigmoid() {
        let m = toy_model(Variant::MvaeQ);
        let mut s = RngStream::new(8, 8);
        for _ in 0..1000 {
            let x0: Vec<f64> = (0..6).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let mut x1 = vec![0.0; 3];
            x1[s.below(3)] = 1.0;
            m.fuse_posterior(&[Some(&x0), Some(&x1)], &SubsetMask::all(2))
                .unwrap();
        }
    }

    #[test]
    fn missing_modality_is_bitwise_isolated() {
        let m = toy_model(Variant::Mvae);
        let mut batch = toy_batch(&m, 4, 50);
        batch.masks[1] = SubsetMask::single(2, 0);
        batch.masks[3] = SubsetMask::single(2, 1);
        let lambdas = m.lambdas();

        let run = |batch: &MultimodalBatch| {
            let mut s = RngStream::new(5, 5);
            let mut tape = GradTape::new();
            let binding = m.bind(&mut tape);
            let (obj, _) = m
                .sub_sampled_objective_tape(&mut tape, &binding, batch, 2, 0.5, &lambdas, &mut s, false)
                .unwrap();
            tape.value(obj).scalar_value()
        };
        let baseline = run(&batch);

        // Poison the absent rows with NaN; the objective must be bitwise equal.
        let mut poisoned = batch.clone();
        for v in poisoned.data[1].data_mut()[3..6].iter_mut() {
            *v = f64::NAN;
        }
        for v in poisoned.data[0].data_mut()[18..24].iter_mut() {
            *v = f64::NAN;
        }
        assert_eq!(run(&poisoned).to_bits(), baseline.to_bits());
    }

    #[test]
    fn batch_of_identical_examples_matches_single_example() {
        let m = toy_model(Variant::Mvae);
        let single = toy_batch(&m, 1, 60);
        let row_img = single.data[0].row(0).to_vec();
        let row_lab = single.data[1].row(0).to_vec();
        let b = 5;
        let mut img = Vec::new();
        let mut lab = Vec::new();
        for _ in 0..b {
            img.extend_from_slice(&row_img);
            lab.extend_from_slice(&row_lab);
        }
        let repeated = MultimodalBatch {
            data: vec![
                Tensor::new(vec![b, 6], img).unwrap(),
                Tensor::new(vec![b, 3], lab).unwrap(),
            ],
            masks: vec![SubsetMask::all(2); b],
        };
        let lambdas = m.lambdas();
        let eval = |batch: &MultimodalBatch, b: usize| {
            let eps_row: Vec<f64> = RngStream::new(1, 2).normal_vec(4);
            let mut eps = Vec::new();
            for _ in 0..b {
                eps.extend_from_slice(&eps_row);
            }
            let mut tape = GradTape::new();
            let binding = m.bind(&mut tape);
            let x0 = tape.constant(batch.data[0].clone());
            let x1 = tape.constant(batch.data[1].clone());
            let noise = tape.constant(Tensor::new(vec![b, 4], eps).unwrap());
            let e = m
                .elbo_subset_tape(&mut tape, &binding, &[Some(x0), Some(x1)], &[0, 1], 1.0, &lambdas, noise)
                .unwrap();
            tape.value(e).scalar_value()
        };
        approx(eval(&single, 1), eval(&repeated, b), 1e-12);
    }

    #[test]
    fn elbo_gradient_passes_grad_check() {
        // Full 2-modality ELBO with frozen noise, differentiated w.r.t. the
        // first encoder layer's weights.
        for variant in [Variant::Mvae, Variant::MvaeQ] {
            let m = toy_model(variant);
            let batch = toy_batch(&m, 2, 91);
            let noise = Tensor::new(vec![2, 4], RngStream::new(6, 6).normal_vec(8)).unwrap();
            let lambdas = m.lambdas();
            let w0 = m.encoders[0].layers[0].w.clone();
            let err = grad_check(
                {
                    let m = m.clone();
                    let batch = batch.clone();
                    let noise = noise.clone();
                    move |tape, leaf| {
                        let mut model = m.clone();
                        model.encoders[0].layers[0].w = tape.value(leaf).clone();
                        // Bind everything else as constants, the probed
                        // weight as the leaf.
                        let mut binding = model.bind(tape);
                        binding.encoders[0][0].w = leaf;
                        let x0 = tape.constant(batch.data[0].clone());
                        let x1 = tape.constant(batch.data[1].clone());
                        let eps = tape.constant(noise.clone());
                        model
                            .elbo_subset_tape(
                                tape,
                                &binding,
                                &[Some(x0), Some(x1)],
                                &[0, 1],
                                0.8,
                                &lambdas,
                                eps,
                            )
                            .map_err(|e| match e {
                                ModelError::Numerics(n) => n,
                                other => panic!("{other}"),
                            })
                    }
                },
                &w0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{variant:?} ELBO grad check: rel err {err}");
        }
    }
}
