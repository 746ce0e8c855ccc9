//! Dataset ingestion and generation: the IDX codec, binarization, glyph-toy
//! generators, and an analytically tractable linear-Gaussian family used as
//! an exact oracle for the importance-sampling estimators.

use crate::gaussian::DiagGaussian;
use crate::model::{Likelihood, ModalitySpec, MvaeModel, Variant};
use crate::numerics::{NumericsError, RngStream, Tensor};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

const LOG_TAU: f64 = 1.8378770664093453; // log(2*pi)

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad IDX magic {got:#010x} at byte offset 0")]
    BadMagic { got: u32 },
    #[error("truncated IDX file: needed {needed} bytes at byte offset {offset}, file has {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("IDX dimension product overflows at byte offset {offset}")]
    DimensionOverflow { offset: usize },
    #[error("pixel value {value} at index {index} outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("tensor not encodable as IDX: shape {0:?}")]
    NotEncodable(Vec<usize>),
    #[error("flip probability {0} outside [0, 0.5]")]
    FlipProbability(f64),
    #[error("need at least 3 modalities, got {0}")]
    TooFewModalities(usize),
    #[error("attribute count {0} exceeds table width 18")]
    TooManyAttributes(usize),
    #[error("noise variance must be positive, got {0}")]
    NoiseVariance(f64),
    #[error("exact model requires unit noise variances, got {0}")]
    ExactRequiresUnitNoise(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Paired multimodal arrays sharing a leading example extent.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: Vec<Tensor>,
    pub n: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(data: Vec<Tensor>, provenance: String) -> Self {
        let n = data[0].shape()[0];
        assert!(data.iter().all(|t| t.shape()[0] == n));
        Dataset { data, n, provenance }
    }

    pub fn n_modalities(&self) -> usize {
        self.data.len()
    }

    /// Examples `range` of every modality.
    pub fn subrange(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start..end).collect();
        Dataset::new(
            self.data.iter().map(|t| t.gather_rows(&idx).unwrap()).collect(),
            format!("{}[{start}..{end}]", self.provenance),
        )
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX byte buffer. Image files (magic 0x803) come back as
/// [n x rows x cols] with pixels scaled to [0, 1] by /255; label files
/// (magic 0x801) as [n] raw class values.
pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES => 3,
        IDX_LABELS => 1,
        got => return Err(DataError::BadMagic { got }),
    };
    let mut shape = Vec::with_capacity(ndims);
    let mut numel: usize = 1;
    for d in 0..ndims {
        let offset = 4 + 4 * d;
        let extent = read_be_u32(bytes, offset)? as usize;
        numel = numel
            .checked_mul(extent)
            .ok_or(DataError::DimensionOverflow { offset })?;
        shape.push(extent);
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header + numel {
        return Err(DataError::Truncated {
            offset: header,
            needed: numel,
            available: bytes.len() - header,
        });
    }
    let scale = if magic == IDX_IMAGES { 1.0 / 255.0 } else { 1.0 };
    let data = bytes[header..header + numel]
        .iter()
        .map(|&b| b as f64 * scale)
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn load_idx(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    parse_idx(&bytes)
}

/// Inverse of `parse_idx`: 3-D tensors encode as image files (values
/// rescaled by 255), 1-D tensors as label files. Round-trips byte-exactly.
pub fn encode_idx(t: &Tensor) -> Result<Vec<u8>> {
    let (magic, scale) = match t.shape().len() {
        3 => (IDX_IMAGES, 255.0),
        1 => (IDX_LABELS, 1.0),
        _ => return Err(DataError::NotEncodable(t.shape().to_vec())),
    };
    let mut out = Vec::with_capacity(4 + 4 * t.shape().len() + t.numel());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in t.data() {
        out.push((v * scale).round() as u8);
    }
    Ok(out)
}

pub fn write_idx(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_idx(t)?).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    Threshold,
    Stochastic,
}

/// Map [0, 1] intensities to {0, 1}: fixed threshold at 0.5, or one frozen
/// Bernoulli draw per pixel.
pub fn binarize(images: &Tensor, mode: BinarizeMode, stream: Option<&mut RngStream>) -> Result<Tensor> {
    if let Some((index, &value)) = images
        .data()
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(DataError::PixelOutOfRange { index, value });
    }
    let data = match mode {
        BinarizeMode::Threshold => images
            .data()
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
        BinarizeMode::Stochastic => {
            let stream = stream.expect("stochastic binarization needs a stream");
            images
                .data()
                .iter()
                .map(|&v| if stream.bernoulli(v) { 1.0 } else { 0.0 })
                .collect()
        }
    };
    Ok(Tensor::new(images.shape().to_vec(), data)?)
}

/// Ten 8x8 binary digit glyphs, pinned in the repo as a plain-text asset
/// ('X' = 1, '.' = 0, one blank line between glyphs, class order).
pub fn glyph_templates() -> Vec<[f64; 64]> {
    let text = include_str!("../assets/glyphs.txt");
    let mut glyphs = Vec::with_capacity(10);
    let mut current = Vec::with_capacity(64);
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        assert_eq!(line.len(), 8, "glyph rows are 8 chars");
        current.extend(line.chars().map(|c| if c == 'X' { 1.0 } else { 0.0 }));
        if current.len() == 64 {
            glyphs.push(current.clone().try_into().unwrap());
            current.clear();
        }
    }
    assert_eq!(glyphs.len(), 10, "asset holds 10 glyphs");
    glyphs
}

fn one_hot(class: usize, width: usize) -> Vec<f64> {
    let mut row = vec![0.0; width];
    row[class] = 1.0;
    row
}

/// Row-wise argmax, ties toward the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Bimodal glyph toy: modality 0 is a 64-dim Bernoulli image (class glyph
/// with independent pixel flips), modality 1 the one-hot class label.
pub fn synth_bimodal(n: usize, noise_flip_prob: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=0.5).contains(&noise_flip_prob) {
        return Err(DataError::FlipProbability(noise_flip_prob));
    }
    let glyphs = glyph_templates();
    let mut stream = RngStream::new(seed, 0);
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n * 10);
    for _ in 0..n {
        let class = stream.below(10);
        for &pixel in &glyphs[class] {
            let flipped = stream.bernoulli(noise_flip_prob);
            images.push(if flipped { 1.0 - pixel } else { pixel });
        }
        labels.extend(one_hot(class, 10));
    }
    Ok(Dataset::new(
        vec![
            Tensor::new(vec![n, 64], images)?,
            Tensor::new(vec![n, 10], labels)?,
        ],
        format!("synth_bimodal(n={n}, flip={noise_flip_prob}, seed={seed})"),
    ))
}

/// Modality specs matching `synth_bimodal`.
pub fn synth_bimodal_specs(hidden: Vec<usize>, lambda_label: f64) -> Vec<ModalitySpec> {
    vec![
        ModalitySpec::new("image", Likelihood::Bernoulli, 64, hidden.clone()),
        ModalitySpec::new("label", Likelihood::Categorical, 10, hidden)
            .with_lambda(lambda_label)
            .with_embedding(),
    ]
}

/// Fixed per-class attribute table (10 classes x 18 binary attributes).
pub const ATTRIBUTE_TABLE: [[u8; 18]; 10] = [
    [0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 1, 0],
    [1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 1],
    [0, 0, 1, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1],
    [1, 1, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0, 0],
    [0, 1, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1],
    [1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0],
    [1, 1, 0, 0, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1],
    [0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0],
    [1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 1, 1, 1, 1, 1, 0],
    [0, 1, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1, 0, 0, 0, 0, 1, 1],
];

const ATTRIBUTE_FLIP: f64 = 0.05;

/// Attribute toy: modality 0 a noisy glyph, modalities 1..N single binary
/// attributes read off the class row of `ATTRIBUTE_TABLE`, each flipped
/// with probability 0.05. Supports up to 19 modalities total.
pub fn synth_attributes(n: usize, n_modalities: usize, seed: u64) -> Result<Dataset> {
    if n_modalities < 3 {
        return Err(DataError::TooFewModalities(n_modalities));
    }
    let n_attrs = n_modalities - 1;
    if n_attrs > 18 {
        return Err(DataError::TooManyAttributes(n_attrs));
    }
    let glyphs = glyph_templates();
    let mut stream = RngStream::new(seed, 0);
    let mut images = Vec::with_capacity(n * 64);
    let mut attrs = vec![Vec::with_capacity(n); n_attrs];
    for _ in 0..n {
        let class = stream.below(10);
        for &pixel in &glyphs[class] {
            let flipped = stream.bernoulli(ATTRIBUTE_FLIP);
            images.push(if flipped { 1.0 - pixel } else { pixel });
        }
        for (j, col) in attrs.iter_mut().enumerate() {
            let bit = ATTRIBUTE_TABLE[class][j] as f64;
            let flipped = stream.bernoulli(ATTRIBUTE_FLIP);
            col.push(if flipped { 1.0 - bit } else { bit });
        }
    }
    let mut data = vec![Tensor::new(vec![n, 64], images)?];
    for col in attrs {
        data.push(Tensor::new(vec![n, 1], col)?);
    }
    Ok(Dataset::new(
        data,
        format!("synth_attributes(n={n}, modalities={n_modalities}, seed={seed})"),
    ))
}

/// One-factor linear-Gaussian family: x_i = a_i z + e_i with z ~ N(0, 1)
/// and e_i ~ N(0, s_i^2). Everything about it is closed-form.
#[derive(Debug, Clone)]
pub struct LinearGaussianSpec {
    pub loadings: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

impl LinearGaussianSpec {
    pub fn new(loadings: Vec<f64>, noise_vars: Vec<f64>) -> Result<Self> {
        assert_eq!(loadings.len(), noise_vars.len());
        if let Some(&bad) = noise_vars.iter().find(|&&v| v <= 0.0) {
            return Err(DataError::NoiseVariance(bad));
        }
        Ok(LinearGaussianSpec { loadings, noise_vars })
    }

    pub fn n_modalities(&self) -> usize {
        self.loadings.len()
    }

    fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
        let d = x - mean;
        -0.5 * (LOG_TAU + var.ln() + d * d / var)
    }

    /// log p(x_i) = log N(x_i; 0, a_i^2 + s_i^2).
    pub fn log_marginal(&self, i: usize, x: f64) -> f64 {
        Self::log_normal(x, 0.0, self.loadings[i].powi(2) + self.noise_vars[i])
    }

    /// Joint density over the given modalities via the rank-1 structure of
    /// the covariance a a' + diag(s^2) (Sherman-Morrison / determinant lemma).
    pub fn log_joint(&self, indices: &[usize], xs: &[f64]) -> f64 {
        assert_eq!(indices.len(), xs.len());
        let mut t = 0.0;
        let mut proj = 0.0;
        let mut quad_diag = 0.0;
        let mut logdet_diag = 0.0;
        for (&i, &x) in indices.iter().zip(xs) {
            let (a, s2) = (self.loadings[i], self.noise_vars[i]);
            t += a * a / s2;
            proj += a * x / s2;
            quad_diag += x * x / s2;
            logdet_diag += s2.ln();
        }
        let denom = 1.0 + t;
        let quad = quad_diag - proj * proj / denom;
        let logdet = logdet_diag + denom.ln();
        -0.5 * (indices.len() as f64 * LOG_TAU + logdet + quad)
    }

    /// log p(x_i | x_j): the posterior given x_j pushed through modality i.
    pub fn log_conditional(&self, i: usize, x_i: f64, j: usize, x_j: f64) -> f64 {
        let post = self.posterior(&[j], &[x_j]);
        let a = self.loadings[i];
        let mean = a * post.mean()[0];
        let var = a * a * post.variances()[0] + self.noise_vars[i];
        Self::log_normal(x_i, mean, var)
    }

    /// Exact Gaussian posterior p(z | x_subset) by conjugacy.
    pub fn posterior(&self, indices: &[usize], xs: &[f64]) -> DiagGaussian {
        let mut precision = 1.0;
        let mut weighted = 0.0;
        for (&i, &x) in indices.iter().zip(xs) {
            let (a, s2) = (self.loadings[i], self.noise_vars[i]);
            precision += a * a / s2;
            weighted += a * x / s2;
        }
        DiagGaussian::new(vec![weighted / precision], vec![-(precision.ln())]).unwrap()
    }

    /// Per-modality likelihood expert N(z; x/a, s^2/a^2), the factor whose
    /// product with the prior gives the exact posterior.
    pub fn likelihood_expert(&self, i: usize, x: f64) -> DiagGaussian {
        let (a, s2) = (self.loadings[i], self.noise_vars[i]);
        DiagGaussian::new(vec![x / a], vec![(s2 / (a * a)).ln()]).unwrap()
    }

    /// An `MvaeModel` whose encoders and decoders realize this family
    /// exactly: encoder i emits the likelihood expert for x_i, decoder i
    /// the conditional mean a_i z under a unit-variance Gaussian
    /// likelihood. Requires s_i = 1 so the model's unit-variance decoder
    /// density is the true one; the fused posterior then matches
    /// `posterior` and importance weights have zero variance.
    pub fn exact_mvae(&self) -> Result<MvaeModel> {
        if let Some(&bad) = self.noise_vars.iter().find(|&&v| v != 1.0) {
            return Err(DataError::ExactRequiresUnitNoise(bad));
        }
        let specs: Vec<ModalitySpec> = (0..self.n_modalities())
            .map(|i| ModalitySpec::new(&format!("x{i}"), Likelihood::Gaussian, 1, vec![]))
            .collect();
        let mut model = MvaeModel::new(1, specs, Variant::Mvae, 0);
        for (i, &a) in self.loadings.iter().enumerate() {
            let enc = &mut model.encoders[i].layers[0];
            enc.w = Tensor::new(vec![1, 2], vec![1.0 / a, 0.0])?;
            enc.b = Some(Tensor::vector(vec![0.0, -2.0 * a.ln()]));
            let dec = &mut model.decoders[i].layers[0];
            dec.w = Tensor::new(vec![1, 1], vec![a])?;
            dec.b = Some(Tensor::vector(vec![0.0]));
        }
        Ok(model)
    }
}

/// Sample n examples from the generative law, one [n x 1] tensor per
/// modality.
pub fn linear_gaussian_dataset(spec: &LinearGaussianSpec, n: usize, seed: u64) -> Result<Dataset> {
    let mut stream = RngStream::new(seed, 0);
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); spec.n_modalities()];
    for _ in 0..n {
        let z = stream.standard_normal();
        for (i, col) in cols.iter_mut().enumerate() {
            let noise = stream.standard_normal() * spec.noise_vars[i].sqrt();
            col.push(spec.loadings[i] * z + noise);
        }
    }
    let data = cols
        .into_iter()
        .map(|c| Tensor::new(vec![n, 1], c).map_err(DataError::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(
        data,
        format!("linear_gaussian(n={n}, seed={seed})"),
    ))
}
