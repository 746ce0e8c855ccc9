//! Diagonal-Gaussian expert algebra: product of experts, quotient of
//! experts, KL to the prior, densities, and reparameterized sampling.
//!
//! Fusion is computed in precision space, T = exp(-log_var). Precisions add
//! under a product and subtract under a quotient; means combine
//! precision-weighted. The prior expert is the standard normal, so it
//! contributes precision 1 and mean 0 per latent dimension.

use crate::numerics::RngStream;
use thiserror::Error;

/// Clamp range for log-variances after any constructor or fusion op.
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("experts disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("product of an empty expert list without a prior expert")]
    EmptyProduct,
    #[error("quotient constraint violated (numerator precision must strictly dominate) in dimensions {0:?}")]
    QuotientConstraint(Vec<usize>),
    #[error("quotient variance constraint requires at least 2 modalities, got {0}")]
    TooFewModalities(usize),
    #[error("point has length {0}, expected {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, GaussianError>;

/// Diagonal Gaussian stored as mean and clamped log-variance vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

/// A reparameterized draw together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub noise: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(GaussianError::DimensionMismatch(mean.len(), log_var.len()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// Single-dimension Gaussian from mean and variance.
    pub fn scalar(mean: f64, var: f64) -> Self {
        DiagGaussian::new(vec![mean], vec![var.ln()]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variances(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    /// Precision vector T = exp(-log_var).
    pub fn precisions(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| (-v).exp()).collect()
    }
}

/// Lemma 1 closed form: precisions add, means combine precision-weighted.
/// With `include_prior` the standard normal joins the product (one unit of
/// precision, zero mean, per dimension); an empty list with the prior
/// returns the standard normal of the given dimension exactly.
pub fn product_of_experts(
    experts: &[DiagGaussian],
    include_prior: bool,
    dim: usize,
) -> Result<DiagGaussian> {
    if experts.is_empty() {
        if include_prior {
            return Ok(DiagGaussian::standard(dim));
        }
        return Err(GaussianError::EmptyProduct);
    }
    for e in experts {
        if e.dim() != dim {
            return Err(GaussianError::DimensionMismatch(dim, e.dim()));
        }
    }
    let mut precision = vec![0.0; dim];
    let mut weighted_mean = vec![0.0; dim];
    for e in experts {
        for (d, t) in e.precisions().into_iter().enumerate() {
            precision[d] += t;
            weighted_mean[d] += e.mean[d] * t;
        }
    }
    if include_prior {
        // Added after the experts so the result is bitwise identical to
        // fusing an explicit standard-normal expert at the end of the list.
        for t in &mut precision {
            *t += 1.0;
        }
    }
    let mean: Vec<f64> = weighted_mean
        .iter()
        .zip(&precision)
        .map(|(wm, t)| wm / t)
        .collect();
    let log_var: Vec<f64> = precision.iter().map(|t| -t.ln()).collect();
    DiagGaussian::new(mean, log_var)
}

/// Empty-subset fusion with a prior expert of the given dimension.
pub fn prior_expert(dim: usize) -> DiagGaussian {
    DiagGaussian::standard(dim)
}

/// Lemma 2 closed form. Errors (listing violating dimensions) unless the
/// numerator's precision strictly dominates elementwise; MVAE-Q prevents
/// this via [`constrain_variance_for_quotient`].
pub fn quotient_of_experts(
    numerator: &DiagGaussian,
    denominator: &DiagGaussian,
) -> Result<DiagGaussian> {
    if numerator.dim() != denominator.dim() {
        return Err(GaussianError::DimensionMismatch(
            numerator.dim(),
            denominator.dim(),
        ));
    }
    let tn = numerator.precisions();
    let td = denominator.precisions();
    let violations: Vec<usize> = (0..tn.len()).filter(|&d| tn[d] - td[d] <= 0.0).collect();
    if !violations.is_empty() {
        return Err(GaussianError::QuotientConstraint(violations));
    }
    let mut mean = vec![0.0; tn.len()];
    let mut log_var = vec![0.0; tn.len()];
    for d in 0..tn.len() {
        let t = tn[d] - td[d];
        mean[d] = (tn[d] * numerator.mean[d] - td[d] * denominator.mean[d]) / t;
        log_var[d] = -t.ln();
    }
    DiagGaussian::new(mean, log_var)
}

/// Rescaled-sigmoid variance head for MVAE-Q encoders:
/// V = (N/(N-1)) * sigm(raw), returned as a log-variance vector.
///
/// Every constrained variance lies in (0, N/(N-1)), so each expert's
/// precision exceeds (N-1)/N and any product of m <= N experts strictly
/// dominates the m-1 prior units it is divided by.
pub fn constrain_variance_for_quotient(raw_log_var: &[f64], n_modalities: usize) -> Result<Vec<f64>> {
    if n_modalities < 2 {
        return Err(GaussianError::TooFewModalities(n_modalities));
    }
    let scale = n_modalities as f64 / (n_modalities as f64 - 1.0);
    // log(scale * sigm(v)) = log(scale) - softplus(-v), computed in log
    // space so extreme raw values cannot underflow to log(0). The raw value
    // is clamped to +-30 so the constrained variance stays strictly below
    // the supremum N/(N-1) after rounding, keeping Sum T_i > N-1 strict.
    Ok(raw_log_var
        .iter()
        .map(|&v| {
            let v = v.clamp(-30.0, 30.0);
            (scale.ln() - crate::numerics::scalar_softplus(-v)).clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        })
        .collect())
}

/// Reparameterized draw z = mu + sigma * eps with eps ~ N(0, I).
pub fn rsample(g: &DiagGaussian, stream: &mut RngStream) -> LatentSample {
    let noise = stream.normal_vec(g.dim());
    rsample_with_noise(g, noise)
}

/// Deterministic counterpart for injected noise.
pub fn rsample_with_noise(g: &DiagGaussian, noise: Vec<f64>) -> LatentSample {
    let z = g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(&noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    LatentSample { z, noise }
}

/// KL[g || N(0, I)] in closed form: 0.5 * sum(mu^2 + V - log V - 1).
pub fn kl_to_standard_normal(g: &DiagGaussian) -> f64 {
    g.mean
        .iter()
        .zip(&g.log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Log density of `g` at `z`.
pub fn log_pdf(g: &DiagGaussian, z: &[f64]) -> Result<f64> {
    if z.len() != g.dim() {
        return Err(GaussianError::LengthMismatch(z.len(), g.dim()));
    }
    const LOG_TAU: f64 = 1.8378770664093453; // log(2*pi)
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(z)
        .map(|((m, lv), zd)| {
            let diff = zd - m;
            -0.5 * LOG_TAU - 0.5 * lv - diff * diff / (2.0 * lv.exp())
        })
        .sum())
}

/// Normalized pointwise product of densities on a dense grid, as an
/// independent oracle for the closed form.
pub fn grid_l1_error(experts: &[DiagGaussian], include_prior: bool, fused: &DiagGaussian) -> f64 {
    let lo = -15.0;
    let hi = 15.0;
    let n = 20001usize;
    let dx = (hi - lo) / (n - 1) as f64;
    let mut prod: Vec<f64> = (0..n)
        .map(|i| {
            let x = lo + i as f64 * dx;
            let mut lp = 0.0;
            for e in experts {
                lp += log_pdf(e, &[x]).unwrap();
            }
            if include_prior {
                lp += log_pdf(&DiagGaussian::standard(1), &[x]).unwrap();
            }
            lp
        })
        .collect();
    let mx = prod.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mass = 0.0;
    for p in prod.iter_mut() {
        *p = (*p - mx).exp();
        mass += *p * dx;
    }
    let mut l1 = 0.0;
    for (i, p) in prod.iter().enumerate() {
        let x = lo + i as f64 * dx;
        let fused_density = log_pdf(fused, &[x]).unwrap().exp();
        l1 += (p / mass - fused_density).abs() * dx;
    }
    l1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn random_gaussian(s: &mut RngStream, dim: usize) -> DiagGaussian {
        let mean = (0..dim).map(|_| 3.0 * s.standard_normal()).collect();
        let log_var = (0..dim).map(|_| 1.5 * s.standard_normal()).collect();
        DiagGaussian::new(mean, log_var).unwrap()
    }

    #[test]
    fn poe_equal_experts() {
        let e = DiagGaussian::scalar(0.0, 1.0);
        let p = product_of_experts(&[e.clone(), e], false, 1).unwrap();
        approx(p.mean()[0], 0.0, 0.0);
        approx(p.variances()[0], 0.5, 1e-15);
    }

    #[test]
    fn poe_with_prior() {
        let e = DiagGaussian::scalar(2.0, 1.0);
        let p = product_of_experts(&[e], true, 1).unwrap();
        approx(p.mean()[0], 1.0, 1e-15);
        approx(p.variances()[0], 0.5, 1e-15);
    }

    #[test]
    fn poe_empty_without_prior_is_error() {
        assert!(matches!(
            product_of_experts(&[], false, 1),
            Err(GaussianError::EmptyProduct)
        ));
    }

    #[test]
    fn poe_matches_grid_quadrature() {
        let mut s = RngStream::new(123, 0);
        for _ in 0..20 {
            let experts: Vec<DiagGaussian> = (0..3)
                .map(|_| {
                    DiagGaussian::new(
                        vec![2.0 * s.standard_normal()],
                        vec![s.standard_normal().clamp(-1.5, 1.5)],
                    )
                    .unwrap()
                })
                .collect();
            let fused = product_of_experts(&experts, false, 1).unwrap();
            let l1 = grid_l1_error(&experts, false, &fused);
            assert!(l1 < 1e-3, "L1 {l1}");
        }
    }

    #[test]
    fn poe_order_invariant_and_prior_equivalence() {
        let mut s = RngStream::new(7, 1);
        for _ in 0..100 {
            let mut experts: Vec<DiagGaussian> = (0..4).map(|_| random_gaussian(&mut s, 3)).collect();
            let a = product_of_experts(&experts, true, 3).unwrap();
            experts.reverse();
            let b = product_of_experts(&experts, true, 3).unwrap();
            for d in 0..3 {
                approx(a.mean()[d], b.mean()[d], 1e-10);
                approx(a.log_var()[d], b.log_var()[d], 1e-10);
            }
            // Prior flag equals an explicit standard-normal expert.
            experts.push(DiagGaussian::standard(3));
            let c = product_of_experts(&experts, false, 3).unwrap();
            assert_eq!(b, c);
        }
    }

    #[test]
    fn adding_experts_never_increases_variance() {
        let mut s = RngStream::new(8, 1);
        for _ in 0..200 {
            let base: Vec<DiagGaussian> = (0..2).map(|_| random_gaussian(&mut s, 4)).collect();
            let extra = random_gaussian(&mut s, 4);
            let before = product_of_experts(&base, true, 4).unwrap();
            let mut with = base;
            with.push(extra);
            let after = product_of_experts(&with, true, 4).unwrap();
            for d in 0..4 {
                assert!(after.variances()[d] <= before.variances()[d] + 1e-15);
            }
        }
    }

    #[test]
    fn quotient_examples() {
        let q = quotient_of_experts(
            &DiagGaussian::scalar(1.0, 0.5),
            &DiagGaussian::scalar(0.0, 1.0),
        )
        .unwrap();
        approx(q.mean()[0], 2.0, 1e-12);
        approx(q.variances()[0], 1.0, 1e-12);

        let err = quotient_of_experts(
            &DiagGaussian::scalar(0.0, 2.0),
            &DiagGaussian::scalar(0.0, 1.0),
        )
        .unwrap_err();
        assert!(matches!(err, GaussianError::QuotientConstraint(ref v) if v == &[0]));
    }

    #[test]
    fn quotient_inverts_product() {
        let mut s = RngStream::new(99, 0);
        for _ in 0..1000 {
            let p = random_gaussian(&mut s, 2);
            let q = random_gaussian(&mut s, 2);
            let prod = product_of_experts(&[p.clone(), q.clone()], false, 2).unwrap();
            let back = quotient_of_experts(&prod, &q).unwrap();
            for d in 0..2 {
                approx(back.mean()[d], p.mean()[d], 1e-10);
                approx(back.log_var()[d], p.log_var()[d], 1e-10);
            }
        }
    }

    #[test]
    fn constrain_variance_bounds() {
        let lv = constrain_variance_for_quotient(&[0.0], 2).unwrap();
        approx(lv[0].exp(), 1.0, 1e-12);
        // Large raw value approaches the supremum N/(N-1) from below.
        let lv = constrain_variance_for_quotient(&[40.0], 2).unwrap();
        approx(lv[0].exp(), 2.0, 1e-9);
        assert!(lv[0].exp() < 2.0);
        assert!(constrain_variance_for_quotient(&[0.0], 1).is_err());

        let mut s = RngStream::new(4, 4);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..3).map(|_| 20.0 * s.standard_normal()).collect();
            let n = 3usize;
            let sum_t: f64 = raw
                .iter()
                .map(|&r| {
                    let lv = constrain_variance_for_quotient(&[r], n).unwrap()[0];
                    (-lv).exp()
                })
                .sum();
            assert!(sum_t > (n - 1) as f64, "sum T {sum_t}");
        }
    }

    #[test]
    fn rsample_reparameterization() {
        let g = DiagGaussian::scalar(3.0, 4.0);
        let s = rsample_with_noise(&g, vec![0.0]);
        approx(s.z[0], 3.0, 0.0);
        let g0 = DiagGaussian::scalar(0.0, 4.0);
        let s = rsample_with_noise(&g0, vec![1.0]);
        approx(s.z[0], 2.0, 1e-15);

        let g = DiagGaussian::scalar(1.0, 0.25);
        let mut stream = RngStream::new(17, 0);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = rsample(&g, &mut stream).z[0];
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        approx(mean, 1.0, 0.01);
        approx(var, 0.25, 0.01);
    }

    #[test]
    fn kl_closed_form() {
        approx(kl_to_standard_normal(&DiagGaussian::standard(5)), 0.0, 0.0);
        approx(kl_to_standard_normal(&DiagGaussian::scalar(1.0, 1.0)), 0.5, 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut s = RngStream::new(55, 0);
        for _ in 0..20 {
            let g = DiagGaussian::new(
                vec![s.standard_normal()],
                vec![s.standard_normal().clamp(-1.0, 1.0)],
            )
            .unwrap();
            let closed = kl_to_standard_normal(&g);
            let n = 100_000;
            let (mut sum, mut sq) = (0.0, 0.0);
            let prior = DiagGaussian::standard(1);
            for _ in 0..n {
                let z = rsample(&g, &mut s).z;
                let d = log_pdf(&g, &z).unwrap() - log_pdf(&prior, &z).unwrap();
                sum += d;
                sq += d * d;
            }
            let mc = sum / n as f64;
            let se = ((sq / n as f64 - mc * mc) / n as f64).sqrt();
            assert!((closed - mc).abs() < 3.0 * se.max(1e-6), "closed {closed} mc {mc} se {se}");
        }
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut s = RngStream::new(56, 0);
        for _ in 0..1000 {
            let g = random_gaussian(&mut s, 3);
            assert!(kl_to_standard_normal(&g) >= 0.0);
        }
    }

    #[test]
    fn log_pdf_values() {
        approx(
            log_pdf(&DiagGaussian::standard(1), &[0.0]).unwrap(),
            -0.918939,
            1e-6,
        );
        let g = DiagGaussian::new(vec![1.0, -2.0], vec![0.5, -0.3]).unwrap();
        let at_mean = log_pdf(&g, &[1.0, -2.0]).unwrap();
        let expected: f64 = g
            .log_var()
            .iter()
            .map(|lv| -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv))
            .sum();
        approx(at_mean, expected, 1e-12);
        assert!(log_pdf(&g, &[0.0]).is_err());
    }

    #[test]
    fn log_pdf_matches_grid_normalization() {
        // Density integrates to 1 and matches quadrature pointwise.
        let g = DiagGaussian::scalar(0.7, 1.3);
        let n = 200_001usize;
        let (lo, hi) = (-20.0, 20.0);
        let dx = (hi - lo) / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            let x = lo + i as f64 * dx;
            mass += log_pdf(&g, &[x]).unwrap().exp() * dx;
        }
        approx(mass, 1.0, 1e-10);
    }
}
