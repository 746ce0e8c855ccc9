//! Fast self-contained oracle suite: closed forms against independent
//! numerical oracles. The `check` CLI command prints one pass/fail line per
//! entry; tests can inject a corrupted fusion formula to prove the grid
//! oracle has teeth.

use crate::data::{linear_gaussian_dataset, LinearGaussianSpec};
use crate::evaluation::{
    estimate_log_conditional, estimate_log_joint, estimate_log_marginal, iw_log_weight_variance,
    WeightKind,
};
use crate::gaussian::{
    self, constrain_variance_for_quotient, grid_l1_error, kl_to_standard_normal, DiagGaussian,
};
use crate::model::{ModalitySpec, MultimodalBatch, MvaeModel, SubsetMask, Variant};
use crate::numerics::{grad_check, GradTape, NodeId, RngStream, Tensor, UnaryKind};
use crate::training::fully_paired;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// A fusion implementation under test; the production one is
/// `gaussian::product_of_experts`.
pub type PoeFormula = fn(&[DiagGaussian], bool, usize) -> gaussian::Result<DiagGaussian>;

pub fn run_checks() -> Vec<CheckResult> {
    run_checks_with_poe(gaussian::product_of_experts)
}

pub fn run_checks_with_poe(poe: PoeFormula) -> Vec<CheckResult> {
    vec![
        check_poe_grid(poe),
        check_qoe_inversion(),
        check_rescaled_sigmoid(),
        check_gradients(),
        check_kl_monte_carlo(),
        check_estimators(),
        check_parameter_counts(),
    ]
}

fn random_gaussian(s: &mut RngStream) -> DiagGaussian {
    DiagGaussian::new(vec![2.0 * s.standard_normal()], vec![s.standard_normal()]).unwrap()
}

/// 100 random 1-D expert sets (sizes 1-5, with and without the prior):
/// fused density vs normalized grid quadrature, L1 < 1e-3.
pub fn check_poe_grid(poe: PoeFormula) -> CheckResult {
    let mut s = RngStream::new(1001, 0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let size = 1 + s.below(5);
        let experts: Vec<DiagGaussian> = (0..size).map(|_| random_gaussian(&mut s)).collect();
        let include_prior = trial % 2 == 0;
        let fused = match poe(&experts, include_prior, 1) {
            Ok(f) => f,
            Err(e) => return CheckResult::new("poe_grid", false, format!("fusion failed: {e}")),
        };
        worst = worst.max(grid_l1_error(&experts, include_prior, &fused));
    }
    CheckResult::new(
        "poe_grid",
        worst < 1e-3,
        format!("worst L1 vs quadrature {worst:.2e} (limit 1e-3)"),
    )
}

/// quotient(product(p, q), q) recovers p within 1e-10 over 1000 pairs, and
/// the constraint error fires exactly when the numerator precision does not
/// strictly dominate.
pub fn check_qoe_inversion() -> CheckResult {
    let mut s = RngStream::new(1002, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = random_gaussian(&mut s);
        let q = random_gaussian(&mut s);
        let prod = match gaussian::product_of_experts(&[p.clone(), q.clone()], false, 1) {
            Ok(v) => v,
            Err(e) => return CheckResult::new("qoe_inversion", false, e.to_string()),
        };
        match gaussian::quotient_of_experts(&prod, &q) {
            Ok(rec) => {
                worst = worst.max((rec.mean()[0] - p.mean()[0]).abs());
                worst = worst.max((rec.log_var()[0] - p.log_var()[0]).abs());
            }
            Err(e) => return CheckResult::new("qoe_inversion", false, e.to_string()),
        }
    }
    // Violation exactly when T_num - T_den <= 0.
    let wide = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
    let violation_fires = gaussian::quotient_of_experts(&wide, &wide).is_err();
    let passed = worst < 1e-10 && violation_fires;
    CheckResult::new(
        "qoe_inversion",
        passed,
        format!("worst recovery error {worst:.2e} (limit 1e-10), violation detection {violation_fires}"),
    )
}

/// 10^5 random MVAE-Q head outputs never violate sum(T_i) > N - 1 for
/// N in {2, 3, 5, 19}.
pub fn check_rescaled_sigmoid() -> CheckResult {
    let mut s = RngStream::new(1003, 0);
    for &n in &[2usize, 3, 5, 19] {
        for _ in 0..25_000 {
            let raw: Vec<f64> = (0..n).map(|_| 40.0 * s.standard_normal()).collect();
            let total: f64 = match constrain_variance_for_quotient(&raw, n) {
                Ok(lv) => lv.iter().map(|v| (-v).exp()).sum(),
                Err(e) => return CheckResult::new("rescaled_sigmoid", false, e.to_string()),
            };
            if total <= (n - 1) as f64 {
                return CheckResult::new(
                    "rescaled_sigmoid",
                    false,
                    format!("sum T = {total} <= N - 1 = {} at N = {n}", n - 1),
                );
            }
        }
    }
    CheckResult::new(
        "rescaled_sigmoid",
        true,
        "100000 draws kept sum T > N - 1 for N in {2, 3, 5, 19}".into(),
    )
}

/// Finite-difference comparison (h = 1e-5) for every unary op and the full
/// 2-modality ELBO with frozen noise; max relative error < 1e-4.
pub fn check_gradients() -> CheckResult {
    let mut s = RngStream::new(1004, 0);
    let mut worst = 0.0f64;
    let kinds = [
        UnaryKind::Neg,
        UnaryKind::Exp,
        UnaryKind::Sigmoid,
        UnaryKind::Tanh,
        UnaryKind::Square,
        UnaryKind::Softplus,
    ];
    for kind in kinds {
        let x = Tensor::vector((0..6).map(|_| s.standard_normal()).collect());
        let f = move |tape: &mut GradTape, leaf: NodeId| {
            let y = tape.unary(kind, leaf)?;
            let sq = tape.unary(UnaryKind::Square, y)?;
            tape.reduce(crate::numerics::ReduceKind::Sum, sq, None)
        };
        match grad_check(f, &x, 1e-5) {
            Ok(err) => worst = worst.max(err),
            Err(e) => return CheckResult::new("grad_checks", false, e.to_string()),
        }
    }

    // Full 2-modality ELBO against finite differences on an encoder weight.
    let specs = vec![
        ModalitySpec::new("image", crate::model::Likelihood::Bernoulli, 6, vec![8]),
        ModalitySpec::new("label", crate::model::Likelihood::Categorical, 3, vec![8]),
    ];
    let model = MvaeModel::new(4, specs, Variant::Mvae, 1004);
    let image = Tensor::new(
        vec![2, 6],
        (0..12).map(|_| if s.bernoulli(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let mut label_data = vec![0.0; 6];
    label_data[s.below(3)] = 1.0;
    label_data[3 + s.below(3)] = 1.0;
    let label = Tensor::new(vec![2, 3], label_data).unwrap();
    let noise = Tensor::new(vec![2, 4], s.normal_vec(8)).unwrap();
    let w0 = model.encoders[0].layers[0].w.clone();
    let elbo_err = grad_check(
        move |tape, leaf| {
            let mut m = model.clone();
            m.encoders[0].layers[0].w = tape.value(leaf).clone();
            let mut binding = m.bind(tape);
            binding.encoders[0][0].w = leaf;
            let x0 = tape.constant(image.clone());
            let x1 = tape.constant(label.clone());
            let eps = tape.constant(noise.clone());
            m.elbo_subset_tape(tape, &binding, &[Some(x0), Some(x1)], &[0, 1], 0.9, &[1.0, 5.0], eps)
                .map_err(|e| match e {
                    crate::model::ModelError::Numerics(n) => n,
                    other => panic!("{other}"),
                })
        },
        &w0,
        1e-5,
    );
    match elbo_err {
        Ok(err) => worst = worst.max(err),
        Err(e) => return CheckResult::new("grad_checks", false, e.to_string()),
    }
    CheckResult::new(
        "grad_checks",
        worst < 1e-4,
        format!("max relative error {worst:.2e} (limit 1e-4)"),
    )
}

/// KL to the standard normal: closed form within 3 standard errors of a
/// 10^5-draw Monte Carlo estimate, over 20 random Gaussians.
pub fn check_kl_monte_carlo() -> CheckResult {
    let mut s = RngStream::new(1005, 0);
    let n = 100_000usize;
    let mut worst_sigmas = 0.0f64;
    for _ in 0..20 {
        let g = random_gaussian(&mut s);
        let closed = kl_to_standard_normal(&g);
        let prior = DiagGaussian::standard(1);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let z = gaussian::rsample(&g, &mut s).z;
            samples.push(
                gaussian::log_pdf(&g, &z).unwrap() - gaussian::log_pdf(&prior, &z).unwrap(),
            );
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        worst_sigmas = worst_sigmas.max((mean - closed).abs() / se);
    }
    CheckResult::new(
        "kl_monte_carlo",
        worst_sigmas < 3.0,
        format!("worst deviation {worst_sigmas:.2} standard errors (limit 3)"),
    )
}

/// Importance-sampling estimators against the linear-Gaussian closed forms
/// at 10^4 samples, plus zero-variance weights under the exact posterior.
pub fn check_estimators() -> CheckResult {
    let spec = LinearGaussianSpec::new(vec![1.4, 0.8], vec![1.0, 1.0]).unwrap();
    let model = spec.exact_mvae().unwrap();
    let ds = linear_gaussian_dataset(&spec, 40, 1006).unwrap();
    let batch = fully_paired(&ds);
    let truth = |f: &dyn Fn(usize) -> f64| -> f64 {
        (0..batch.len()).map(f).sum::<f64>() / batch.len() as f64
    };
    let x = |m: usize, e: usize| batch.data[m].row(e)[0];

    let run = || -> crate::evaluation::Result<(f64, f64, f64, f64)> {
        let marg = estimate_log_marginal(
            &model,
            &batch,
            0,
            &SubsetMask::single(2, 0),
            10_000,
            &RngStream::new(1007, 0),
        )?
        .estimate;
        let joint = estimate_log_joint(
            &model,
            &batch,
            &[0, 1],
            &SubsetMask::all(2),
            10_000,
            &RngStream::new(1007, 1),
        )?
        .estimate;
        let cond = estimate_log_conditional(&model, &batch, 0, 1, 10_000, 10_000, &RngStream::new(1007, 2))?
            .estimate;
        let var = iw_log_weight_variance(
            &model,
            &batch,
            &WeightKind::Joint(vec![0, 1]),
            &SubsetMask::all(2),
            1000,
            &RngStream::new(1007, 3),
        )?;
        Ok((marg, joint, cond, var))
    };
    let (marg, joint, cond, var) = match run() {
        Ok(v) => v,
        Err(e) => return CheckResult::new("estimators", false, e.to_string()),
    };
    let marg_err = (marg - truth(&|e| spec.log_marginal(0, x(0, e)))).abs();
    let joint_err = (joint - truth(&|e| spec.log_joint(&[0, 1], &[x(0, e), x(1, e)]))).abs();
    let cond_err = (cond - truth(&|e| spec.log_conditional(0, x(0, e), 1, x(1, e)))).abs();
    let passed = marg_err < 0.05 && joint_err < 0.05 && cond_err < 0.1 && var < 1e-10;
    CheckResult::new(
        "estimators",
        passed,
        format!(
            "errors: marginal {marg_err:.4} (<0.05), joint {joint_err:.4} (<0.05), \
             conditional {cond_err:.4} (<0.1); exact-posterior weight variance {var:.2e} (<1e-10)"
        ),
    )
}

/// Reference MNIST inference-network sizes: image encoder 730,240 and
/// total 1,063,680.
pub fn check_parameter_counts() -> CheckResult {
    let model = MvaeModel::reference_mnist(Variant::Mvae, 0);
    let image = model.encoders[0]
        .layers
        .iter()
        .map(|l| l.w.numel() + l.b.as_ref().map_or(0, |b| b.numel()))
        .sum::<usize>();
    let total = model.count_inference_parameters();
    CheckResult::new(
        "parameter_counts",
        image == 730_240 && total == 1_063_680,
        format!("image encoder {image} (want 730240), total {total} (want 1063680)"),
    )
}

/// Used by tests and nothing else: a deliberately wrong fusion (adds
/// variances instead of precisions) that the grid oracle must reject.
pub fn corrupted_poe(
    experts: &[DiagGaussian],
    include_prior: bool,
    dim: usize,
) -> gaussian::Result<DiagGaussian> {
    let correct = gaussian::product_of_experts(experts, include_prior, dim)?;
    let mean = correct.mean().to_vec();
    let log_var: Vec<f64> = experts
        .iter()
        .fold(vec![if include_prior { 1.0 } else { 0.0 }; dim], |mut acc, e| {
            for (a, v) in acc.iter_mut().zip(e.variances()) {
                *a += v;
            }
            acc
        })
        .into_iter()
        .map(|v| v.ln())
        .collect();
    DiagGaussian::new(mean, log_var)
}

/// Convenience for the CLI and the batch in tests.
pub fn toy_eval_batch(n: usize, seed: u64) -> MultimodalBatch {
    let ds = crate::data::synth_bimodal(n, 0.05, seed).unwrap();
    fully_paired(&ds)
}
