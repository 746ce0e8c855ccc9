//! Finite-difference validation of tape gradients.

use super::tape::{GradTape, NodeId};
use super::tensor::Tensor;
use super::{NumericsError, Result};

/// Max relative error between tape gradients and central finite differences.
///
/// `f` rebuilds the computation on a fresh tape from a single leaf; it must
/// be deterministic (checked by a double evaluation). The relative error
/// denominator is floored at 1e-8 so near-zero gradients do not blow up.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, NodeId) -> Result<NodeId>,
{
    assert!(h > 0.0);
    let eval = |xt: &Tensor| -> Result<f64> {
        let mut tape = GradTape::new();
        let leaf = tape.leaf(xt.clone());
        let loss = f(&mut tape, leaf)?;
        Ok(tape.value(loss).scalar_value())
    };

    let v1 = eval(x)?;
    let v2 = eval(x)?;
    if v1.to_bits() != v2.to_bits() {
        return Err(NumericsError::NonDeterministic(v1, v2));
    }

    let mut tape = GradTape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (eval(&xp)? - eval(&xm)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}
