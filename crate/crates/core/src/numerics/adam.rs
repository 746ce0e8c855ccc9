//! Adam with bias correction.

use super::tensor::Tensor;
use super::{NumericsError, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            step: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(NumericsError::DimensionMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    for (i, g) in grad.data().iter().enumerate() {
        if !g.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "adam_step",
                index: i,
            });
        }
    }
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = param.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let orig = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2]);
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_magnitude() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[]);
        adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        let delta = p.scalar_value().abs();
        assert!((0.0999..=0.1).contains(&delta), "delta {delta}");
        assert!(p.scalar_value() < 0.0);
    }

    #[test]
    fn two_steps_match_hand_rolled_trace() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.3, -0.7];
        let mut p = Tensor::scalar(0.5);
        let mut st = AdamState::new(&[]);
        for g in grads {
            adam_step(&mut p, &Tensor::scalar(g), &mut st, lr, b1, b2, eps).unwrap();
        }
        // Independent trace of the update formula.
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.scalar_value() - x).abs() < 1e-12);
    }

    #[test]
    fn non_finite_grad_rejected() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new(&[]);
        let g = Tensor::scalar(f64::NAN);
        assert!(adam_step(&mut p, &g, &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
    }
}
