//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state for parameters of the given shapes, with the usual
    /// defaults beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            second_moment: zeros.clone(),
            first_moment: zeros,
            step_count: 0,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            epsilon: T::from_f64_lossy(1e-8),
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self::new(params.iter().map(Tensor::shape))
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension {
            op: "adam_step",
            reason: format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.first_moment.len()
            ),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first_moment) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if p.shape() != m.shape() {
            return Err(Error::shape("adam_step state", p.shape(), m.shape()));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let one = T::one();
    let correction1 = one - b1.powi(t);
    let correction2 = one - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut state = AdamState::for_params(std::slice::from_ref(&p));
        adam_step(&mut [&mut p], &[&g], &mut state, 0.005).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
        for g0 in [3.0, -0.01, 250.0] {
            let mut p = Tensor::<f64>::scalar(1.0);
            let g = Tensor::<f64>::scalar(g0);
            let mut state = AdamState::for_params(std::slice::from_ref(&p));
            adam_step(&mut [&mut p], &[&g], &mut state, 0.005).unwrap();
            let expected = 1.0 - 0.005 * g0.signum() * g0.abs() / (g0.abs() + 1e-8);
            assert!((p.item().unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_scalar_trace() {
        let (lr, g0, b1, b2, eps) = (0.01f64, 0.7f64, 0.9f64, 0.999f64, 1e-8f64);
        let (mut m, mut v, mut x) = (0.0, 0.0, 2.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g0;
            v = b2 * v + (1.0 - b2) * g0 * g0;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = Tensor::<f64>::scalar(2.0);
        let g = Tensor::<f64>::scalar(g0);
        let mut state = AdamState::for_params(std::slice::from_ref(&p));
        adam_step(&mut [&mut p], &[&g], &mut state, lr).unwrap();
        adam_step(&mut [&mut p], &[&g], &mut state, lr).unwrap();
        assert!((p.item().unwrap() - x).abs() < 1e-15);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::<f32>::zeros(&[3]);
        let mut state = AdamState::for_params(std::slice::from_ref(&p));
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, 0.1).is_err());
        assert_eq!(state.step_count, 0);
    }
}
