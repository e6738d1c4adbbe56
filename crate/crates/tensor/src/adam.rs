//! Adam with bias-corrected moment estimates.

use crate::{Element, Result, Tensor, TensorError};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter moment accumulators plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    /// Zeroed moments shaped like `params`, with the usual defaults.
    pub fn for_params(params: &[&Tensor<T>]) -> Result<Self> {
        let zeros = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// Restores a saved state (for resuming from a checkpoint).
    pub fn from_parts(step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: "first and second moments disagree in count or shape".into(),
            });
        }
        Ok(Self {
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    ///
    /// A zero `lr` advances the moments but leaves parameters untouched.
    /// With `checked`, a non-finite gradient is an error and nothing is
    /// modified.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
        checked: bool,
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("learning rate must be finite and non-negative, got {lr}"),
            });
        }
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!(
                    "state tracks {} parameters, got {} parameters and {} gradients",
                    self.first.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if checked && !g.all_finite() {
                return Err(TensorError::NonFinite { op: "adam" });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let corr1 = T::of(1.0 - self.beta1.powi(t));
        let corr2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (m, v) = (m.data_mut(), v.data_mut());
            let update = lr != T::zero();
            let pd = if update { Some(p.data_mut()) } else { None };
            let gd = g.data();
            for i in 0..gd.len() {
                m[i] = b1 * m[i] + one_b1 * gd[i];
                v[i] = b2 * v[i] + one_b2 * gd[i] * gd[i];
            }
            if let Some(pd) = pd {
                for i in 0..gd.len() {
                    let m_hat = m[i] / corr1;
                    let v_hat = v[i] / corr2;
                    pd[i] = pd[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::zeros(vec![3]).unwrap();
        let mut state = AdamState::for_params(&[&p]).unwrap();
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &mut state, 0.1).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // At t = 1, m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (g0, lr) = (0.37f64, 0.01);
        let mut p = Tensor::<f64>::new(vec![1], vec![2.0]).unwrap();
        let g = Tensor::<f64>::new(vec![1], vec![g0]).unwrap();
        let mut state = AdamState::for_params(&[&p]).unwrap();
        adam_step(&mut [&mut p], &[&g], &mut state, lr).unwrap();
        let expected = 2.0 - lr * g0 / (g0 + DEFAULT_EPS);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((2.0 - p.item() - lr).abs() < 1e-9);
    }

    #[test]
    fn equal_magnitude_gradients_give_equal_updates() {
        let mut a = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let mut b = Tensor::<f32>::new(vec![1], vec![0.0]).unwrap();
        let ga = Tensor::<f32>::new(vec![1], vec![0.5]).unwrap();
        let gb = Tensor::<f32>::new(vec![1], vec![-0.5]).unwrap();
        let mut state = AdamState::for_params(&[&a, &b]).unwrap();
        for _ in 0..3 {
            adam_step(&mut [&mut a, &mut b], &[&ga, &gb], &mut state, 0.001).unwrap();
        }
        assert_eq!(a.item().abs(), b.item().abs());
        assert!(a.item() < 0.0 && b.item() > 0.0);
    }

    #[test]
    fn checked_mode_rejects_nan_gradient() {
        let mut p = Tensor::<f32>::zeros(vec![2]).unwrap();
        let g = Tensor::<f32>::new(vec![2], vec![f32::NAN, 0.0]).unwrap();
        let mut state = AdamState::for_params(&[&p]).unwrap();
        let err = state.step(&mut [&mut p], &[&g], 0.1, true).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "adam" });
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(vec![2]).unwrap();
        let g = Tensor::<f32>::zeros(vec![3]).unwrap();
        let mut state = AdamState::for_params(&[&p]).unwrap();
        assert!(adam_step(&mut [&mut p], &[&g], &mut state, 0.1).is_err());
    }
}
