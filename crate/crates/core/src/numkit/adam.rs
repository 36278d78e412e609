//! Adam with bias correction, one state per parameter tensor.

use super::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper { lr, ..Default::default() }
    }
}

/// First/second moment estimates plus the per-tensor step counter. The
/// counter advances on every `adam_step`, so a resumed run must restore it
/// alongside the moments to keep bias correction aligned.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f32>,
    second_moment: Vec<f32>,
    step_count: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; numel],
            second_moment: vec![0.0; numel],
            step_count: 0,
        }
    }

    /// Rebuild from checkpointed moments.
    pub fn from_parts(first_moment: Vec<f32>, second_moment: Vec<f32>, step_count: u64) -> Self {
        assert_eq!(first_moment.len(), second_moment.len(), "moment length mismatch");
        AdamState { first_moment, second_moment, step_count }
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.second_moment
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One Adam update in place, consuming the tensor's accumulated gradient.
/// Errors if no gradient is present or any gradient entry is non-finite.
pub fn adam_step(
    param: &mut Tensor,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TensorError> {
    let grad = param.grad().ok_or(TensorError::MissingGrad)?.to_vec();
    assert_eq!(grad.len(), state.first_moment.len(), "adam state length mismatch");
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(TensorError::NonFiniteGrad { index });
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);

    for ((w, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * g;
        *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *w -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    param.zero_grad();
    Ok(())
}
