//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{FireError, Result};
use crate::scalar::{s, Scalar};

/// Optimizer state for one parameter group: first/second moment buffers,
/// a step counter and the hyperparameters.
pub struct AdamState<S: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the step counter; call once per optimizer step, before the
    /// per-parameter [`AdamState::update`] calls.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter of the group (positional index `idx`).
    /// `grad == None` is an all-zero gradient. The parameter is replaced
    /// with a fresh leaf, so gradients never leak across steps.
    pub fn update(&mut self, idx: usize, param: &mut Tensor<S>, grad: Option<&[S]>) -> Result<()> {
        if idx == self.m.len() {
            self.m.push(vec![S::zero(); param.numel()]);
            self.v.push(vec![S::zero(); param.numel()]);
        }
        let (m, v) = match (self.m.get_mut(idx), self.v.get_mut(idx)) {
            (Some(m), Some(v)) => (m, v),
            _ => {
                return Err(FireError::InvalidArgument(format!(
                    "adam_step: parameter index {idx} out of order"
                )))
            }
        };
        if m.len() != param.numel() {
            return Err(FireError::InvalidShape {
                op: "adam_step",
                shape: param.shape().to_vec(),
                reason: format!("moment buffer holds {} elements", m.len()),
            });
        }
        if let Some(g) = grad {
            if g.len() != param.numel() {
                return Err(FireError::InvalidShape {
                    op: "adam_step",
                    shape: param.shape().to_vec(),
                    reason: format!("gradient has {} elements", g.len()),
                });
            }
        }
        let b1 = s::<S>(self.beta1);
        let b2 = s::<S>(self.beta2);
        let one = S::one();
        let corr1 = s::<S>(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = s::<S>(1.0 - self.beta2.powi(self.step as i32));
        let lr = s::<S>(self.lr);
        let eps = s::<S>(self.eps);
        let mut new = param.data().to_vec();
        for j in 0..new.len() {
            let gj = grad.map_or(S::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            new[j] = new[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *param = Tensor::param(&param.shape().to_vec(), new)?;
        Ok(())
    }

    /// One Adam update over a whole parameter group.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[Option<Vec<S>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(FireError::InvalidArgument(format!(
                "adam_step: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.begin_step();
        for (i, param) in params.iter_mut().enumerate() {
            self.update(i, param, grads[i].as_deref())?;
        }
        Ok(())
    }
}
