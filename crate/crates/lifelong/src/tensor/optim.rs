//! Parameter updates: plain SGD for the inner loop, Adam for the outer loop.

use super::{ParamGroup, Role, SharedTensor};
use crate::{Error, Result};

pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

/// One SGD step over a group: `p <- p - lr * grad`, then clear gradients.
///
/// Every parameter in the group must hold a gradient (i.e. backward ran
/// since the last step); frozen groups are rejected outright.
pub fn sgd_step(group: &ParamGroup, lr: f32) -> Result<()> {
    if group.role() == Role::Frozen {
        return Err(Error::Validation(format!("sgd_step on frozen group '{}'", group.name())));
    }
    for (idx, param) in group.params().iter().enumerate() {
        let mut p = param.borrow_mut();
        let grad = match p.grad() {
            Some(g) => g.to_vec(),
            None => {
                return Err(Error::State(format!(
                    "sgd_step: parameter {} of group '{}' has no gradient",
                    idx,
                    group.name()
                )))
            }
        };
        for (v, g) in p.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        p.clear_grad();
    }
    Ok(())
}

/// Adam with bias correction. Moment buffers are allocated per parameter at
/// construction and persist across steps; the caller supplies the 1-based
/// step count.
pub struct Adam {
    params: Vec<SharedTensor>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(params: Vec<SharedTensor>, beta1: f32, beta2: f32, eps: f32) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect();
        Self { params, m, v, beta1, beta2, eps }
    }

    pub fn for_groups(groups: &[&ParamGroup]) -> Self {
        let params: Vec<SharedTensor> = groups
            .iter()
            .flat_map(|g| g.params().iter().cloned())
            .collect();
        Self::new(params, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    /// Number of scalar parameters covered by this optimizer (two f32
    /// moments are held for each).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.borrow().numel()).sum()
    }

    /// Apply one update at step `t` (must be >= 1), then clear gradients.
    pub fn step_at(&mut self, lr: f32, t: u64) -> Result<()> {
        if t == 0 {
            return Err(Error::Validation("adam step count must be >= 1".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (idx, param) in self.params.iter().enumerate() {
            let mut p = param.borrow_mut();
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => {
                    return Err(Error::State(format!("adam: parameter {} has no gradient", idx)))
                }
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((pv, g), mi), vi) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.clear_grad();
        }
        Ok(())
    }
}
