//! Dense tensors, parameter groups, and reverse-mode differentiation for the
//! trainable subgraph.
//!
//! The operator set is fixed: 2-D cross-correlation, fully-connected,
//! ReLU, elementwise multiply, flatten, and softmax cross-entropy. Forward
//! passes record onto a [`tape::Tape`]; [`tape::Tape::backward`] walks the
//! recording in reverse and writes gradients into the bound parameters.
//! Everything computes in f32, row-major.

mod optim;
mod tape;

pub use optim::{sgd_step, Adam, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use tape::{NodeId, Tape};

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Dense n-dimensional f32 array with an optional gradient buffer.
///
/// `data` is row-major and `data.len()` always equals the product of
/// `shape` (an empty shape is a scalar). The gradient, when present, has
/// the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} implies {} elements, data has {}", shape, expected, data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Vec::new(), data: vec![value], grad: None }
    }

    /// 1-D tensor from raw values.
    pub fn from_vec(data: Vec<f32>) -> Self {
        Self { shape: vec![data.len()], data, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// The value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Add `delta` into the gradient buffer, allocating it at zero first if
    /// absent.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Stack same-shape tensors along a new leading batch axis.
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or_else(|| Error::Validation("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(samples.len() * first.numel());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", s.shape(), first.shape()),
                });
            }
            data.extend_from_slice(s.data());
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(samples.len());
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }
}

/// Shared handle to a trainable (or frozen) tensor. Parameters are owned by
/// the model and referenced from parameter groups and optimizers.
pub type SharedTensor = Rc<RefCell<Tensor>>;

pub fn shared(t: Tensor) -> SharedTensor {
    Rc::new(RefCell::new(t))
}

/// How a parameter group participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Updated in the inner loop for rapid adaptation.
    FastWeights,
    /// Updated in the outer loop.
    SlowWeights,
    /// Never receives gradient writes.
    Frozen,
}

/// Ordered collection of parameters sharing one training role.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    name: String,
    role: Role,
    params: Vec<SharedTensor>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, role: Role) -> Self {
        Self { name: name.into(), role, params: Vec::new() }
    }

    pub fn push(&mut self, param: SharedTensor) {
        self.params.push(param);
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn params(&self) -> &[SharedTensor] {
        &self.params
    }

    /// Total number of scalar parameters in the group.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.borrow().numel()).sum()
    }

    pub fn clear_grads(&self) {
        for p in &self.params {
            p.borrow_mut().clear_grad();
        }
    }

    /// Snapshot the raw data of every parameter, in group order.
    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| p.borrow().data().to_vec()).collect()
    }

    /// Restore a snapshot taken with [`ParamGroup::snapshot`].
    pub fn restore(&self, snapshot: &[Vec<f32>]) {
        debug_assert_eq!(snapshot.len(), self.params.len());
        for (p, saved) in self.params.iter().zip(snapshot) {
            p.borrow_mut().data_mut().copy_from_slice(saved);
        }
    }
}

/// Kaiming-uniform init: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: shape.to_vec(), data, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn tensor_shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        // rank-0 scalar: empty product is 1
        assert!(Tensor::new(vec![], vec![1.0]).is_ok());
    }

    #[test]
    fn accumulate_grad_allocates_and_adds() {
        let mut t = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[0.5, 0.5]);
        t.accumulate_grad(&[1.0, -0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 0.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn group_snapshot_restore_roundtrip() {
        let p = shared(Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = ParamGroup::new("clf", Role::FastWeights);
        g.push(Rc::clone(&p));
        let snap = g.snapshot();
        p.borrow_mut().data_mut()[0] = 9.0;
        g.restore(&snap);
        assert_eq!(p.borrow().data(), &[1.0, 2.0]);
    }

    #[test]
    fn kaiming_bound_holds() {
        let mut rng = stream(1, "init");
        let t = kaiming_uniform(&[64, 32], 32, &mut rng);
        let bound = (6.0f32 / 32.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        assert_eq!(t.numel(), 64 * 32);
    }
}
