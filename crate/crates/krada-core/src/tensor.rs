//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is plain owned data — no reference counting, `Send + Sync` —
//! so values can be moved freely between threads. Tensors that represent
//! trainable parameters carry a same-shape gradient buffer; gradients are
//! *accumulated* into it by [`crate::tape::Tape::backward`] exports and only
//! cleared by [`zero_grads`], so two exports without a clear in between sum.
//!
//! Batched image data uses NCHW layout throughout the crate:
//! `index = ((n·C + c)·H + i)·W + j`.

use crate::{shape_err, Error, Result};
use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Scalar convenience (shape `[1]`).
    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turns gradient tracking on (allocating the buffer) or off (dropping it).
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if on {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    /// Builder form of [`set_requires_grad`](Self::set_requires_grad).
    pub fn tracked(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer. Errors if the tensor does not
    /// track gradients or the length differs.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let g = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::Invalid("accumulate_grad on an untracked tensor".into()))?;
        if g.len() != delta.len() {
            return Err(shape_err!(
                "gradient length {} vs tensor length {}",
                delta.len(),
                g.len()
            ));
        }
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// NCHW flat index.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 4);
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * ch + c) * h + i) * w + j]
    }
}

/// The four parameter groups updated by the alternating training scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Shared feature extractor F.
    Feature,
    /// Open-world classifier head C (K+1 channels).
    Classifier,
    /// Auxiliary known-class head C* (K channels).
    KnownClassifier,
    /// Per-location domain discriminator D.
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Feature,
        ParamGroup::Classifier,
        ParamGroup::KnownClassifier,
        ParamGroup::Discriminator,
    ];
}

/// One plain-SGD update: `θ ← θ − sign·lr·∂L/∂θ` for every tracked tensor.
/// `sign = 1.0` descends, `sign = -1.0` ascends (used to push features away
/// from a loss instead of toward it). Gradients are left in place; call
/// [`zero_grads`] once all groups sharing them are updated.
pub fn sgd_step<'a, I>(params: I, lr: f64, sign: f64) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    for p in params {
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::Invalid("sgd_step on an untracked tensor".into()))?;
        debug_assert_eq!(g.len(), p.data.len());
        let step: Vec<f64> = g.iter().map(|gi| sign * lr * gi).collect();
        for (w, s) in p.data.iter_mut().zip(step) {
            *w -= s;
        }
    }
    Ok(())
}

pub fn zero_grads<'a, I>(params: I)
where
    I: IntoIterator<Item = &'a mut Tensor>,
{
    for p in params {
        p.zero_grad();
    }
}
