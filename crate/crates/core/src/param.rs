use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor with its gradient buffer.
///
/// Gradients accumulate across backward passes until [`Param::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(grad)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

impl<T: Scalar> From<Tensor<T>> for Param<T> {
    fn from(value: Tensor<T>) -> Self {
        Param::new(value)
    }
}
