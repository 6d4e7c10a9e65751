use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// A weight matrix with its gradient buffer.
///
/// Frozen parameters never accumulate gradient: [`Parameter::accumulate`] is a
/// no-op for them, so their gradient stays identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Matrix,
    #[serde(skip, default = "empty_grad")]
    grad: Matrix,
    trainable: bool,
}

fn empty_grad() -> Matrix {
    Matrix::zeros(0, 0)
}

impl Parameter {
    pub fn trainable(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            value,
            grad,
            trainable: false,
        }
    }

    #[inline]
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
        self.ensure_grad();
        self.grad.fill(0.0);
    }

    pub fn unfreeze(&mut self) {
        self.trainable = true;
        self.ensure_grad();
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Matrix {
        self.ensure_grad();
        &mut self.grad
    }

    fn ensure_grad(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        }
    }

    pub fn zero_grad(&mut self) {
        self.ensure_grad();
        self.grad.fill(0.0);
    }

    /// `grad += g` for trainable parameters.
    pub fn accumulate(&mut self, g: &Matrix) {
        if self.trainable {
            self.ensure_grad();
            self.grad.add_assign(g);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters in a fixed declaration order.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    fn count_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.len());
        n
    }

    fn count_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| {
            if p.is_trainable() {
                n += p.len();
            }
        });
        n
    }

    fn freeze_all(&mut self) {
        self.visit_mut(&mut |_, p| p.freeze());
    }
}

/// Plain SGD: `value -= lr * grad` on trainable parameters; frozen ones are untouched.
pub fn sgd_step<P: Parameterized + ?Sized>(params: &mut P, lr: f64) {
    params.visit_mut(&mut |_, p| {
        if p.is_trainable() {
            p.ensure_grad();
            let Parameter { value, grad, .. } = p;
            value.add_scaled(grad, -lr);
        }
    });
}

impl Parameterized for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("param", self);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("param", self);
    }
}

impl Parameterized for Vec<Parameter> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        for p in self {
            f("param", p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for p in self {
            f("param", p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, trainable: bool) -> Parameter {
        let m = Matrix::from_vec(1, 1, vec![v]).unwrap();
        if trainable {
            Parameter::trainable(m)
        } else {
            Parameter::frozen(m)
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = scalar(1.0, true);
        p.accumulate(&Matrix::from_vec(1, 1, vec![2.0]).unwrap());
        sgd_step(&mut p, 0.01);
        assert!((p.value.get(0, 0) - 0.98).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut p = scalar(1.0, false);
        p.accumulate(&Matrix::from_vec(1, 1, vec![5.0]).unwrap());
        assert_eq!(p.grad().get(0, 0), 0.0);
        sgd_step(&mut p, 0.5);
        assert_eq!(p.value.get(0, 0).to_bits(), 1.0f64.to_bits());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = vec![scalar(0.3, true), scalar(-2.0, true)];
        ps.zero_grad();
        sgd_step(&mut ps, 0.01);
        sgd_step(&mut ps, 0.01);
        assert_eq!(ps[0].value.get(0, 0), 0.3);
        assert_eq!(ps[1].value.get(0, 0), -2.0);
    }
}
