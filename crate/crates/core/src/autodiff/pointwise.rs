//! Elementwise operations and reductions.

use crate::autodiff::tape::{Backward, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Scale(f64),
    Neg,
    Square,
    AddScalar(f64),
    /// `x^p`; callers keep `x` positive for non-integer `p`.
    Powf(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl Unary {
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Unary::Scale(c) => x * T::lit(c),
            Unary::Neg => -x,
            Unary::Square => x * x,
            Unary::AddScalar(c) => x + T::lit(c),
            Unary::Powf(p) => x.powf(T::lit(p)),
        }
    }

    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Unary::Scale(c) => T::lit(c),
            Unary::Neg => -T::one(),
            Unary::Square => x + x,
            Unary::AddScalar(_) => T::one(),
            Unary::Powf(p) => {
                if x == T::zero() {
                    T::lit(p) * x.powf(T::lit(p - 1.0))
                } else {
                    T::lit(p) * y / x
                }
            }
        }
    }
}

struct UnaryOp(Unary);

impl<T: Scalar> Backward<T> for UnaryOp {
    fn backward(&self, p: &[&Tensor<T>], out: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = p[0].data();
        let y = out.data();
        let gd = g.data();
        let mut gx = Tensor::zeros(p[0].shape());
        for (i, o) in gx.data_mut().iter_mut().enumerate() {
            *o = gd[i] * self.0.derivative(x[i], y[i]);
        }
        vec![Some(gx)]
    }
}

struct BinaryOp(Binary);

impl<T: Scalar> Backward<T> for BinaryOp {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, tracked: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (a, b) = (p[0], p[1]);
        let ga = tracked[0].then(|| match self.0 {
            Binary::Add | Binary::Sub => g.clone(),
            Binary::Mul => zip_map(g, b, |g, b| g * b),
        });
        let gb = tracked[1].then(|| match self.0 {
            Binary::Add => g.clone(),
            Binary::Sub => g.map(|v| -v),
            Binary::Mul => zip_map(g, a, |g, a| g * a),
        });
        vec![ga, gb]
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked at construction")
}

struct ReduceOp(Reduction);

impl<T: Scalar> Backward<T> for ReduceOp {
    fn backward(&self, p: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let g = g.item();
        let v = match self.0 {
            Reduction::Sum => g,
            Reduction::Mean => g / T::lit(p[0].len() as f64),
        };
        vec![Some(Tensor::full(p[0].shape(), v))]
    }
}

impl<T: Scalar> Tape<T> {
    pub fn unary(&mut self, x: Var, op: Unary) -> Var {
        let value = self.value(x).map(|v| op.apply(v));
        self.push(value, &[x], Box::new(UnaryOp(op)))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{op:?}: {sa:?} vs {sb:?}")));
        }
        let value = match op {
            Binary::Add => zip_map(self.value(a), self.value(b), |x, y| x + y),
            Binary::Sub => zip_map(self.value(a), self.value(b), |x, y| x - y),
            Binary::Mul => zip_map(self.value(a), self.value(b), |x, y| x * y),
        };
        Ok(self.push(value, &[a, b], Box::new(BinaryOp(op))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    /// Reduces to a `(1,1,1,1,1)` node, accumulating in `f64`.
    pub fn reduce(&mut self, x: Var, op: Reduction) -> Var {
        let t = self.value(x);
        let s = t.sum_f64();
        let v = match op {
            Reduction::Sum => s,
            Reduction::Mean => s / t.len().max(1) as f64,
        };
        self.push(Tensor::scalar(T::lit(v)), &[x], Box::new(ReduceOp(op)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, Reduction::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, Reduction::Mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_negative_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.leaky_relu(x, 0.2);
        assert_eq!(tape.value(y).item(), -0.2);
    }

    #[test]
    fn add_with_negation_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_fn([1, 2, 2, 2, 2], |i| i as f64 * 0.7 - 3.0));
        let n = tape.neg(x);
        let z = tape.add(x, n).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gradient_at_three() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_ones_and_its_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::full([1, 1, 2, 3, 4], 1.0));
        let s = tape.sum(x);
        assert_eq!(tape.value(s).item(), 24.0);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mean_of_two() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new([1, 1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item(), 3.0);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn diamond_graph_accumulates() {
        // y = x^2 + 3x  =>  dy/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.5));
        let f = tape.square(x);
        let g = tape.scale(x, 3.0);
        let y = tape.add(f, g).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([1, 1, 1, 1, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros([1, 1, 1, 1, 2]));
        let b = tape.param(Tensor::zeros([1, 1, 1, 2, 1]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
    }
}
