//! Reverse-mode automatic differentiation over dense arrays, and Adam.
//!
//! The op set is the one the convolutional nets need: elementwise
//! arithmetic, dense/matmul, dilated `conv1d`, `relu`, `tanh` and the
//! reductions `sum`, `mean`, `mse`. Values are recorded as they are
//! computed; see [`Graph`].

mod adam;
pub mod check;
mod graph;
mod kernels;
mod tensor;

use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use tensor::{lit, Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("conv1d kernel length {0} must be odd")]
    EvenKernel(usize),
    #[error("conv1d dilation must be at least 1")]
    ZeroDilation,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any gradient-tracking tensor")]
    Detached,
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let g = Graph::new();
        let x = g.constant(&t(&[1, 1, 5], &[1.0, -2.0, 3.0, 0.5, 4.0]));
        let w = g.constant(&t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        for d in 1..4 {
            let y = g.conv1d(x, w, None, d).unwrap();
            assert_eq!(g.value(y), g.value(x));
        }
    }

    #[test]
    fn mse_of_self_is_zero() {
        let g = Graph::new();
        let x = g.constant(&t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.item(g.mse(x, x).unwrap()), 0.0);
    }

    #[test]
    fn dense_identity() {
        let g = Graph::new();
        let x = g.constant(&t(&[2], &[1.0, 2.0]));
        let w = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(&[2], &[3.0, 3.0]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y), vec![4.0, 5.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::new();
        let x = g.param(&t(&[1], &[3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), Some(vec![6.0]));
        // A second pass accumulates.
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), Some(vec![12.0]));
        g.zero_grad();
        assert_eq!(g.grad(x), None);
    }

    #[test]
    fn zero_weight_branch_gets_zero_gradient() {
        let g = Graph::new();
        let a = g.param(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.param(&t(&[3], &[-1.0, 0.5, 2.0]));
        let branch = g.scale(g.tanh(b), 0.0);
        let loss = g.sum(g.add(g.mul(a, a).unwrap(), branch).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b), Some(vec![0.0; 3]));
        assert_eq!(g.grad(a), Some(vec![2.0, 4.0, 6.0]));
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(x), Err(GradError::NonScalarLoss(vec![2])));
        let c = g.constant(&t(&[1], &[1.0]));
        assert_eq!(g.backward(c), Err(GradError::Detached));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(&t(&[2], &[1.0, 2.0]));
        let b = g.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(err.to_string(), "add: incompatible shapes [2] and [3]");
        let x = g.constant(&t(&[1, 1, 4], &[0.0; 4]));
        let w = g.constant(&t(&[1, 1, 2], &[0.0; 2]));
        assert_eq!(g.conv1d(x, w, None, 1), Err(GradError::EvenKernel(2)));
    }

    #[test]
    fn leaves_do_not_alias_inputs() {
        let g = Graph::new();
        let mut src = t(&[2], &[1.0, 2.0]);
        let x = g.param(&src);
        let y = g.scale(x, 2.0);
        src.data_mut()[0] = 100.0;
        assert_eq!(g.value(x), vec![1.0, 2.0]);
        assert_eq!(g.value(y), vec![2.0, 4.0]);
    }
}
