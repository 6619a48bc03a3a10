//! Reverse-mode differentiable dense arrays.
//!
//! A [`Tape`] records every operation of one forward pass (define-by-run).
//! Values live on the tape and are addressed by copyable [`Var`] handles;
//! [`Tape::backward`] walks the recorded nodes in reverse and leaves a
//! gradient on every node that depends on a leaf.
//!
//! All arithmetic is `f64`. Inputs to `log` and to the denominator of `div`
//! are clamped at [`CLAMP_MIN`].

mod array;
pub mod gradcheck;
mod ops;
mod tape;

pub use array::DiffArray;
pub use ops::{softplus, ConvGeom};
pub use tape::{sigmoid, Tape, Var};

pub(crate) use array::axis_split;

use thiserror::Error;

/// Lower clamp applied to `log` inputs and `div` denominators.
pub const CLAMP_MIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("backward requires a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// `C = A·B + beta·C` on row-major buffers with arbitrary operand strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(m * k <= a.len() && k * n <= b.len() && m * n <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index reachable from the given
    // extents and strides, which describe dense m×k, k×n and m×n layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
