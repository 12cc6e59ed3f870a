//! Minimal dense-array arithmetic with reverse-mode differentiation.
//!
//! Arrays are row-major and immutable once written. Operations are recorded
//! on a [`Tape`]; replaying the tape backward yields gradients of a scalar
//! loss with respect to any leaf. Everything is generic over [`Scalar`] so
//! the same model code runs in 32-bit for training and 64-bit for gradient
//! checking.

mod array;
pub(crate) mod kernels;
mod tape;
#[cfg(test)]
mod tests;

pub use array::{Array, BoolMat};
pub use tape::{NodeId, Tape};

use std::fmt::{Debug, Display};

/// Element type of all arrays: `f32` for training, `f64` for grad checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// General matrix multiply on row-major buffers:
    /// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
    /// transposes. `a` is m x k and `b` is k x n after transposition.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn of_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                // Row stride / column stride pairs for the row-major buffers;
                // a transposed operand is the same buffer viewed with swapped
                // strides.
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
