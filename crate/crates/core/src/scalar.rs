//! Floating-point abstraction shared by every numeric module.
//!
//! All math in the crate is written against [`Real`], so the same code runs in
//! `f32` for training throughput and in `f64` for gradient checks and oracles.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// f32 or f64.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + FftNum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (constants, config values).
    fn of(x: f64) -> Self;

    /// Widening conversion to f64.
    fn f64(self) -> f64;

    /// `C <- alpha * A B + beta * C` on strided row/column storage.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline(always)]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(m, k, a.len(), a_strides);
                check_extent(k, n, b.len(), b_strides);
                check_extent(m, n, c.len(), c_strides);
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn check_extent(rows: usize, cols: usize, len: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

/// Row-major `m x k` times row-major `k x n`, accumulated into `c` scaled by `beta`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c (m x n) += a (m x k) * b^T` where `b` is row-major `n x k`.
pub fn matmul_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (k as isize, 1),
        b,
        (1, k as isize),
        beta,
        c,
        (n as isize, 1),
    );
}

/// `c (m x n) += a^T * b` where `a` is row-major `k x m` and `b` is row-major `k x n`.
pub fn matmul_at<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        (1, m as isize),
        b,
        (n as isize, 1),
        beta,
        c,
        (n as isize, 1),
    );
}
