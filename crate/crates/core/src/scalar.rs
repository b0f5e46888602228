//! Floating point abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable by the losses, the network and the optimizer.
///
/// Implemented for `f32` and `f64`. The dense matrix product is part of the
/// trait so the convolution layers can dispatch to a tuned kernel for each
/// concrete type.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Machine epsilon-ish default used for probability clamping.
    const PROB_EPS: f64;

    /// Converts an `f64` constant. Never fails for finite input.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `y += a * x` over the common length.
    fn axpy(a: Self, x: &[Self], y: &mut [Self]);

    /// Inner product over the common length, summed in a fixed order.
    fn dot(x: &[Self], y: &[Self]) -> Self;

    /// `C = alpha * A * B + beta * C` for row-major `A` (m x k), `B` (k x n),
    /// `C` (m x n). Either operand may be transposed through its strides.
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
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

/// Vector kernels compiled twice: for the baseline target and with AVX2
/// enabled, selected at runtime. Both builds perform the same operations in
/// the same order, so results do not depend on the selected path.
mod kernels {
    use num_traits::Float;

    const LANES: usize = 8;

    #[inline(always)]
    fn axpy_body<T: Float>(a: T, x: &[T], y: &mut [T]) {
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = *yi + a * xi;
        }
    }

    #[inline(always)]
    fn dot_body<T: Float>(x: &[T], y: &[T]) -> T {
        let n = x.len().min(y.len());
        let split = n / LANES * LANES;
        let mut acc = [T::zero(); LANES];
        for (a, b) in x[..split].chunks_exact(LANES).zip(y[..split].chunks_exact(LANES)) {
            for i in 0..LANES {
                acc[i] = acc[i] + a[i] * b[i];
            }
        }
        let mut total = T::zero();
        for v in acc {
            total = total + v;
        }
        for (&a, &b) in x[split..n].iter().zip(&y[split..n]) {
            total = total + a * b;
        }
        total
    }

    pub(super) fn axpy<T: Float>(a: T, x: &[T], y: &mut [T]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { axpy_avx2(a, x, y) };
        }
        axpy_body(a, x, y)
    }

    pub(super) fn dot<T: Float>(x: &[T], y: &[T]) -> T {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { dot_avx2(x, y) };
        }
        dot_body(x, y)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn axpy_avx2<T: Float>(a: T, x: &[T], y: &mut [T]) {
        axpy_body(a, x, y)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn dot_avx2<T: Float>(x: &[T], y: &[T]) -> T {
        dot_body(x, y)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $eps:expr, $kernel:path) => {
        impl Scalar for $t {
            const PROB_EPS: f64 = $eps;

            fn axpy(a: Self, x: &[Self], y: &mut [Self]) {
                kernels::axpy(a, x, y)
            }

            fn dot(x: &[Self], y: &[Self]) -> Self {
                kernels::dot(x, y)
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
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too small");
                // SAFETY: every operand extent was bounds-checked above and the
                // output is an exclusively borrowed, densely packed m x n block.
                unsafe {
                    $kernel(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 1e-7, matrixmultiply::sgemm);
impl_scalar!(f64, 1e-12, matrixmultiply::dgemm);
