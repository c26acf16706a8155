//! Floating-point abstraction shared by the encoder, losses and detector.
//!
//! Training and inference run in `f32`; gradient checks use the same code
//! paths instantiated at `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
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
    /// `c = alpha * a·b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the respective allocation.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Hyperbolic tangent used by the activation. May trade the last ulp or
    /// two for a form the compiler can vectorize.
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every float scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("float scalar converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    /// Rational 13/6 minimax approximation, accurate to a few ulp on the
    /// clamped range where `tanh` has not yet saturated in `f32`.
    #[inline]
    fn tanh_fast(self) -> f32 {
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_672e-11,
            2.000_188e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        let mut q = B[3];
        for &b in B[..3].iter().rev() {
            q = q * x2 + b;
        }
        x * p / q
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
