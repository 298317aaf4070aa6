//! Floating-point scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Float type usable as tensor element: implemented for [f32] and [f64] only.
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
    /// Short dtype tag used in checkpoint indices.
    const DTYPE: &'static str;

    /// `c = alpha * a * b + beta * c` with arbitrary strides (row stride, column stride).
    ///
    /// # Safety
    /// The strides and dimensions must address memory inside the given slices.
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

    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn c(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Row-major matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatLayout {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: false }
    }

    /// The transpose of a stored `rows x cols` row-major matrix.
    pub fn t(rows: usize, cols: usize) -> Self {
        Self { rows, cols, transposed: true }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (m x n, row-major) = a * b + beta * c` where `a`, `b` may be stored transposed.
pub fn gemm<T: Scalar>(a: &[T], la: MatLayout, b: &[T], lb: MatLayout, beta: T, c: &mut [T]) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert!(a.len() >= la.rows * la.cols && b.len() >= lb.rows * lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: dimensions and strides checked against slice lengths above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(&a, MatLayout::new(2, 3), &b, MatLayout::new(3, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) * c (2x4)
        let mut d = vec![1.0; 12];
        gemm(&a, MatLayout::t(2, 3), &c, MatLayout::new(2, 4), 1.0, &mut d);
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..2).map(|p| a[p * 3 + i] * c[p * 4 + j]).sum::<f64>();
                assert_eq!(d[i * 4 + j], want);
            }
        }
    }
}
