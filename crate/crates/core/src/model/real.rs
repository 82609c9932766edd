use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of model tensors. `f32` is used for training
/// and inference; `f64` backs gradient checks.
pub trait Real:
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
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` on strided row/column layouts.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds accesses of the slices.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

fn beta<T: Real>(accumulate: bool) -> T {
    if accumulate {
        T::one()
    } else {
        T::zero()
    }
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major.
pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above for dense row-major layouts.
    unsafe {
        T::gemm_raw(
            m, k, n, T::one(),
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta(accumulate),
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `c[k×n] (+)= aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub fn matmul_at_b<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    // SAFETY: aᵀ is a k×m view of a[m×k] with strides (1, k).
    unsafe {
        T::gemm_raw(
            k, m, n, T::one(),
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta(accumulate),
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `c[m×k] (+)= a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub fn matmul_a_bt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize, accumulate: bool) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: bᵀ is an n×k view of b[k×n] with strides (1, n).
    unsafe {
        T::gemm_raw(
            m, n, k, T::one(),
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            beta(accumulate),
            c.as_mut_ptr(), k as isize, 1,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn strided_products_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ·b where the stored matrix is aᵀ (k×m)
        let at = transpose(&a, m, k);
        let mut c2 = vec![1.0; m * n];
        matmul_at_b(&at, &b, &mut c2, k, m, n, true);
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut c3 = vec![0.0; m * n];
        matmul_a_bt(&a, &bt, &mut c3, m, k, n, false);
        for (x, y) in c3.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
