//! Dense row-major kernels shared by the encoders.
//!
//! Everything works on flat slices. Matrix products go through
//! `matrixmultiply`; row reductions (layer-norm moments, softmax
//! normalisers, dot products) accumulate in `f64` regardless of the
//! storage type.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Floating point storage type for parameters and activations.
///
/// Production runs use `f32`; gradient checks run the identical code in `f64`.
pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + Display
    + Sum
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every strided access must
    /// land inside the allocations behind `a`, `b` and `c`.
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
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A strided read-only view into a flat buffer.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F: Real> View<'a, F> {
    /// Contiguous row-major `rows × cols` matrix.
    pub fn rm(data: &'a [F], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Column block `[col0, col0 + cols)` of a row-major matrix with `stride` columns.
    pub fn cols(data: &'a [F], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        View { data: &data[col0..], rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// A strided writable view.
pub struct ViewMut<'a, F> {
    pub data: &'a mut [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F: Real> ViewMut<'a, F> {
    pub fn rm(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        ViewMut { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols(data: &'a mut [F], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        ViewMut { data: &mut data[col0..], rows, cols, rs: stride, cs: 1 }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<F: Real>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "row mismatch");
    assert_eq!(b.cols, c.cols, "column mismatch");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major `x[rows × k] · w[k × n] + bias` into a fresh buffer.
pub fn linear<F: Real>(x: &[F], rows: usize, k: usize, w: &[F], bias: Option<&[F]>, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; rows * n];
    if let Some(b) = bias {
        for r in out.chunks_exact_mut(n) {
            r.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { F::ONE } else { F::ZERO };
    gemm(F::ONE, View::rm(x, rows, k), View::rm(w, k, n), beta, ViewMut::rm(&mut out, rows, n));
    out
}

/// Backward of [`linear`]: accumulates `dw += xᵀ dy`, `db += Σ dy` when
/// requested and returns `dx = dy wᵀ` when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Real>(
    x: &[F],
    rows: usize,
    k: usize,
    w: &[F],
    n: usize,
    dy: &[F],
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
    want_dx: bool,
) -> Option<Vec<F>> {
    if let Some(dw) = dw {
        gemm(F::ONE, View::rm(x, rows, k).t(), View::rm(dy, rows, n), F::ONE, ViewMut::rm(dw, k, n));
    }
    if let Some(db) = db {
        for r in dy.chunks_exact(n) {
            for (g, v) in db.iter_mut().zip(r) {
                *g += *v;
            }
        }
    }
    if want_dx {
        let mut dx = vec![F::ZERO; rows * k];
        gemm(F::ONE, View::rm(dy, rows, n), View::rm(w, k, n).t(), F::ZERO, ViewMut::rm(&mut dx, rows, k));
        Some(dx)
    } else {
        None
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Real>(x: &[F], rows: usize, d: usize, gamma: &[F], beta: &[F]) -> (Vec<F>, LnCache<F>) {
    let mut y = vec![F::ZERO; rows * d];
    let mut xhat = vec![F::ZERO; rows * d];
    let mut rstd = vec![F::ZERO; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = F::from_f64(rs);
        for c in 0..d {
            let h = F::from_f64((row[c].to_f64() - mean) * rs);
            xhat[r * d + c] = h;
            y[r * d + c] = h * gamma[c] + beta[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Real>(
    cache: &LnCache<F>,
    d: usize,
    gamma: &[F],
    dy: &[F],
    mut dgamma: Option<&mut [F]>,
    mut dbeta: Option<&mut [F]>,
) -> Vec<F> {
    let rows = cache.rstd.len();
    let mut dx = vec![F::ZERO; rows * d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        if let Some(dg) = dgamma.as_deref_mut() {
            for c in 0..d {
                dg[c] += g[c] * xh[c];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for c in 0..d {
                db[c] += g[c];
            }
        }
        let mut sum_dxh = 0.0f64;
        let mut sum_dxh_xh = 0.0f64;
        for c in 0..d {
            let dxh = (g[c] * gamma[c]).to_f64();
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c].to_f64();
        }
        let mean_dxh = sum_dxh / d as f64;
        let mean_dxh_xh = sum_dxh_xh / d as f64;
        let rs = cache.rstd[r].to_f64();
        for c in 0..d {
            let dxh = (g[c] * gamma[c]).to_f64();
            dx[r * d + c] = F::from_f64(rs * (dxh - mean_dxh - xh[c].to_f64() * mean_dxh_xh));
        }
    }
    dx
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row<F: Real>(row: &mut [F]) {
    let mut max = f64::NEG_INFINITY;
    for v in row.iter() {
        max = max.max(v.to_f64());
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = (v.to_f64() - max).exp();
        sum += e;
        *v = F::from_f64(e);
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v = F::from_f64(v.to_f64() * inv);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let x = x.to_f64();
    F::from_f64(0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let x = x.to_f64();
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    F::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x))
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum()
}

pub fn l2_norm<F: Real>(a: &[F]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite<F: Real>(a: &[F]) -> bool {
    a.iter().all(|v| v.is_finite())
}

pub fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposed_views() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, 3, 4, 5);
        let mut c = vec![0.0; 15];
        gemm(1.0, View::rm(&a, 3, 4), View::rm(&b, 4, 5), 0.0, ViewMut::rm(&mut c, 3, 5));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ aᵀ)ᵀ == a b
        let mut ct = vec![0.0; 15];
        gemm(1.0, View::rm(&b, 4, 5).t(), View::rm(&a, 3, 4).t(), 0.0, ViewMut::rm(&mut ct, 5, 3));
        for i in 0..3 {
            for j in 0..5 {
                assert!((ct[j * 3 + i] - want[i * 5 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 10.0];
        let (y, _) = layer_norm(&x, 2, 4, &[1.0; 4], &[0.0; 4]);
        for r in y.chunks(4) {
            let m: f64 = r.iter().sum::<f64>() / 4.0;
            let v: f64 = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut r = vec![1000.0f32, 1000.0, 999.0];
        softmax_row(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((r[0] - r[1]).abs() < 1e-7);
    }
}
