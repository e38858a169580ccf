//! Dense GEMM used by the GRU and convolution hot paths.
//!
//! Products accumulate in the element type. Accumulation order is fixed by the
//! code, never by the instruction set: the wide-vector builds of the kernel are
//! the same source, and Rust never contracts `a * b + c` into FMA, so every
//! path gives bit-identical results.

use crate::tensor::Real;

const MR: usize = 4;

/// `c[MR x NR] += a[MR x k] * b[k x NR]` on a full tile.
#[inline(always)]
fn tile<T: Real, const NR: usize>(a: &[T], lda: usize, b: &[T], ldb: usize, c: &mut [T], ldc: usize, k: usize) {
    let mut acc = [[T::default(); NR]; MR];
    for p in 0..k {
        let bv: &[T; NR] = b[p * ldb..p * ldb + NR].try_into().expect("tile width");
        for (i, acc_i) in acc.iter_mut().enumerate() {
            let av = a[i * lda + p];
            for j in 0..NR {
                acc_i[j] = acc_i[j] + av * bv[j];
            }
        }
    }
    for (i, acc_i) in acc.iter().enumerate() {
        for (cv, &av) in c[i * ldc..i * ldc + NR].iter_mut().zip(acc_i) {
            *cv = *cv + av;
        }
    }
}

/// One row of `a` against a column strip of exactly `W` columns.
#[inline(always)]
fn row_tile<T: Real, const W: usize>(a: &[T], b: &[T], ldb: usize, c: &mut [T], k: usize) {
    let mut acc = [T::default(); W];
    for (p, &av) in a[..k].iter().enumerate() {
        let row: &[T; W] = b[p * ldb..p * ldb + W].try_into().expect("strip width");
        for j in 0..W {
            acc[j] = acc[j] + av * row[j];
        }
    }
    for (cv, &x) in c[..W].iter_mut().zip(&acc) {
        *cv = *cv + x;
    }
}

/// One row of `a` against a column strip of any width up to `W`.
#[inline(always)]
fn row_strip<T: Real, const W: usize>(a: &[T], b: &[T], ldb: usize, c: &mut [T], k: usize, width: usize) {
    let mut acc = [T::default(); W];
    for (p, &av) in a[..k].iter().enumerate() {
        let row = &b[p * ldb..p * ldb + width];
        for (x, &s) in acc.iter_mut().zip(row) {
            *x = *x + av * s;
        }
    }
    for (cv, &x) in c[..width].iter_mut().zip(&acc) {
        *cv = *cv + x;
    }
}

#[inline(always)]
fn gemm_tiled<T: Real, const NR: usize>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let (full_m, full_n) = (m - m % MR, n - n % NR);
    for i in (0..full_m).step_by(MR) {
        for j in (0..full_n).step_by(NR) {
            tile::<T, NR>(&a[i * k..], k, &b[j..], n, &mut c[i * n + j..], n, k);
        }
    }
    // Leftover rows, 32 columns at a time.
    for i in full_m..m {
        let mut j = 0;
        while j + 32 <= full_n {
            row_tile::<T, 32>(&a[i * k..], &b[j..], n, &mut c[i * n + j..], k);
            j += 32;
        }
        while j < full_n {
            row_tile::<T, NR>(&a[i * k..], &b[j..], n, &mut c[i * n + j..], k);
            j += NR;
        }
    }
    // Leftover columns for every row.
    if full_n < n {
        for i in 0..m {
            row_strip::<T, NR>(&a[i * k..], &b[full_n..], n, &mut c[i * n + full_n..], k, n - full_n);
        }
    }
}

#[inline(always)]
fn gemm_impl<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_tiled::<T, 8>(m, n, k, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_impl(m, n, k, a, b, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn gemm_avx512<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_impl(m, n, k, a, b, c)
}

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the CPU supports AVX-512F, checked just above.
        unsafe { gemm_avx512(m, n, k, a, b, c) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_avx2(m, n, k, a, b, c) };
        return;
    }
    gemm_impl(m, n, k, a, b, c)
}

const LANES: usize = 8;

#[inline(always)]
fn matvec_impl<T: Real>(m: usize, k: usize, a: &[T], x: &[T], y: &mut [T]) {
    let full = k - k % LANES;
    for (i, yi) in y[..m].iter_mut().enumerate() {
        let row = &a[i * k..(i + 1) * k];
        let mut acc = [T::default(); LANES];
        for (r, xs) in row[..full].chunks_exact(LANES).zip(x[..full].chunks_exact(LANES)) {
            for j in 0..LANES {
                acc[j] = acc[j] + r[j] * xs[j];
            }
        }
        let mut sum = T::default();
        for v in acc {
            sum = sum + v;
        }
        for (&r, &xv) in row[full..].iter().zip(&x[full..k]) {
            sum = sum + r * xv;
        }
        *yi = *yi + sum;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matvec_avx2<T: Real>(m: usize, k: usize, a: &[T], x: &[T], y: &mut [T]) {
    matvec_impl(m, k, a, x, y)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn matvec_avx512<T: Real>(m: usize, k: usize, a: &[T], x: &[T], y: &mut [T]) {
    matvec_impl(m, k, a, x, y)
}

/// `y[m] += a[m x k] * x[k]`, row-major.
pub(crate) fn matvec<T: Real>(m: usize, k: usize, a: &[T], x: &[T], y: &mut [T]) {
    assert!(a.len() >= m * k && x.len() >= k && y.len() >= m, "matvec operand sizes");
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx512f") {
        // SAFETY: the CPU supports AVX-512F, checked just above.
        unsafe { matvec_avx512(m, k, a, x, y) };
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { matvec_avx2(m, k, a, x, y) };
        return;
    }
    matvec_impl(m, k, a, x, y)
}

/// Row-major transpose.
pub(crate) fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
    out
}
