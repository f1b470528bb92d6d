//! Dense matrix kernels on row-major slices. All of them accumulate into `c`.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::zero(); 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
