//! Small dense matrix kernels backing the convolution and linear layers.
//! Row-major everywhere; all kernels accumulate into `c`.
//!
//! The hot path is `gemm_nn` (im2col convolution). It processes two output
//! rows at a time against 32-column register tiles; slice iterators keep the
//! inner loops free of bounds checks so they autovectorize.

use crate::tensor::Real;

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += a * *s;
    }
}

const JB: usize = 32;

/// c[m x n] += a[m x k] * b[k x n].
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let n_tiles = n / JB;
    let mut i = 0;
    while i + 2 <= m {
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let c1 = &mut rest[..n];
        let a0row = &a[i * k..i * k + k];
        let a1row = &a[(i + 1) * k..(i + 1) * k + k];
        for jt in 0..n_tiles {
            let j = jt * JB;
            let mut acc0 = [T::zero(); JB];
            let mut acc1 = [T::zero(); JB];
            for kk in 0..k {
                let bsl = &b[kk * n + j..kk * n + j + JB];
                let a0 = a0row[kk];
                let a1 = a1row[kk];
                for t in 0..JB {
                    acc0[t] += a0 * bsl[t];
                    acc1[t] += a1 * bsl[t];
                }
            }
            for t in 0..JB {
                c0[j + t] += acc0[t];
                c1[j + t] += acc1[t];
            }
        }
        let j = n_tiles * JB;
        if j < n {
            for kk in 0..k {
                let bsl = &b[kk * n + j..kk * n + n];
                axpy(&mut c0[j..], bsl, a0row[kk]);
                axpy(&mut c1[j..], bsl, a1row[kk]);
            }
        }
        i += 2;
    }
    if i < m {
        let crow = &mut c[i * n..i * n + n];
        let arow = &a[i * k..i * k + k];
        for kk in 0..k {
            axpy(crow, &b[kk * n..kk * n + n], arow[kk]);
        }
    }
}

/// c[m x n] += a^T * b where a is [k x m], b is [k x n].
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for (i, crow) in c[..m * n].chunks_exact_mut(n).enumerate() {
        for kk in 0..k {
            axpy(crow, &b[kk * n..kk * n + n], a[kk * m + i]);
        }
    }
}

/// c[m x n] += a * b^T where a is [m x l], b is [n x l] (row dots).
pub fn gemm_nt<T: Real>(m: usize, l: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * l && b.len() >= n * l && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * l..i * l + l];
        let crow = &mut c[i * n..i * n + n];
        for j in 0..n {
            let brow = &b[j * l..j * l + l];
            let mut acc = [T::zero(); 8];
            let mut ach = arow.chunks_exact(8);
            let mut bch = brow.chunks_exact(8);
            for (av, bv) in (&mut ach).zip(&mut bch) {
                for t in 0..8 {
                    acc[t] += av[t] * bv[t];
                }
            }
            let mut s = T::zero();
            for v in acc {
                s += v;
            }
            for (av, bv) in ach.remainder().iter().zip(bch.remainder().iter()) {
                s += *av * *bv;
            }
            crow[j] += s;
        }
    }
}
