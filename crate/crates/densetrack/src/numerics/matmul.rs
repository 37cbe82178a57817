//! Dense row-major matrix kernels.
//!
//! Three accumulate variants cover forward passes and both backward
//! products without materializing transposes:
//!
//!   mm_nn:  C += A·B        A[m,k]  B[k,n]  C[m,n]
//!   mm_nt:  C += A·Bᵀ       A[m,k]  B[n,k]  C[m,n]
//!   mm_tn:  C += Aᵀ·B       A[k,m]  B[k,n]  C[m,n]
//!
//! The inner loops are written so LLVM autovectorizes them (axpy over
//! contiguous rows, or unrolled dot products). Parallelism splits C by row
//! blocks — disjoint writes, deterministic for any thread count.

use super::element::Element;
use super::parallel;

/// C[m,n] += A[m,k] · B[k,n]
pub fn mm_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    parallel::for_each_chunk(c, n.max(1), |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..kk * n + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    });
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
pub fn mm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    parallel::for_each_chunk(c, n.max(1), |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv += dot(a_row, b_row);
        }
    });
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
pub fn mm_tn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    parallel::for_each_chunk(c, n.max(1), |i, c_row| {
        for kk in 0..k {
            let av = a[kk * m + i];
            let b_row = &b[kk * n..kk * n + n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    });
}

/// Unrolled dot product; the 4-lane accumulators keep LLVM honest.
#[inline]
pub fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc0 = E::zero();
    let mut acc1 = E::zero();
    let mut acc2 = E::zero();
    let mut acc3 = E::zero();
    let chunks = n / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc0 += a[j] * b[j];
        acc1 += a[j + 1] * b[j + 1];
        acc2 += a[j + 2] * b[j + 2];
        acc3 += a[j + 3] * b[j + 3];
    }
    let mut acc = (acc0 + acc1) + (acc2 + acc3);
    for j in chunks * 4..n {
        acc += a[j] * b[j];
    }
    acc
}

/// out[i] += s * x[i]
#[inline]
pub fn axpy<E: Element>(s: E, x: &[E], out: &mut [E]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        mm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A·Bᵀ with B stored transposed should reproduce the same product.
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_nt(m, k, n, &a, &bt, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // Aᵀ·B with A stored transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c = vec![0.0; m * n];
        mm_tn(m, k, n, &at, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
