//! Matrix kernels shared by forward and backward passes.
//!
//! Every multiply is expressed so the innermost loop walks contiguous memory
//! on both operands (axpy ordering), which the compiler vectorizes well.
//! Operands that would be strided are transposed explicitly first; the
//! transpose is O(M*K) against the O(M*K*N) multiply.

use super::tape::Element;

/// `C[M,N] = A[M,K] @ B[K,N]`, all row-major.
pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    matmul_nn_acc(&mut c, a, b, m, k, n);
    c
}

/// `C[M,N] += A[M,K] @ B[K,N]`.
pub fn matmul_nn_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let cr = &mut c[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

/// `C[K,N] += A[T,K]^T @ B[T,N]`; the weight-gradient shape.
pub fn matmul_tn_acc<E: Element>(c: &mut [E], a: &[E], b: &[E], t: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), t * k);
    debug_assert_eq!(b.len(), t * n);
    debug_assert_eq!(c.len(), k * n);
    for row in 0..t {
        let ar = &a[row * k..(row + 1) * k];
        let br = &b[row * n..(row + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            let cr = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] += av * br[j];
            }
        }
    }
}

/// Row-major transpose of an `M x N` matrix.
pub fn transpose<E: Element>(a: &[E], m: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_agrees_with_scalar_loop() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let c = matmul_nn(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                assert!((c[i * n + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = transpose(&a, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(a, back);
    }
}
