//! Row-major matrix kernels shared by the forward and backward rules.
//!
//! Loop orders are chosen so the innermost loop walks contiguous memory,
//! which lets the compiler vectorize them.

use super::tensor::Element;

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn mm_acc<F: Element>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
}

/// out[m,k] += c[m,n] * b[k,n]^T  (rows of c dotted with rows of b)
pub(crate) fn mm_bt_acc<F: Element>(c: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (l, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let mut acc = F::zero();
            for (&cv, &bv) in c_row.iter().zip(b_row) {
                acc += cv * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * c[m,n]  (accumulated outer products)
pub(crate) fn mm_at_acc<F: Element>(a: &[F], c: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &c[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += a_il * cv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernels_match_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.3 + 1.0).collect();

        let mut c = vec![0.0; m * n];
        mm_acc(&a, &b, m, k, n, &mut c);
        assert_eq!(c, naive_mm(&a, &b, m, k, n));

        // c * b^T == naive with b transposed
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut da = vec![0.0; m * k];
        mm_bt_acc(&c, &b, m, n, k, &mut da);
        assert_eq!(da, naive_mm(&c, &bt, m, n, k));

        // a^T * c == naive with a transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut db = vec![0.0; k * n];
        mm_at_acc(&a, &c, m, k, n, &mut db);
        assert_eq!(db, naive_mm(&at, &c, k, m, n));
    }
}
