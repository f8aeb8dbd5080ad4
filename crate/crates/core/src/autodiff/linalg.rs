//! Matrix-product kernels on row-major slices.

use crate::par;

/// Rows of the output handled per parallel task.
const ROWS_PER_TASK: usize = 64;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a_t` / `b_t` mean the slice stores the transpose (`k × m` / `n × k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk_mut(c, ROWS_PER_TASK * n, |chunk, c_rows| {
        let row0 = chunk * ROWS_PER_TASK;
        let rows = c_rows.len() / n;
        // SAFETY: the pointers address `rows × k` / `k × n` / `rows × n` blocks that lie
        // inside `a`, `b` and `c_rows` for the strides computed above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(row0 * rsa),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_rows.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let (m, k, n) = (130, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut c = expect.clone();
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }
}
