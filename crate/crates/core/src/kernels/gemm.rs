use crate::element::Element;
use crate::parallel::Exec;

const ROW_BLOCK: usize = 16;
const K_BLOCK: usize = 64;
const N_BLOCK: usize = 1024;

/// Copies a `rows x cols` row-major matrix into its `cols x rows` transpose.
pub fn transpose<T: Element>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}

/// `c = op(a) · op(b)`, accumulated in 64-bit with `op(a)` of size `m x k` and `op(b)` of size
/// `k x n`. When `ta` is set `a` is stored `k x m`; when `tb` is set `b` is
/// stored `n x k`. `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    exec: Exec,
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a_owned;
    let a = if ta {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if tb {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };
    let a: Vec<f64> = a.iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = b.iter().map(|v| v.as_f64()).collect();
    exec.chunks_mut(c, ROW_BLOCK * n, k, |ci, block| {
        let row0 = ci * ROW_BLOCK;
        let rows = block.len() / n;
        let mut acc = vec![0.0f64; rows * n];
        for j0 in (0..n).step_by(N_BLOCK) {
            let j1 = (j0 + N_BLOCK).min(n);
            for p0 in (0..k).step_by(K_BLOCK) {
                let p1 = (p0 + K_BLOCK).min(k);
                for r in 0..rows {
                    let i = row0 + r;
                    let arow = &a[i * k..(i + 1) * k];
                    let crow = &mut acc[r * n + j0..r * n + j1];
                    for p in p0..p1 {
                        let av = arow[p];
                        let brow = &b[p * n + j0..p * n + j1];
                        for (cv, &bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }
        for (d, &s) in block.iter_mut().zip(&acc) {
            *d = T::from_f64(s);
        }
    });
}

/// Batched `gemm`. With `b_shared` a single `b` matrix serves every batch.
#[allow(clippy::too_many_arguments)]
pub fn gemm_batched<T: Element>(
    exec: Exec,
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    b_shared: bool,
) {
    if batch == 1 {
        gemm(exec, a, b, c, m, k, n, ta, tb);
        return;
    }
    exec.chunks_mut(c, m * n, m * k, |bi, cb| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = if b_shared {
            b
        } else {
            &b[bi * k * n..(bi + 1) * k * n]
        };
        gemm(Exec::Sequential, ab, bb, cb, m, k, n, ta, tb);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matches_naive_all_transpose_modes() {
        let (m, k, n) = (37, 70, 1030);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 11) as f64) - 5.0).collect();
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(Exec::Sequential, &a, &b, &mut c, m, k, n, ta, tb);
            assert_eq!(c, naive(&a, &b, m, k, n, ta, tb), "ta={ta} tb={tb}");
        }
    }

    #[test]
    fn parallel_is_bit_identical() {
        let (m, k, n) = (64, 48, 96);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(Exec::Sequential, &a, &b, &mut c1, m, k, n, false, true);
        gemm(Exec::Parallel, &a, &b, &mut c2, m, k, n, false, true);
        assert!(c1.iter().zip(&c2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
