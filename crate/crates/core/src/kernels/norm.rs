//! Row-wise kernels over the last axis: layer norm and softmax.

use crate::element::Element;
use crate::parallel::Exec;

const ROWS_PER_TASK: usize = 64;

/// Mean and reciprocal standard deviation, accumulated in 64-bit.
fn row_stats<T: Element>(row: &[T], eps: T) -> (T, T) {
    let c = row.len() as f64;
    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c;
    let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c;
    (T::from_f64(mean), T::from_f64((var + eps.as_f64()).sqrt().recip()))
}

pub fn layer_norm_forward<T: Element>(
    exec: Exec,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: T,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    exec.chunks_mut(&mut y, ROWS_PER_TASK * c, 8, |ti, out| {
        let r0 = ti * ROWS_PER_TASK;
        for (r, orow) in out.chunks_mut(c).enumerate() {
            let row = &x[(r0 + r) * c..(r0 + r + 1) * c];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..c {
                orow[j] = gamma[j] * (row[j] - mean) * rstd + beta[j];
            }
        }
    });
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Element>(
    exec: Exec,
    x: &[T],
    gamma: &[T],
    g: &[T],
    c: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let cf = T::from_usize(c);
    let mut dx = vec![T::zero(); x.len()];
    exec.chunks_mut(&mut dx, ROWS_PER_TASK * c, 16, |ti, out| {
        let r0 = ti * ROWS_PER_TASK;
        for (r, drow) in out.chunks_mut(c).enumerate() {
            let row = &x[(r0 + r) * c..(r0 + r + 1) * c];
            let grow = &g[(r0 + r) * c..(r0 + r + 1) * c];
            let (mean, rstd) = row_stats(row, eps);
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for j in 0..c {
                let gh = grow[j] * gamma[j];
                let xh = (row[j] - mean) * rstd;
                s1 += gh.as_f64();
                s2 += (gh * xh).as_f64();
            }
            let (m1, m2) = (T::from_f64(s1) / cf, T::from_f64(s2) / cf);
            for j in 0..c {
                let xh = (row[j] - mean) * rstd;
                drow[j] = rstd * (grow[j] * gamma[j] - m1 - xh * m2);
            }
        }
    });
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let grow = &g[r * c..(r + 1) * c];
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..c {
            dgamma[j] += (grow[j] * (row[j] - mean) * rstd).as_f64();
            dbeta[j] += grow[j].as_f64();
        }
    }
    let back = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (dx, back(dgamma), back(dbeta))
}

pub fn softmax_forward<T: Element>(exec: Exec, x: &[T], c: usize, log: bool) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    exec.chunks_mut(&mut y, ROWS_PER_TASK * c, 8, |ti, out| {
        let r0 = ti * ROWS_PER_TASK;
        for (r, orow) in out.chunks_mut(c).enumerate() {
            let row = &x[(r0 + r) * c..(r0 + r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                // fully masked row: no admissible key
                orow.fill(if log { T::neg_infinity() } else { T::zero() });
                continue;
            }
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
            }
            let sum = T::from_f64(orow.iter().map(|v| v.as_f64()).sum());
            if log {
                let lse = sum.ln();
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = v - max - lse;
                }
            } else {
                let inv = sum.recip();
                for o in orow.iter_mut() {
                    *o *= inv;
                }
            }
        }
    });
    y
}

/// Backward of softmax (`log = false`, `y` = probabilities) or log-softmax
/// (`log = true`, `y` = log-probabilities).
pub fn softmax_backward<T: Element>(exec: Exec, y: &[T], g: &[T], c: usize, log: bool) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    exec.chunks_mut(&mut dx, ROWS_PER_TASK * c, 8, |ti, out| {
        let r0 = ti * ROWS_PER_TASK;
        for (r, drow) in out.chunks_mut(c).enumerate() {
            let yrow = &y[(r0 + r) * c..(r0 + r + 1) * c];
            let grow = &g[(r0 + r) * c..(r0 + r + 1) * c];
            if log {
                let gs = T::from_f64(grow.iter().map(|v| v.as_f64()).sum());
                for j in 0..c {
                    drow[j] = grow[j] - yrow[j].exp() * gs;
                }
            } else {
                let dot = T::from_f64(yrow.iter().zip(grow).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
                for j in 0..c {
                    drow[j] = yrow[j] * (grow[j] - dot);
                }
            }
        }
    });
    dx
}
