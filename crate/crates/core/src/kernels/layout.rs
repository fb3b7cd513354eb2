//! Data movement: permutation, slicing, padding, concatenation, rolls.
//! Single-axis operations view the tensor as `[outer, axis, inner]`.

use crate::element::Element;
use crate::tensor::{numel, strides};

pub fn permuted_dims(dims: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| dims[p]).collect()
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn permute<T: Element>(x: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = dims.len();
    if rank == 0 || perm.iter().enumerate().all(|(i, &p)| i == p) {
        return x.to_vec();
    }
    let out_dims = permuted_dims(dims, perm);
    let in_strides = strides(dims);
    let s: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_dims[rank - 1];
    let si = s[rank - 1];
    let outer = numel(&out_dims) / inner;
    let mut out = Vec::with_capacity(numel(dims));
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if si == 1 {
            out.extend_from_slice(&x[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| x[off + j * si]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += s[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= s[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `(outer, axis_len, inner)` for `dims` split at `axis`.
pub fn split_at_axis(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

pub fn slice<T: Element>(x: &[T], dims: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(dims, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Adjoint of `slice`: places `g` into a zero tensor of `dims`.
pub fn unslice<T: Element>(g: &[T], dims: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(dims, axis);
    let mut out = vec![T::zero(); numel(dims)];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub fn pad<T: Element>(
    x: &[T],
    dims: &[usize],
    axis: usize,
    before: usize,
    after: usize,
    value: T,
) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(dims, axis);
    let m = n + before + after;
    let mut out = vec![value; outer * m * inner];
    for o in 0..outer {
        let dst = (o * m + before) * inner;
        out[dst..dst + n * inner].copy_from_slice(&x[o * n * inner..(o + 1) * n * inner]);
    }
    out
}

/// Concatenates along `axis`; all parts share every other extent.
pub fn concat<T: Element>(parts: &[(&[T], &[usize])], axis: usize) -> Vec<T> {
    let (outer, _, inner) = split_at_axis(parts[0].1, axis);
    let total: usize = parts.iter().map(|(_, d)| d[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (data, d) in parts {
            let n = d[axis];
            out.extend_from_slice(&data[o * n * inner..(o + 1) * n * inner]);
        }
    }
    out
}

/// Torus roll along `axis`: `out[(i + shift) mod n] = x[i]`.
pub fn roll<T: Element>(x: &[T], dims: &[usize], axis: usize, shift: isize) -> Vec<T> {
    let (outer, n, inner) = split_at_axis(dims, axis);
    let s = shift.rem_euclid(n as isize) as usize;
    if s == 0 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..n {
            let j = (i + s) % n;
            out[base + j * inner..base + (j + 1) * inner]
                .copy_from_slice(&x[base + i * inner..base + (i + 1) * inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let x: Vec<f32> = (0..6).map(|v| v as f32).collect();
        assert_eq!(permute(&x, &[2, 3], &[1, 0]), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let y = permute(&x, &[1, 2, 3], &[2, 0, 1]);
        assert_eq!(y, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn roll_and_pad() {
        let x = vec![1.0f32, 2.0, 3.0];
        assert_eq!(roll(&x, &[3], 0, 1), vec![3.0, 1.0, 2.0]);
        assert_eq!(roll(&x, &[3], 0, -1), vec![2.0, 3.0, 1.0]);
        assert_eq!(pad(&x, &[1, 3], 1, 1, 2, 0.0), vec![0.0, 1.0, 2.0, 3.0, 0.0, 0.0]);
        assert_eq!(slice(&[1.0f32, 2.0, 3.0, 4.0], &[2, 2], 1, 1, 1), vec![2.0, 4.0]);
    }
}
