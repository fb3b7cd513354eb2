//! Trailing-aligned broadcasting and its adjoint (sum-reduction).

use crate::element::Element;
use crate::tensor::numel;

/// Output dims when broadcasting `a` against `b`, or `None` if incompatible.
pub fn broadcast_dims(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` as seen from `out` (zero along broadcast axes).
pub fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut s = vec![0; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        let o = i + rank - input.len();
        s[o] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    s
}

/// Walks `out` in row-major order calling `f(out_index, off_a, off_b)`.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(out) / inner;
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut pos = 0;
    for _ in 0..outer {
        for j in 0..inner {
            f(pos + j, oa + j * ia, ob + j * ib);
        }
        pos += inner;
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Element>(
    a: &[T],
    ad: &[usize],
    b: &[T],
    bd: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ad == bd {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(ad, out);
    let sb = broadcast_strides(bd, out);
    let mut res = vec![T::zero(); numel(out)];
    walk2(out, &sa, &sb, |i, oa, ob| res[i] = f(a[oa], b[ob]));
    res
}

pub fn broadcast_to<T: Element>(x: &[T], xd: &[usize], out: &[usize]) -> Vec<T> {
    let sx = broadcast_strides(xd, out);
    let zeros = vec![0; out.len()];
    let mut res = vec![T::zero(); numel(out)];
    walk2(out, &sx, &zeros, |i, ox, _| res[i] = x[ox]);
    res
}

/// Sums `g` (dims `gd`) down to `target` in 64-bit, the adjoint of
/// broadcasting.
pub fn reduce_to<T: Element>(g: &[T], gd: &[usize], target: &[usize]) -> Vec<T> {
    if gd == target {
        return g.to_vec();
    }
    let st = broadcast_strides(target, gd);
    let zeros = vec![0; gd.len()];
    let mut res = vec![0.0f64; numel(target)];
    walk2(gd, &st, &zeros, |i, ot, _| res[ot] += g[i].as_f64());
    res.into_iter().map(T::from_f64).collect()
}
