//! Multi-head attention over windows, stripes and reduced key sets.

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::layout::{partition_cl, reverse_cl, roll_axes};
use crate::tensor::Tensor;

/// Scaled dot-product attention per group.
///
/// `q` is `G x nq x C`, `k` and `v` are `G x nk x C`. `mask`, when given, is
/// `nW x 1 x nq x nk` of additive logits (0 or -inf) with `G` a multiple of
/// `nW`; group `g` uses mask `g mod nW`. Returns the `G x nq x C` output and
/// the `G x heads x nq x nk` attention weights.
pub fn mha<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (qd, kd) = (q.dims(), k.dims());
    let (g, nq, c) = (qd[0], qd[1], qd[2]);
    let nk = kd[1];
    if heads == 0 || c % heads != 0 || kd[0] != g || kd[2] != c || v.dims() != kd {
        return Err(Error::shape("attention", format!("q {qd:?}, k {kd:?}, v {:?} with {heads} heads", v.dims())));
    }
    let d = c / heads;
    let split = |x: Var<'t, T>, n: usize| x.reshape(&[g, n, heads, d])?.permute(&[0, 2, 1, 3]);
    let qh = split(q, nq)?.scale(1.0 / (d as f64).sqrt())?;
    let kh = split(k, nk)?;
    let vh = split(v, nk)?;
    let mut logits = qh.matmul_t(kh, false, true)?;
    if let Some(m) = mask {
        let nw = m.dims()[0];
        if g % nw != 0 || m.dims() != [nw, 1, nq, nk] {
            return Err(Error::shape("attention", format!("mask {:?} for {g} groups of {nq} x {nk}", m.dims())));
        }
        let mv = q.tape().constant(m.clone());
        logits = logits.reshape(&[g / nw, nw, heads, nq, nk])?.add(mv)?.reshape(&[g, heads, nq, nk])?;
    }
    let probs = logits.softmax()?;
    let out = probs.matmul(vh)?.permute(&[0, 2, 1, 3])?.reshape(&[g, nq, c])?;
    Ok((out, probs))
}

/// Window layout on a (possibly padded and shifted) grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
    pub hp: usize,
    pub wp: usize,
    pub sh: usize,
    pub sw: usize,
}

impl WindowGrid {
    /// Clamps the window to the map, pads to a multiple of it, and shifts by
    /// half a window along axes the window does not cover.
    pub fn new(h: usize, w: usize, wh: usize, ww: usize, shifted: bool) -> Self {
        let wh = wh.clamp(1, h);
        let ww = ww.clamp(1, w);
        let hp = h.div_ceil(wh) * wh;
        let wp = w.div_ceil(ww) * ww;
        let sh = if shifted && wh < h { wh / 2 } else { 0 };
        let sw = if shifted && ww < w { ww / 2 } else { 0 };
        WindowGrid { h, w, wh, ww, hp, wp, sh, sw }
    }

    pub fn windows(&self) -> usize {
        (self.hp / self.wh) * (self.wp / self.ww)
    }

    pub fn tokens(&self) -> usize {
        self.wh * self.ww
    }

    pub fn is_trivial(&self) -> bool {
        self.hp == self.h && self.wp == self.w && self.sh == 0 && self.sw == 0
    }

    fn label(i: usize, n: usize, win: usize, shift: usize) -> usize {
        if shift == 0 || i < n - win {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    }

    /// Additive mask `nW x 1 x n x n`: keys that are padding or lie in a
    /// different pre-shift region get -inf.
    pub fn mask<T: Element>(&self) -> Tensor<T> {
        let (nwh, nww) = (self.hp / self.wh, self.wp / self.ww);
        let n = self.tokens();
        let mut data = Vec::with_capacity(self.windows() * n * n);
        let mut region = vec![0usize; n];
        let mut valid = vec![false; n];
        for bi in 0..nwh {
            for bj in 0..nww {
                for r in 0..self.wh {
                    for c in 0..self.ww {
                        let (i, j) = (bi * self.wh + r, bj * self.ww + c);
                        let t = r * self.ww + c;
                        region[t] = 3 * Self::label(i, self.hp, self.wh, self.sh)
                            + Self::label(j, self.wp, self.ww, self.sw);
                        let (oi, oj) = ((i + self.sh) % self.hp, (j + self.sw) % self.wp);
                        valid[t] = oi < self.h && oj < self.w;
                    }
                }
                for a in 0..n {
                    for b in 0..n {
                        let ok = valid[b] && region[a] == region[b];
                        data.push(if ok { T::zero() } else { T::neg_infinity() });
                    }
                }
            }
        }
        Tensor::from_parts(vec![self.windows(), 1, n, n], data)
    }
}

/// Attention within `wh x ww` windows of channel-last `B x H x W x C` maps.
/// Returns the output map and the per-window attention weights.
pub fn window_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
    window: (usize, usize),
    shifted: bool,
) -> Result<(Var<'t, T>, Var<'t, T>, WindowGrid)> {
    let d = q.dims();
    let (b, h, w) = (d[0], d[1], d[2]);
    let grid = WindowGrid::new(h, w, window.0, window.1, shifted);
    let prep = |x: Var<'t, T>| -> Result<Var<'t, T>> {
        let x = x.pad(1, 0, grid.hp - h, 0.0)?.pad(2, 0, grid.wp - w, 0.0)?;
        let x = roll_axes(x, (1, 2), (-(grid.sh as isize), -(grid.sw as isize)))?;
        partition_cl(x, grid.wh, grid.ww)
    };
    let (qw, kw, vw) = (prep(q)?, prep(k)?, prep(v)?);
    let mask = (!grid.is_trivial()).then(|| grid.mask::<T>());
    let (out, probs) = mha(qw, kw, vw, heads, mask.as_ref())?;
    let out = reverse_cl(out, b, grid.hp, grid.wp, grid.wh, grid.ww)?;
    let mut out = roll_axes(out, (1, 2), (grid.sh as isize, grid.sw as isize))?;
    if grid.hp != h {
        out = out.slice(1, 0, h)?;
    }
    if grid.wp != w {
        out = out.slice(2, 0, w)?;
    }
    Ok((out, probs, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry() {
        let g = WindowGrid::new(8, 8, 7, 7, true);
        assert_eq!((g.wh, g.hp, g.sh, g.windows()), (7, 14, 3, 4));
        let g = WindowGrid::new(4, 4, 7, 7, true);
        assert_eq!((g.wh, g.hp, g.sh, g.windows()), (4, 4, 0, 1));
        assert!(g.is_trivial());
        let g = WindowGrid::new(5, 3, 2, 3, false);
        assert_eq!((g.hp, g.wp, g.windows()), (6, 3, 3));
    }

    #[test]
    fn padding_masks_keys() {
        let g = WindowGrid::new(3, 3, 2, 2, false);
        let m = g.mask::<f64>();
        assert_eq!(m.dims(), &[4, 1, 4, 4]);
        // last window holds only original (2,2) as a valid key
        let last = &m.data()[3 * 16..4 * 16];
        for a in 0..4 {
            assert_eq!(last[a * 4], 0.0);
            assert!(last[a * 4 + 1..a * 4 + 4].iter().all(|v| *v == f64::NEG_INFINITY));
        }
    }
}
