//! 2-D cross-correlation with zero padding. Depthwise convolutions use a
//! direct kernel; everything else goes through im2col + gemm.

use crate::element::Element;
use crate::kernels::gemm::gemm;
use crate::parallel::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    pub fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn plane_out(&self) -> usize {
        self.hout * self.wout
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
}

pub fn forward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    if g.is_depthwise() {
        depthwise_forward(exec, g, x, w, bias)
    } else {
        im2col_forward(exec, g, x, w, bias)
    }
}

/// Gradients with respect to input, weight and bias; each is computed only
/// when requested.
pub fn backward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let db = need[2].then(|| bias_grad(g, gout));
    let (dx, dw) = if g.is_depthwise() {
        depthwise_backward(exec, g, x, w, gout, need[0], need[1])
    } else {
        im2col_backward(exec, g, x, w, gout, need[0], need[1])
    };
    [dx, dw, db]
}

fn bias_grad<T: Element>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let p = g.plane_out();
    let mut db = vec![0.0f64; g.cout];
    for b in 0..g.batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let base = (b * g.cout + c) * p;
            *acc += gout[base..base + p].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    db.into_iter().map(T::from_f64).collect()
}

// Valid output range [lo, hi) along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, inp: usize, out: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must be in [0, inp)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if inp + pad > k {
        ((inp + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    let lo = lo.min(out);
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.plane_out();
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    exec.chunks_mut(&mut out, p, g.kh * g.kw, |plane, o| {
        let c = plane % g.cout;
        let xp = &x[plane * g.h * g.w..(plane + 1) * g.h * g.w];
        let wk = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let b0 = bias.map_or(0.0, |b| b[c].as_f64());
        let mut acc = vec![b0; p];
        for ky in 0..g.kh {
            let (oy0, oy1) = tap_range(ky, g.ph, g.sh, g.h, g.hout);
            for kx in 0..g.kw {
                let wv = wk[ky * g.kw + kx].as_f64();
                let (ox0, ox1) = tap_range(kx, g.pw, g.sw, g.w, g.wout);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * g.sh + ky - g.ph;
                    let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                    let orow = &mut acc[oy * g.wout..(oy + 1) * g.wout];
                    if g.sw == 1 {
                        let ix0 = ox0 + kx - g.pw;
                        for (ov, &xv) in orow[ox0..ox1].iter_mut().zip(&xrow[ix0..]) {
                            *ov += wv * xv.as_f64();
                        }
                    } else {
                        for ox in ox0..ox1 {
                            orow[ox] += wv * xrow[ox * g.sw + kx - g.pw].as_f64();
                        }
                    }
                }
            }
        }
        for (d, &s) in o.iter_mut().zip(&acc) {
            *d = T::from_f64(s);
        }
    });
    out
}

fn depthwise_backward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.plane_out();
    let hw = g.h * g.w;
    let kk = g.kh * g.kw;
    let dx = need_x.then(|| {
        let mut dx = vec![T::zero(); g.batch * g.cin * hw];
        exec.chunks_mut(&mut dx, hw, kk, |plane, d| {
            let c = plane % g.cout;
            let gp = &gout[plane * p..(plane + 1) * p];
            let wk = &w[c * kk..(c + 1) * kk];
            let mut acc = vec![0.0f64; hw];
            for ky in 0..g.kh {
                let (oy0, oy1) = tap_range(ky, g.ph, g.sh, g.h, g.hout);
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx].as_f64();
                    let (ox0, ox1) = tap_range(kx, g.pw, g.sw, g.w, g.wout);
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ky - g.ph;
                        for ox in ox0..ox1 {
                            acc[iy * g.w + ox * g.sw + kx - g.pw] += wv * gp[oy * g.wout + ox].as_f64();
                        }
                    }
                }
            }
            for (v, &s) in d.iter_mut().zip(&acc) {
                *v = T::from_f64(s);
            }
        });
        dx
    });
    let dw = need_w.then(|| {
        // per-plane partials, reduced over the batch in order
        let mut partial = vec![0.0f64; g.batch * g.cout * kk];
        exec.chunks_mut(&mut partial, kk, p * kk, |plane, d| {
            let xp = &x[plane * hw..(plane + 1) * hw];
            let gp = &gout[plane * p..(plane + 1) * p];
            for ky in 0..g.kh {
                let (oy0, oy1) = tap_range(ky, g.ph, g.sh, g.h, g.hout);
                for kx in 0..g.kw {
                    let (ox0, ox1) = tap_range(kx, g.pw, g.sw, g.w, g.wout);
                    let mut acc = 0.0f64;
                    for oy in oy0..oy1 {
                        let iy = oy * g.sh + ky - g.ph;
                        for ox in ox0..ox1 {
                            acc += gp[oy * g.wout + ox].as_f64() * xp[iy * g.w + ox * g.sw + kx - g.pw].as_f64();
                        }
                    }
                    d[ky * g.kw + kx] = acc;
                }
            }
        });
        let mut dw = vec![0.0f64; g.cout * kk];
        for b in 0..g.batch {
            for (d, &v) in dw.iter_mut().zip(&partial[b * g.cout * kk..(b + 1) * g.cout * kk]) {
                *d += v;
            }
        }
        dw.into_iter().map(T::from_f64).collect()
    });
    (dx, dw)
}

/// Column matrix for group `grp`: rows `(ci, ky, kx)`, columns `(b, oy, ox)`.
fn im2col<T: Element>(exec: Exec, g: &ConvGeom, x: &[T], grp: usize) -> Vec<T> {
    let p = g.plane_out();
    let cols = g.batch * p;
    let mut col = vec![T::zero(); g.col_rows() * cols];
    exec.chunks_mut(&mut col, cols, 1, |row, dst| {
        let kx = row % g.kw;
        let ky = (row / g.kw) % g.kh;
        let ci = row / (g.kw * g.kh);
        let c = grp * g.cin_g() + ci;
        let (oy0, oy1) = tap_range(ky, g.ph, g.sh, g.h, g.hout);
        let (ox0, ox1) = tap_range(kx, g.pw, g.sw, g.w, g.wout);
        for b in 0..g.batch {
            let xp = &x[(b * g.cin + c) * g.h * g.w..(b * g.cin + c + 1) * g.h * g.w];
            let d = &mut dst[b * p..(b + 1) * p];
            for oy in oy0..oy1 {
                let iy = oy * g.sh + ky - g.ph;
                for ox in ox0..ox1 {
                    d[oy * g.wout + ox] = xp[iy * g.w + ox * g.sw + kx - g.pw];
                }
            }
        }
    });
    col
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], grp: usize, dx: &mut [T]) {
    let p = g.plane_out();
    let cols = g.batch * p;
    for row in 0..g.col_rows() {
        let kx = row % g.kw;
        let ky = (row / g.kw) % g.kh;
        let ci = row / (g.kw * g.kh);
        let c = grp * g.cin_g() + ci;
        let (oy0, oy1) = tap_range(ky, g.ph, g.sh, g.h, g.hout);
        let (ox0, ox1) = tap_range(kx, g.pw, g.sw, g.w, g.wout);
        let src = &col[row * cols..(row + 1) * cols];
        for b in 0..g.batch {
            let base = (b * g.cin + c) * g.h * g.w;
            let s = &src[b * p..(b + 1) * p];
            for oy in oy0..oy1 {
                let iy = oy * g.sh + ky - g.ph;
                for ox in ox0..ox1 {
                    dx[base + iy * g.w + ox * g.sw + kx - g.pw] += s[oy * g.wout + ox];
                }
            }
        }
    }
}

fn im2col_forward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let p = g.plane_out();
    let cols = g.batch * p;
    let k = g.col_rows();
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let _ = cin_g;
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let mut tmp = vec![T::zero(); cout_g * cols];
    for grp in 0..g.groups {
        let col = im2col(exec, g, x, grp);
        let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
        gemm(exec, wg, &col, &mut tmp, cout_g, k, cols, false, false);
        for co in 0..cout_g {
            let c = grp * cout_g + co;
            let b0 = bias.map_or(T::zero(), |b| b[c]);
            for b in 0..g.batch {
                let src = &tmp[co * cols + b * p..co * cols + (b + 1) * p];
                let dst = &mut out[(b * g.cout + c) * p..(b * g.cout + c + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b0;
                }
            }
        }
    }
    out
}

fn im2col_backward<T: Element>(
    exec: Exec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.plane_out();
    let cols = g.batch * p;
    let k = g.col_rows();
    let cout_g = g.cout_g();
    let mut dx = need_x.then(|| vec![T::zero(); g.batch * g.cin * g.h * g.w]);
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * k]);
    let mut gg = vec![T::zero(); cout_g * cols];
    for grp in 0..g.groups {
        // gather this group's output gradient as [cout_g, batch * p]
        for co in 0..cout_g {
            let c = grp * cout_g + co;
            for b in 0..g.batch {
                gg[co * cols + b * p..co * cols + (b + 1) * p]
                    .copy_from_slice(&gout[(b * g.cout + c) * p..(b * g.cout + c + 1) * p]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let col = im2col(exec, g, x, grp);
            gemm(
                exec,
                &gg,
                &col,
                &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k],
                cout_g,
                cols,
                k,
                false,
                true,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let mut dcol = vec![T::zero(); k * cols];
            gemm(exec, wg, &gg, &mut dcol, k, cout_g, cols, true, false);
            col2im_add(g, &dcol, grp, dx);
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_range_matches_bruteforce() {
        for inp in 1..9 {
            for k in 0..5 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        let kernel = 5;
                        if inp + 2 * pad < kernel {
                            continue;
                        }
                        let out = (inp + 2 * pad - kernel) / stride + 1;
                        let (lo, hi) = tap_range(k, pad, stride, inp, out);
                        for o in 0..out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let valid = i >= 0 && (i as usize) < inp;
                            assert_eq!(valid, o >= lo && o < hi, "inp={inp} k={k} pad={pad} s={stride} o={o}");
                        }
                    }
                }
            }
        }
    }
}
