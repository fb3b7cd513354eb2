//! Average pooling that excludes padded cells from the divisor.

use crate::element::Element;
use crate::parallel::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl PoolGeom {
    // [lo, hi) input window for output position o along an axis of length n
    fn window(&self, o: usize, n: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize) as usize).min(n);
        (lo, hi)
    }
}

pub fn avg_pool_forward<T: Element>(exec: Exec, g: &PoolGeom, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.planes * g.hout * g.wout];
    exec.chunks_mut(&mut out, g.hout * g.wout, g.k * g.k, |p, o| {
        let xp = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.hout {
            let (y0, y1) = g.window(oy, g.h);
            for ox in 0..g.wout {
                let (x0, x1) = g.window(ox, g.w);
                let mut s = 0.0f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        s += xp[iy * g.w + ix].as_f64();
                    }
                }
                o[oy * g.wout + ox] = T::from_f64(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    });
    out
}

pub fn avg_pool_backward<T: Element>(exec: Exec, g: &PoolGeom, gout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); g.planes * g.h * g.w];
    exec.chunks_mut(&mut dx, g.h * g.w, g.k * g.k, |p, d| {
        let gp = &gout[p * g.hout * g.wout..(p + 1) * g.hout * g.wout];
        for oy in 0..g.hout {
            let (y0, y1) = g.window(oy, g.h);
            for ox in 0..g.wout {
                let (x0, x1) = g.window(ox, g.w);
                let share = gp[oy * g.wout + ox] / T::from_usize((y1 - y0) * (x1 - x0));
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        d[iy * g.w + ix] += share;
                    }
                }
            }
        }
    });
    dx
}
