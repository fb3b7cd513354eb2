//! Token layout conversions and window manipulation.
//!
//! Feature maps are `B x C x H x W`; token maps are `B x N x C` with tokens in
//! row-major `(H, W)` order. The `_cl` helpers work on channel-last
//! `B x H x W x C` maps.

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// `sw x W` stripes.
    Horizontal,
    /// `H x sw` stripes.
    Vertical,
}

fn fm_dims(op: &'static str, x: &[usize]) -> Result<[usize; 4]> {
    match x {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, format!("expected B x C x H x W, got {x:?}"))),
    }
}

/// φ: `B x C x H x W` to `B x HW x C`.
pub fn to_tokens<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let [b, c, h, w] = fm_dims("to_tokens", &x.dims())?;
    x.reshape(&[b, c, h * w])?.permute(&[0, 2, 1])
}

/// φ̃: `B x N x C` to `B x C x H x W`, requiring `N == H * W`.
pub fn from_tokens<'t, T: Element>(x: Var<'t, T>, hw: (usize, usize)) -> Result<Var<'t, T>> {
    let d = x.dims();
    let (h, w) = hw;
    if d.len() != 3 || d[1] != h * w {
        return Err(Error::shape("from_tokens", format!("tokens {d:?} do not factor as {h} x {w}")));
    }
    x.permute(&[0, 2, 1])?.reshape(&[d[0], d[2], h, w])
}

pub(crate) fn partition_cl<'t, T: Element>(x: Var<'t, T>, wh: usize, ww: usize) -> Result<Var<'t, T>> {
    let d = x.dims();
    let [b, h, w, c] = [d[0], d[1], d[2], d[3]];
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::shape("window_partition", format!("extent {h} x {w} not divisible by window {wh} x {ww}")));
    }
    let (nh, nw) = (h / wh, w / ww);
    if nh == 1 && nw == 1 {
        return x.reshape(&[b, h * w, c]);
    }
    x.reshape(&[b, nh, wh, nw, ww, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nh * nw, wh * ww, c])
}

pub(crate) fn reverse_cl<'t, T: Element>(
    win: Var<'t, T>,
    b: usize,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> Result<Var<'t, T>> {
    let d = win.dims();
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 || d.len() != 3 || d[0] * d[1] != b * h * w {
        return Err(Error::shape("window_reverse", format!("windows {d:?} for {b} x {h} x {w} with {wh} x {ww}")));
    }
    let c = d[2];
    let (nh, nw) = (h / wh, w / ww);
    if nh == 1 && nw == 1 {
        return win.reshape(&[b, h, w, c]);
    }
    win.reshape(&[b, nh, nw, wh, ww, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, w, c])
}

/// Splits a feature map into `wh x ww` windows: `B·nW x wh·ww x C`.
pub fn window_partition_rect<'t, T: Element>(x: Var<'t, T>, wh: usize, ww: usize) -> Result<Var<'t, T>> {
    fm_dims("window_partition", &x.dims())?;
    partition_cl(x.permute(&[0, 2, 3, 1])?, wh, ww)
}

pub fn window_reverse_rect<'t, T: Element>(
    win: Var<'t, T>,
    b: usize,
    h: usize,
    w: usize,
    wh: usize,
    ww: usize,
) -> Result<Var<'t, T>> {
    reverse_cl(win, b, h, w, wh, ww)?.permute(&[0, 3, 1, 2])
}

pub fn window_partition<'t, T: Element>(x: Var<'t, T>, window: usize) -> Result<Var<'t, T>> {
    window_partition_rect(x, window, window)
}

pub fn window_reverse<'t, T: Element>(
    win: Var<'t, T>,
    b: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Result<Var<'t, T>> {
    window_reverse_rect(win, b, h, w, window, window)
}

pub fn stripe_window(h: usize, w: usize, sw: usize, o: Orientation) -> (usize, usize) {
    match o {
        Orientation::Horizontal => (sw, w),
        Orientation::Vertical => (h, sw),
    }
}

pub fn stripe_partition<'t, T: Element>(x: Var<'t, T>, sw: usize, o: Orientation) -> Result<Var<'t, T>> {
    let [_, _, h, w] = fm_dims("stripe_partition", &x.dims())?;
    let (wh, ww) = stripe_window(h, w, sw, o);
    window_partition_rect(x, wh, ww)
}

pub fn stripe_reverse<'t, T: Element>(
    win: Var<'t, T>,
    b: usize,
    h: usize,
    w: usize,
    sw: usize,
    o: Orientation,
) -> Result<Var<'t, T>> {
    let (wh, ww) = stripe_window(h, w, sw, o);
    window_reverse_rect(win, b, h, w, wh, ww)
}

/// Torus roll of the spatial axes of a feature map.
pub fn cyclic_shift<'t, T: Element>(x: Var<'t, T>, shift: (isize, isize)) -> Result<Var<'t, T>> {
    fm_dims("cyclic_shift", &x.dims())?;
    roll_axes(x, (2, 3), shift)
}

pub(crate) fn roll_axes<'t, T: Element>(x: Var<'t, T>, axes: (usize, usize), shift: (isize, isize)) -> Result<Var<'t, T>> {
    let d = x.dims();
    let mut y = x;
    for (axis, s) in [(axes.0, shift.0), (axes.1, shift.1)] {
        if s.rem_euclid(d[axis] as isize) != 0 {
            y = y.roll(axis, s)?;
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn iota(dims: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(dims, |i| i as f64)
    }

    #[test]
    fn phi_row_major() {
        let tape = Tape::new();
        let x = tape.constant(iota([1, 1, 2, 2]));
        let t = to_tokens(x).unwrap();
        assert_eq!(t.dims(), vec![1, 4, 1]);
        assert_eq!(t.value().data(), &[0.0, 1.0, 2.0, 3.0]);
        let back = from_tokens(t, (2, 2)).unwrap().value();
        assert!(back.bit_eq(&x.value()));
        assert!(matches!(from_tokens(t, (3, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn windows_of_4x4() {
        let tape = Tape::new();
        let x = tape.constant(iota([1, 1, 4, 4]));
        let p = window_partition(x, 2).unwrap();
        assert_eq!(p.dims(), vec![4, 4, 1]);
        assert_eq!(
            p.value().data(),
            &[0., 1., 4., 5., 2., 3., 6., 7., 8., 9., 12., 13., 10., 11., 14., 15.]
        );
        let r = window_reverse(p, 1, 4, 4, 2).unwrap();
        assert!(r.value().bit_eq(&x.value()));
        let g = window_partition(x, 4).unwrap();
        assert_eq!(g.dims(), vec![1, 16, 1]);
        assert!(window_partition(x, 3).is_err());
    }

    #[test]
    fn stripes_of_4x4() {
        let tape = Tape::new();
        let x = tape.constant(iota([1, 1, 4, 4]));
        let h = stripe_partition(x, 2, Orientation::Horizontal).unwrap();
        assert_eq!(h.dims(), vec![2, 8, 1]);
        assert_eq!(&h.value().data()[..8], &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let v = stripe_partition(x, 2, Orientation::Vertical).unwrap();
        assert_eq!(&v.value().data()[..8], &[0., 1., 4., 5., 8., 9., 12., 13.]);
        let g = stripe_partition(x, 4, Orientation::Horizontal).unwrap();
        assert_eq!(g.dims(), vec![1, 16, 1]);
        for (s, o) in [(h, Orientation::Horizontal), (v, Orientation::Vertical)] {
            let r = stripe_reverse(s, 1, 4, 4, 2, o).unwrap();
            assert!(r.value().bit_eq(&x.value()));
        }
    }

    #[test]
    fn shift_examples() {
        let tape = Tape::new();
        let x = tape.constant(iota([1, 1, 2, 2]));
        assert_eq!(cyclic_shift(x, (1, 1)).unwrap().value().data(), &[3.0, 2.0, 1.0, 0.0]);
        assert!(cyclic_shift(x, (0, 0)).unwrap().value().bit_eq(&x.value()));
        assert!(cyclic_shift(x, (2, 2)).unwrap().value().bit_eq(&x.value()));
        let y = tape.constant(iota([2, 3, 5, 4]));
        let s = cyclic_shift(cyclic_shift(y, (-2, 3)).unwrap(), (2, -3)).unwrap();
        assert!(s.value().bit_eq(&y.value()));
    }
}
