//! Primitive operations: forward evaluation and the backward rule of each.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::kernels::{broadcast, conv, gemm, layout, norm, pool};
use crate::parallel::Exec;
use crate::tensor::{numel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf { requires_grad: bool },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Reciprocal,
    Sqrt,
    Gelu,
    Scale(f64),
    AddScalar(f64),
    MatMul { trans_a: bool, trans_b: bool },
    Sum { axes: Vec<usize>, keep_dims: bool },
    Mean { axes: Vec<usize>, keep_dims: bool },
    BroadcastTo { dims: Vec<usize> },
    Permute { perm: Vec<usize> },
    Reshape { dims: Vec<usize> },
    Slice { axis: usize, start: usize, len: usize },
    Pad { axis: usize, before: usize, after: usize, value: f64 },
    Concat { axis: usize },
    Roll { axis: usize, shift: isize },
    Conv2d { stride: (usize, usize), padding: (usize, usize), groups: usize },
    AvgPool2d { kernel: usize, stride: usize, padding: usize },
    LayerNorm { eps: f64 },
    Softmax,
    LogSoftmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Reciprocal => "reciprocal",
            Op::Sqrt => "sqrt",
            Op::Gelu => "gelu",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::BroadcastTo { .. } => "broadcast",
            Op::Permute { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Concat { .. } => "concat",
            Op::Roll { .. } => "roll",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        let ok = match self {
            Op::Leaf { .. } => n == 0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul { .. } => n == 2,
            Op::Concat { .. } => n >= 1,
            Op::Conv2d { .. } => n == 2 || n == 3,
            Op::LayerNorm { .. } => n == 3,
            _ => n == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("{} does not take {n} inputs", self.name())))
        }
    }
}

fn dims_str(ts: &[&Tensor<impl Element>]) -> String {
    ts.iter()
        .map(|t| format!("{:?}", t.dims()))
        .collect::<Vec<_>>()
        .join(" vs ")
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Element>(x: T) -> T {
    let xf = x.as_f64();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * PI).sqrt();
    let _ = std_normal_cdf;
    let cdf = T::from_f64(0.5) * (T::one() + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    cdf + x * T::from_f64(pdf)
}

pub(crate) struct MatMulShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_shared: bool,
    pub out_dims: Vec<usize>,
}

pub(crate) fn matmul_shape(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<MatMulShape> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return None;
    }
    let abatch = &a[..a.len() - 2];
    let b_shared = b.len() == 2;
    if !b_shared && abatch != &b[..b.len() - 2] {
        return None;
    }
    let mut out_dims = abatch.to_vec();
    out_dims.extend([m, n]);
    Some(MatMulShape {
        batch: abatch.iter().product(),
        m,
        k,
        n,
        b_shared,
        out_dims,
    })
}

fn reduced_dims(dims: &[usize], axes: &[usize], keep: bool) -> Vec<usize> {
    if keep {
        dims.iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect()
    } else {
        dims.iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    }
}

fn check_axes(op: &'static str, axes: &[usize], rank: usize) -> Result<()> {
    for (i, &a) in axes.iter().enumerate() {
        if a >= rank || axes[..i].contains(&a) {
            return Err(Error::shape(op, format!("bad axes {axes:?} for rank {rank}")));
        }
    }
    Ok(())
}

pub(crate) fn conv_geom(
    x: &[usize],
    w: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<conv::ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape("conv2d", format!("input {x:?} and weight {w:?} must be rank 4")));
    }
    let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (w[0], w[1], w[2], w[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::shape(
            "conv2d",
            format!("input {x:?} incompatible with weight {w:?} at groups={groups}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 || h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
        return Err(Error::shape(
            "conv2d",
            format!("non-positive output extent for input {x:?}, kernel {kh}x{kw}, padding {padding:?}"),
        ));
    }
    Ok(conv::ConvGeom {
        batch,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        sh: stride.0,
        sw: stride.1,
        ph: padding.0,
        pw: padding.1,
        groups,
        hout: (h + 2 * padding.0 - kh) / stride.0 + 1,
        wout: (wd + 2 * padding.1 - kw) / stride.1 + 1,
    })
}

fn pool_geom(x: &[usize], kernel: usize, stride: usize, padding: usize) -> Result<pool::PoolGeom> {
    if x.len() != 4 || kernel == 0 || stride == 0 || x[2] + 2 * padding < kernel || x[3] + 2 * padding < kernel || padding >= kernel {
        return Err(Error::shape("avg_pool2d", format!("input {x:?} with kernel {kernel}, stride {stride}, padding {padding}")));
    }
    Ok(pool::PoolGeom {
        planes: x[0] * x[1],
        h: x[2],
        w: x[3],
        k: kernel,
        stride,
        pad: padding,
        hout: (x[2] + 2 * padding - kernel) / stride + 1,
        wout: (x[3] + 2 * padding - kernel) / stride + 1,
    })
}

fn unary<T: Element>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    x.map(f)
}

pub(crate) fn forward<T: Element>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    op.check_arity(inputs.len())?;
    let exec = Exec::auto();
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let (a, b) = (inputs[0], inputs[1]);
        let out = broadcast::broadcast_dims(a.dims(), b.dims()).ok_or_else(|| {
            Error::shape(op.name(), format!("cannot broadcast {}", dims_str(inputs)))
        })?;
        let data = broadcast::binary(a.data(), a.dims(), b.data(), b.dims(), &out, f);
        Ok(Tensor::from_parts(out, data))
    };
    Ok(match op {
        Op::Leaf { .. } => return Err(Error::Usage("leaf nodes have no forward rule".into())),
        Op::Add => binary(|a, b| a + b)?,
        Op::Sub => binary(|a, b| a - b)?,
        Op::Mul => binary(|a, b| a * b)?,
        Op::Div => binary(|a, b| a / b)?,
        Op::Neg => unary(inputs[0], |v| -v),
        Op::Exp => unary(inputs[0], |v| v.exp()),
        Op::Log => unary(inputs[0], |v| v.ln()),
        Op::Reciprocal => unary(inputs[0], |v| v.recip()),
        Op::Sqrt => unary(inputs[0], |v| v.sqrt()),
        Op::Gelu => unary(inputs[0], gelu),
        Op::Scale(s) => {
            let s = T::from_f64(*s);
            unary(inputs[0], |v| v * s)
        }
        Op::AddScalar(s) => {
            let s = T::from_f64(*s);
            unary(inputs[0], |v| v + s)
        }
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (inputs[0], inputs[1]);
            let s = matmul_shape(a.dims(), b.dims(), *trans_a, *trans_b).ok_or_else(|| {
                Error::shape("matmul", format!("incompatible operands {}", dims_str(inputs)))
            })?;
            let mut c = vec![T::zero(); numel(&s.out_dims)];
            gemm::gemm_batched(
                exec, a.data(), b.data(), &mut c, s.batch, s.m, s.k, s.n, *trans_a, *trans_b, s.b_shared,
            );
            Tensor::from_parts(s.out_dims, c)
        }
        Op::Sum { axes, keep_dims } | Op::Mean { axes, keep_dims } => {
            let x = inputs[0];
            check_axes(op.name(), axes, x.rank())?;
            let kept = reduced_dims(x.dims(), axes, true);
            let mut data = broadcast::reduce_to(x.data(), x.dims(), &kept);
            if matches!(op, Op::Mean { .. }) {
                let count = T::from_usize(x.numel() / data.len());
                for v in &mut data {
                    *v /= count;
                }
            }
            Tensor::from_parts(reduced_dims(x.dims(), axes, *keep_dims), data)
        }
        Op::BroadcastTo { dims } => {
            let x = inputs[0];
            match broadcast::broadcast_dims(x.dims(), dims) {
                Some(out) if &out == dims => {
                    Tensor::from_parts(dims.clone(), broadcast::broadcast_to(x.data(), x.dims(), dims))
                }
                _ => {
                    return Err(Error::shape(
                        "broadcast",
                        format!("cannot broadcast {:?} to {dims:?}", x.dims()),
                    ))
                }
            }
        }
        Op::Permute { perm } => {
            let x = inputs[0];
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(Error::shape(
                    "transpose",
                    format!("permutation {perm:?} invalid for {:?}", x.dims()),
                ));
            }
            Tensor::from_parts(
                layout::permuted_dims(x.dims(), perm),
                layout::permute(x.data(), x.dims(), perm),
            )
        }
        Op::Reshape { dims } => inputs[0].reshape(dims.clone())?,
        Op::Slice { axis, start, len } => {
            let x = inputs[0];
            if *axis >= x.rank() || *len == 0 || start + len > x.dims()[*axis] {
                return Err(Error::shape(
                    "slice",
                    format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.dims()),
                ));
            }
            let mut dims = x.dims().to_vec();
            dims[*axis] = *len;
            Tensor::from_parts(dims, layout::slice(x.data(), x.dims(), *axis, *start, *len))
        }
        Op::Pad { axis, before, after, value } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(Error::shape("pad", format!("axis {axis} of {:?}", x.dims())));
            }
            let mut dims = x.dims().to_vec();
            dims[*axis] += before + after;
            let data = layout::pad(x.data(), x.dims(), *axis, *before, *after, T::from_f64(*value));
            Tensor::from_parts(dims, data)
        }
        Op::Concat { axis } => {
            let first = inputs[0].dims();
            for t in inputs {
                let d = t.dims();
                let same = d.len() == first.len()
                    && *axis < d.len()
                    && d.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !same {
                    return Err(Error::shape("concat", format!("along axis {axis}: {}", dims_str(inputs))));
                }
            }
            let parts: Vec<(&[T], &[usize])> = inputs.iter().map(|t| (t.data(), t.dims())).collect();
            let mut dims = first.to_vec();
            dims[*axis] = inputs.iter().map(|t| t.dims()[*axis]).sum();
            Tensor::from_parts(dims, layout::concat(&parts, *axis))
        }
        Op::Roll { axis, shift } => {
            let x = inputs[0];
            if *axis >= x.rank() {
                return Err(Error::shape("roll", format!("axis {axis} of {:?}", x.dims())));
            }
            Tensor::from_parts(x.dims().to_vec(), layout::roll(x.data(), x.dims(), *axis, *shift))
        }
        Op::Conv2d { stride, padding, groups } => {
            let (x, w) = (inputs[0], inputs[1]);
            let g = conv_geom(x.dims(), w.dims(), *stride, *padding, *groups)?;
            let bias = inputs.get(2).map(|b| b.data());
            if let Some(b) = inputs.get(2) {
                if b.dims() != [g.cout] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {} output channels", b.dims(), g.cout)));
                }
            }
            let out = conv::forward(exec, &g, x.data(), w.data(), bias);
            Tensor::from_parts(vec![g.batch, g.cout, g.hout, g.wout], out)
        }
        Op::AvgPool2d { kernel, stride, padding } => {
            let x = inputs[0];
            let g = pool_geom(x.dims(), *kernel, *stride, *padding)?;
            Tensor::from_parts(
                vec![x.dims()[0], x.dims()[1], g.hout, g.wout],
                pool::avg_pool_forward(exec, &g, x.data()),
            )
        }
        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let c = *x.dims().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
            if gamma.dims() != [c] || beta.dims() != [c] {
                return Err(Error::shape("layer_norm", format!("affine params for {}", dims_str(inputs))));
            }
            let y = norm::layer_norm_forward(exec, x.data(), gamma.data(), beta.data(), c, T::from_f64(*eps));
            Tensor::from_parts(x.dims().to_vec(), y)
        }
        Op::Softmax | Op::LogSoftmax => {
            let x = inputs[0];
            let c = *x.dims().last().ok_or_else(|| Error::shape(op.name(), "scalar input"))?;
            let y = norm::softmax_forward(exec, x.data(), c, matches!(op, Op::LogSoftmax));
            Tensor::from_parts(x.dims().to_vec(), y)
        }
    })
}

fn t<T: Element>(dims: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(dims.to_vec(), data)
}

fn elementwise<T: Element>(x: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    t(x.dims(), x.data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect())
}

/// Gradients for each input given the output gradient `g`. Entries are
/// `None` where `needs` is false.
pub(crate) fn backward<T: Element>(
    op: &Op,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let exec = Exec::auto();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    let od = out.dims();
    let reduce = |data: Vec<T>, target: &Tensor<T>| -> Tensor<T> {
        t(target.dims(), broadcast::reduce_to(&data, od, target.dims()))
    };
    let bcast = |x: &Tensor<T>| -> Vec<T> {
        if x.dims() == od {
            x.data().to_vec()
        } else {
            broadcast::broadcast_to(x.data(), x.dims(), od)
        }
    };
    match op {
        Op::Leaf { .. } => {}
        Op::Add | Op::Sub => {
            if needs[0] {
                grads[0] = Some(reduce(g.data().to_vec(), inputs[0]));
            }
            if needs[1] {
                let data = if matches!(op, Op::Sub) {
                    g.data().iter().map(|&v| -v).collect()
                } else {
                    g.data().to_vec()
                };
                grads[1] = Some(reduce(data, inputs[1]));
            }
        }
        Op::Mul => {
            if needs[0] {
                let b = bcast(inputs[1]);
                grads[0] = Some(reduce(g.data().iter().zip(&b).map(|(&x, &y)| x * y).collect(), inputs[0]));
            }
            if needs[1] {
                let a = bcast(inputs[0]);
                grads[1] = Some(reduce(g.data().iter().zip(&a).map(|(&x, &y)| x * y).collect(), inputs[1]));
            }
        }
        Op::Div => {
            let b = bcast(inputs[1]);
            if needs[0] {
                grads[0] = Some(reduce(g.data().iter().zip(&b).map(|(&x, &y)| x / y).collect(), inputs[0]));
            }
            if needs[1] {
                // d(a/b)/db = -out / b
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(&b)
                    .map(|((&gv, &o), &bv)| -gv * o / bv)
                    .collect();
                grads[1] = Some(reduce(data, inputs[1]));
            }
        }
        Op::Neg => grads[0] = Some(g.map(|v| -v)),
        Op::Exp => grads[0] = Some(elementwise(out, g, |y, gv| y * gv)),
        Op::Log => grads[0] = Some(elementwise(inputs[0], g, |x, gv| gv / x)),
        Op::Reciprocal => grads[0] = Some(elementwise(out, g, |y, gv| -gv * y * y)),
        Op::Sqrt => grads[0] = Some(elementwise(out, g, |y, gv| gv / (y + y))),
        Op::Gelu => grads[0] = Some(elementwise(inputs[0], g, |x, gv| gv * gelu_grad(x))),
        Op::Scale(s) => {
            let s = T::from_f64(*s);
            grads[0] = Some(g.map(|v| v * s));
        }
        Op::AddScalar(_) => grads[0] = Some(g.clone()),
        Op::MatMul { trans_a: ta, trans_b: tb } => {
            let (a, b) = (inputs[0], inputs[1]);
            let s = matmul_shape(a.dims(), b.dims(), *ta, *tb).expect("validated in forward");
            let (m, k, n) = (s.m, s.k, s.n);
            if needs[0] {
                let mut da = vec![T::zero(); a.numel()];
                if *ta {
                    // dA = op(B) · Gᵀ, stored k x m
                    for bi in 0..s.batch {
                        let bb = if s.b_shared { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
                        gemm::gemm(exec, bb, &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut da[bi * m * k..(bi + 1) * m * k], k, n, m, *tb, true);
                    }
                } else {
                    // dA = G · op(B)ᵀ
                    gemm::gemm_batched(exec, g.data(), b.data(), &mut da, s.batch, m, n, k, false, !tb, s.b_shared);
                }
                grads[0] = Some(t(a.dims(), da));
            }
            if needs[1] {
                let mut db = vec![T::zero(); b.numel()];
                let mut part = vec![T::zero(); k * n];
                let mut db_acc = vec![0.0f64; if s.b_shared { k * n } else { 0 }];
                for bi in 0..s.batch {
                    let ab = &a.data()[bi * m * k..(bi + 1) * m * k];
                    let gb = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let dst = if s.b_shared { &mut part[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
                    if *tb {
                        // dB = Gᵀ · op(A), stored n x k
                        gemm::gemm(exec, gb, ab, dst, n, m, k, true, *ta);
                    } else {
                        // dB = op(A)ᵀ · G
                        gemm::gemm(exec, ab, gb, dst, k, m, n, !ta, false);
                    }
                    if s.b_shared {
                        for (d, &p) in db_acc.iter_mut().zip(&part) {
                            *d += p.as_f64();
                        }
                    }
                }
                if s.b_shared {
                    for (d, &v) in db.iter_mut().zip(&db_acc) {
                        *d = T::from_f64(v);
                    }
                }
                grads[1] = Some(t(b.dims(), db));
            }
        }
        Op::Sum { axes, .. } | Op::Mean { axes, .. } => {
            let x = inputs[0];
            let kept = reduced_dims(x.dims(), axes, true);
            let mut data = broadcast::broadcast_to(g.data(), &kept, x.dims());
            if matches!(op, Op::Mean { .. }) {
                let count = T::from_usize(x.numel() / numel(&kept));
                for v in &mut data {
                    *v /= count;
                }
            }
            grads[0] = Some(t(x.dims(), data));
        }
        Op::BroadcastTo { .. } => grads[0] = Some(reduce(g.data().to_vec(), inputs[0])),
        Op::Permute { perm } => {
            let inv = layout::inverse_perm(perm);
            grads[0] = Some(t(inputs[0].dims(), layout::permute(g.data(), od, &inv)));
        }
        Op::Reshape { .. } => grads[0] = Some(g.reshape(inputs[0].dims().to_vec())?),
        Op::Slice { axis, start, len } => {
            grads[0] = Some(t(inputs[0].dims(), layout::unslice(g.data(), inputs[0].dims(), *axis, *start, *len)));
        }
        Op::Pad { axis, before, .. } => {
            let n = inputs[0].dims()[*axis];
            grads[0] = Some(t(inputs[0].dims(), layout::slice(g.data(), od, *axis, *before, n)));
        }
        Op::Concat { axis } => {
            let mut start = 0;
            for (i, x) in inputs.iter().enumerate() {
                let n = x.dims()[*axis];
                if needs[i] {
                    grads[i] = Some(t(x.dims(), layout::slice(g.data(), od, *axis, start, n)));
                }
                start += n;
            }
        }
        Op::Roll { axis, shift } => {
            grads[0] = Some(t(od, layout::roll(g.data(), od, *axis, -*shift)));
        }
        Op::Conv2d { stride, padding, groups } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geom = conv_geom(x.dims(), w.dims(), *stride, *padding, *groups)?;
            let need = [needs[0], needs[1], needs.get(2).copied().unwrap_or(false)];
            let [dx, dw, db] = conv::backward(exec, &geom, x.data(), w.data(), g.data(), need);
            grads[0] = dx.map(|d| t(x.dims(), d));
            grads[1] = dw.map(|d| t(w.dims(), d));
            if inputs.len() == 3 {
                grads[2] = db.map(|d| t(inputs[2].dims(), d));
            }
        }
        Op::AvgPool2d { kernel, stride, padding } => {
            let geom = pool_geom(inputs[0].dims(), *kernel, *stride, *padding)?;
            grads[0] = Some(t(inputs[0].dims(), pool::avg_pool_backward(exec, &geom, g.data())));
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (inputs[0], inputs[1]);
            let c = gamma.numel();
            let (dx, dgamma, dbeta) =
                norm::layer_norm_backward(exec, x.data(), gamma.data(), g.data(), c, T::from_f64(*eps));
            grads[0] = Some(t(x.dims(), dx));
            grads[1] = Some(t(&[c], dgamma));
            grads[2] = Some(t(&[c], dbeta));
        }
        Op::Softmax | Op::LogSoftmax => {
            let c = *od.last().expect("validated in forward");
            let dx = norm::softmax_backward(exec, out.data(), g.data(), c, matches!(op, Op::LogSoftmax));
            grads[0] = Some(t(od, dx));
        }
    }
    for (slot, &need) in grads.iter_mut().zip(needs) {
        if !need {
            *slot = None;
        }
    }
    Ok(grads)
}
