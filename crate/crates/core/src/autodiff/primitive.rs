//! Name-addressed access to primitives, for callers that build graphs from
//! data rather than code.

use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::op::Op;
use super::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Float(f64),
    Bool(bool),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, Attr>;

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "exp", "log", "reciprocal", "sqrt", "gelu", "scale",
    "add_scalar", "matmul", "sum", "mean", "broadcast", "transpose", "reshape", "slice", "pad",
    "concat", "roll", "conv2d", "avg_pool2d", "layer_norm", "softmax", "log_softmax",
];

struct Reader<'a> {
    kind: &'a str,
    attrs: &'a Attrs,
}

impl Reader<'_> {
    fn missing(&self, key: &str) -> Error {
        Error::Usage(format!("{} needs attribute `{key}`", self.kind))
    }

    fn int(&self, key: &str) -> Result<i64> {
        match self.attrs.get(key) {
            Some(Attr::Int(v)) => Ok(*v),
            Some(_) => Err(Error::Usage(format!("{}: attribute `{key}` must be an integer", self.kind))),
            None => Err(self.missing(key)),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        usize::try_from(self.int(key)?)
            .map_err(|_| Error::Usage(format!("{}: attribute `{key}` must be non-negative", self.kind)))
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        if self.attrs.contains_key(key) {
            self.usize(key)
        } else {
            Ok(default)
        }
    }

    fn float(&self, key: &str) -> Result<f64> {
        match self.attrs.get(key) {
            Some(Attr::Float(v)) => Ok(*v),
            Some(Attr::Int(v)) => Ok(*v as f64),
            Some(_) => Err(Error::Usage(format!("{}: attribute `{key}` must be a number", self.kind))),
            None => Err(self.missing(key)),
        }
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.attrs.get(key) {
            Some(Attr::Bool(v)) => Ok(*v),
            Some(_) => Err(Error::Usage(format!("{}: attribute `{key}` must be a boolean", self.kind))),
            None => Ok(default),
        }
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        match self.attrs.get(key) {
            Some(Attr::Ints(v)) => v
                .iter()
                .map(|&i| usize::try_from(i))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Usage(format!("{}: attribute `{key}` must be non-negative", self.kind))),
            Some(_) => Err(Error::Usage(format!("{}: attribute `{key}` must be an integer list", self.kind))),
            None => Err(self.missing(key)),
        }
    }

    fn axes(&self, rank: usize) -> Result<Vec<usize>> {
        if self.attrs.contains_key("axes") {
            self.usizes("axes")
        } else {
            Ok((0..rank).collect())
        }
    }
}

/// Resolves a primitive id and its attributes to an op.
pub fn parse_op(kind: &str, attrs: &Attrs, first_rank: usize) -> Result<Op> {
    let r = Reader { kind, attrs };
    Ok(match kind {
        "add" => Op::Add,
        "sub" => Op::Sub,
        "mul" => Op::Mul,
        "div" => Op::Div,
        "neg" => Op::Neg,
        "exp" => Op::Exp,
        "log" => Op::Log,
        "reciprocal" => Op::Reciprocal,
        "sqrt" => Op::Sqrt,
        "gelu" => Op::Gelu,
        "scale" => Op::Scale(r.float("factor")?),
        "add_scalar" => Op::AddScalar(r.float("value")?),
        "matmul" => Op::MatMul { trans_a: r.bool_or("trans_a", false)?, trans_b: r.bool_or("trans_b", false)? },
        "sum" => Op::Sum { axes: r.axes(first_rank)?, keep_dims: r.bool_or("keep_dims", false)? },
        "mean" => Op::Mean { axes: r.axes(first_rank)?, keep_dims: r.bool_or("keep_dims", false)? },
        "broadcast" => Op::BroadcastTo { dims: r.usizes("dims")? },
        "transpose" => {
            let perm = if attrs.contains_key("perm") {
                r.usizes("perm")?
            } else {
                (0..first_rank).rev().collect()
            };
            Op::Permute { perm }
        }
        "reshape" => Op::Reshape { dims: r.usizes("dims")? },
        "slice" => Op::Slice { axis: r.usize("axis")?, start: r.usize("start")?, len: r.usize("len")? },
        "pad" => Op::Pad {
            axis: r.usize("axis")?,
            before: r.usize_or("before", 0)?,
            after: r.usize_or("after", 0)?,
            value: if attrs.contains_key("value") { r.float("value")? } else { 0.0 },
        },
        "concat" => Op::Concat { axis: r.usize("axis")? },
        "roll" => Op::Roll { axis: r.usize("axis")?, shift: r.int("shift")? as isize },
        "conv2d" => {
            let s = r.usize_or("stride", 1)?;
            let p = r.usize_or("padding", 0)?;
            Op::Conv2d { stride: (s, s), padding: (p, p), groups: r.usize_or("groups", 1)? }
        }
        "avg_pool2d" => Op::AvgPool2d {
            kernel: r.usize("kernel")?,
            stride: r.usize_or("stride", 1)?,
            padding: r.usize_or("padding", 0)?,
        },
        "layer_norm" => Op::LayerNorm { eps: if attrs.contains_key("eps") { r.float("eps")? } else { 1e-6 } },
        "softmax" => Op::Softmax,
        "log_softmax" => Op::LogSoftmax,
        _ => return Err(Error::Usage(format!("unknown primitive `{kind}`"))),
    })
}

impl<T: Element> Tape<T> {
    /// Records the primitive named `kind` on this tape.
    pub fn forward_primitive<'t>(&'t self, kind: &str, inputs: &[Var<'t, T>], attrs: &Attrs) -> Result<Var<'t, T>> {
        let rank = inputs.first().map_or(0, |v| v.rank());
        let op = parse_op(kind, attrs, rank)?;
        self.apply(op, inputs)
    }
}

/// Evaluates a single primitive on plain tensors.
pub fn forward_primitive<T: Element>(kind: &str, inputs: &[Tensor<T>], attrs: &Attrs) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(tape.forward_primitive(kind, &vars, attrs)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(pairs: &[(&str, Attr)]) -> Attrs {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::<f32>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = forward_primitive("matmul", &[a.clone(), i], &Attrs::new()).unwrap();
        assert!(c.bit_eq(&a));
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::<f32>::ones([2, 3]);
        let s = forward_primitive("sum", &[x], &Attrs::new()).unwrap();
        assert_eq!(s.dims(), &[] as &[usize]);
        assert_eq!(s.item(), Some(6.0));
    }

    #[test]
    fn exp_of_log2() {
        let x = Tensor::<f64>::from_f64([2], &[0.0, std::f64::consts::LN_2]).unwrap();
        let y = forward_primitive("exp", &[x], &Attrs::new()).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_primitive_is_usage_error() {
        let x = Tensor::<f32>::ones([2]);
        let err = forward_primitive("frobnicate", &[x], &Attrs::new()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "{err}");
    }

    #[test]
    fn shape_error_names_primitive_and_shapes() {
        let a = Tensor::<f32>::ones([2, 3]);
        let b = Tensor::<f32>::ones([2, 3]);
        let err = forward_primitive("matmul", &[a, b], &Attrs::new()).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
        let err = forward_primitive("add", &[Tensor::<f32>::ones([2, 3]), Tensor::ones([4])], &Attrs::new())
            .unwrap_err();
        assert!(err.to_string().contains("[2, 3] vs [4]"));
    }

    #[test]
    fn attrs_parse() {
        let x = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let y = forward_primitive("transpose", &[x.clone()], &Attrs::new()).unwrap();
        assert_eq!(y.dims(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let s = forward_primitive("slice", &[x.clone()], &attrs(&[("axis", Attr::Int(1)), ("start", Attr::Int(1)), ("len", Attr::Int(2))])).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 4.0, 5.0]);
        let m = forward_primitive("sum", &[x], &attrs(&[("axes", Attr::Ints(vec![0])), ("keep_dims", Attr::Bool(true))])).unwrap();
        assert_eq!(m.dims(), &[1, 3]);
        assert_eq!(m.data(), &[3.0, 5.0, 7.0]);
        let err = parse_op("slice", &Attrs::new(), 2).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }
}
