use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: (usize, usize),
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, `groups = 1`, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding: (padding, padding),
            groups: 1,
            bias: true,
        }
    }

    /// Depthwise `k x k` convolution with "same" padding.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec { groups: channels, ..Self::new(channels, channels, kernel, 1, kernel / 2) }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(Error::Config(format!(
                "conv channels {}->{} not divisible by groups {g}",
                self.in_channels, self.out_channels
            )));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::Config(format!("degenerate conv kernel {:?} / stride {}", self.kernel, self.stride)));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = self.padding;
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / self.stride + 1, (w + 2 * pw - kw) / self.stride + 1))
    }

    pub fn param_count(&self) -> usize {
        self.weight_dims().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }
}

pub fn conv2d<'t, T: Element>(
    x: Var<'t, T>,
    spec: &ConvSpec,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let xd = x.dims();
    if xd.len() != 4 || xd[1] != spec.in_channels {
        return Err(Error::shape("conv2d", format!("input {xd:?} for {} input channels", spec.in_channels)));
    }
    if weight.dims() != spec.weight_dims() {
        return Err(Error::shape("conv2d", format!("weight {:?} vs spec {:?}", weight.dims(), spec.weight_dims())));
    }
    x.conv2d(weight, bias, (spec.stride, spec.stride), spec.padding, spec.groups)
}

/// LayerNorm over the last axis.
pub fn layer_norm<'t, T: Element>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    x.layer_norm(gamma, beta, eps)
}

/// LayerNorm over the channel axis of a `B x C x H x W` map.
pub fn layer_norm_channels<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    if x.rank() != 4 {
        return Err(Error::shape("layer_norm", format!("expected a feature map, got {:?}", x.dims())));
    }
    x.permute(&[0, 2, 3, 1])?.layer_norm(gamma, beta, eps)?.permute(&[0, 3, 1, 2])
}

pub fn gelu<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.gelu()
}

/// Softmax along `axis`.
pub fn softmax<'t, T: Element>(x: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let r = x.rank();
    if axis >= r {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.dims())));
    }
    if axis + 1 == r {
        return x.softmax();
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(axis, r - 1);
    x.permute(&perm)?.softmax()?.permute(&perm)
}

/// `x · W + b` over the last axis, with `W` stored `Cin x Cout`.
pub fn linear<'t, T: Element>(x: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let xd = x.dims();
    let wd = weight.dims();
    if wd.len() != 2 || xd.last() != Some(&wd[0]) {
        return Err(Error::shape("linear", format!("input {xd:?} vs weight {wd:?}")));
    }
    let y = if xd.len() == 2 {
        x.matmul(weight)?
    } else {
        let rows: usize = xd[..xd.len() - 1].iter().product();
        let mut out = xd.clone();
        *out.last_mut().unwrap() = wd[1];
        x.reshape(&[rows, wd[0]])?.matmul(weight)?.reshape(&out)?
    };
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// 3x3, stride 1, pad 1 average pooling excluding padded cells.
pub fn avg_pool<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.avg_pool2d(3, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn conv_all_ones_counts_neighbours() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let spec = ConvSpec { bias: false, ..ConvSpec::new(1, 1, 3, 1, 1) };
        let y = conv2d(x, &spec, w, None).unwrap().value();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_depthwise() {
        let tape = Tape::<f32>::new();
        let xt = Tensor::from_fn([2, 3, 4, 5], |i| (i as f32 * 0.37).sin());
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::from_fn([3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
        let y = conv2d(x, &ConvSpec::depthwise(3, 3), w, None).unwrap().value();
        assert!(y.bit_eq(&xt));
    }

    #[test]
    fn stride_two_extent() {
        let spec = ConvSpec::new(1, 1, 3, 2, 1);
        assert_eq!(spec.output_hw(4, 4), Some((2, 2)));
        assert_eq!(spec.output_hw(1, 1), Some((1, 1)));
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let w = tape.constant(Tensor::ones([1, 1, 5, 5]));
        let err = x.conv2d(w, None, (1, 1), (1, 1), 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let c = tape.constant(Tensor::ones([3]));
        assert_eq!(layer_norm(c, g, b, 1e-6).unwrap().value().data(), &[0.0, 0.0, 0.0]);
        let x = tape.constant(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap());
        let y = layer_norm(x, g, b, 1e-12).unwrap().value();
        approx(y.data(), &[-1.224744871, 0.0, 1.224744871], 1e-6);
    }

    #[test]
    fn gelu_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([3], &[0.0, 10.0, 1.0]).unwrap());
        let y = gelu(x).unwrap().value();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-6);
        assert!((y.data()[2] - 0.841345).abs() < 1e-6);
    }

    #[test]
    fn softmax_values() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2, 2], &[0.0, 0.0, std::f64::consts::LN_2, 0.0]).unwrap());
        let y = softmax(x, 1).unwrap().value();
        approx(y.data(), &[0.5, 0.5, 2.0 / 3.0, 1.0 / 3.0], 1e-12);
        let y0 = softmax(x, 0).unwrap().value();
        let col0 = y0.data()[0] + y0.data()[2];
        assert!((col0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 2], &[1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_f64([2, 2], &[1.0, 1.0, 1.0, -1.0]).unwrap());
        assert_eq!(linear(x, w, None).unwrap().value().data(), &[3.0, -1.0]);
        let x3 = tape.constant(Tensor::from_fn([2, 3, 2], |i| i as f64));
        let zero = tape.constant(Tensor::zeros([2, 4]));
        let b = tape.constant(Tensor::from_f64([4], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = linear(x3, zero, Some(b)).unwrap().value();
        assert_eq!(y.dims(), &[2, 3, 4]);
        assert!(y.data().chunks(4).all(|r| r == [1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn avg_pool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 1, 3], &[0.0, 3.0, 6.0]).unwrap());
        assert_eq!(avg_pool(x).unwrap().value().data(), &[1.5, 3.0, 4.5]);
        let c = tape.constant(Tensor::full([1, 2, 4, 5], 2.5));
        assert!(avg_pool(c).unwrap().value().data().iter().all(|&v| v == 2.5));
        let p = tape.constant(Tensor::from_f64([1, 1, 1, 1], &[7.0]).unwrap());
        assert_eq!(avg_pool(p).unwrap().value().data(), &[7.0]);
    }
}
