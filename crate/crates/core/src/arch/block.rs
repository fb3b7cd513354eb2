use std::cell::RefCell;

use rand::Rng;

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mixers::{MixerConfig, TokenMixer};
use crate::nn::{self, ConvSpec};
use crate::params::{Bound, Conv, Linear, Norm, ParamRegistry};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Per-pass state. Stochastic depth is active only when an RNG is present.
#[derive(Default)]
pub struct Ctx {
    rng: Option<RefCell<Stream>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { rng: None }
    }

    pub fn train(rng: Stream) -> Self {
        Ctx { rng: Some(RefCell::new(rng)) }
    }

    /// Scales whole samples of a residual branch by a Bernoulli keep mask.
    pub fn drop_path<'t, T: Element>(&self, branch: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
        let Some(rng) = &self.rng else { return Ok(branch) };
        if rate <= 0.0 {
            return Ok(branch);
        }
        let d = branch.dims();
        let keep = 1.0 - rate;
        let mut r = rng.borrow_mut();
        let mut mask_dims = vec![1; d.len()];
        mask_dims[0] = d[0];
        let mask = Tensor::from_fn(mask_dims, |_| {
            if r.random::<f64>() < keep { T::from_f64(1.0 / keep) } else { T::zero() }
        });
        branch.mul(branch.tape().constant(mask))
    }
}

/// Channel MLP with an optional depthwise convolution branch on the
/// expanded features.
#[derive(Clone, Debug)]
pub struct Icmlp {
    pub dim: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub hdc: Option<(Conv, Norm)>,
    pub fc2: Linear,
}

impl Icmlp {
    pub fn declare(reg: &mut ParamRegistry, name: &str, dim: usize, ratio: usize, hdc: bool, eps: f64) -> Result<Self> {
        let hidden = dim * ratio;
        let fc1 = Linear::declare(reg, &format!("{name}.fc1"), dim, hidden, true);
        let hdc = if hdc {
            Some((
                Conv::declare(reg, &format!("{name}.hdc"), ConvSpec::depthwise(hidden, 3))?,
                Norm::declare(reg, &format!("{name}.hdc_norm"), hidden, eps),
            ))
        } else {
            None
        };
        let fc2 = Linear::declare(reg, &format!("{name}.fc2"), hidden, dim, true);
        Ok(Icmlp { dim, hidden, fc1, hdc, fc2 })
    }

    /// Channel-last `B x H x W x C` in and out.
    pub fn forward_cl<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = self.fc1.forward(p, x)?;
        if let Some((conv, norm)) = &self.hdc {
            let branch = norm.forward(p, conv.forward_cl(p, h)?)?.gelu()?;
            h = h.add(branch)?;
        }
        self.fc2.forward(p, h.gelu()?)
    }

    /// Token map `B x N x C` with `N = H * W`.
    pub fn forward_tokens<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>, hw: (usize, usize)) -> Result<Var<'t, T>> {
        let d = x.dims();
        if d.len() != 3 || d[1] != hw.0 * hw.1 || d[2] != self.dim {
            return Err(Error::shape("icmlp", format!("tokens {d:?} for {} x {} x {}", hw.0, hw.1, self.dim)));
        }
        let y = self.forward_cl(p, x.reshape(&[d[0], hw.0, hw.1, d[2]])?)?;
        y.reshape(&d)
    }
}

/// Residual depthwise 3x3 after the MLP. Identity when `conv` is `None`.
pub fn post_convolution<'t, T: Element>(
    p: &Bound<'t, T>,
    conv: Option<&Conv>,
    x: Var<'t, T>,
    hw: (usize, usize),
) -> Result<Var<'t, T>> {
    let Some(conv) = conv else { return Ok(x) };
    let fm = nn::from_tokens(x, hw)?;
    x.add(nn::to_tokens(conv.forward(p, fm)?)?)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub dim: usize,
    pub norm1: Norm,
    pub mixer: TokenMixer,
    pub norm2: Norm,
    pub mlp: Icmlp,
    pub pc: Option<Conv>,
    pub drop_path: f64,
}

#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub mixer: MixerConfig,
    pub mlp_ratio: usize,
    pub hdc: bool,
    pub pc: bool,
    pub drop_path: f64,
}

impl Block {
    pub fn declare(reg: &mut ParamRegistry, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let dim = cfg.mixer.dim;
        let eps = cfg.mixer.ln_eps;
        let norm1 = Norm::declare(reg, &format!("{name}.norm1"), dim, eps);
        let mixer = TokenMixer::declare(reg, &format!("{name}.mixer"), &cfg.mixer)?;
        let norm2 = Norm::declare(reg, &format!("{name}.norm2"), dim, eps);
        let mlp = Icmlp::declare(reg, &format!("{name}.mlp"), dim, cfg.mlp_ratio, cfg.hdc, eps)?;
        let pc = if cfg.pc {
            Some(Conv::declare(reg, &format!("{name}.pc"), ConvSpec::depthwise(dim, 3))?)
        } else {
            None
        };
        Ok(Block { dim, norm1, mixer, norm2, mlp, pc, drop_path: cfg.drop_path })
    }

    /// Feature map `B x C x H x W` in and out.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &Ctx) -> Result<Var<'t, T>> {
        let d = x.dims();
        if d.len() != 4 || d[1] != self.dim {
            return Err(Error::shape("block", format!("input {d:?} for {} channels", self.dim)));
        }
        self.forward_cl(p, x.permute(&[0, 2, 3, 1])?, ctx)?.permute(&[0, 3, 1, 2])
    }

    /// Channel-last `B x H x W x C` in and out.
    pub fn forward_cl<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &Ctx) -> Result<Var<'t, T>> {
        let mixed = self.mixer.forward_cl(p, self.norm1.forward(p, x)?)?.out;
        let y = x.add(ctx.drop_path(mixed, self.drop_path)?)?;
        let m = self.mlp.forward_cl(p, self.norm2.forward(p, y)?)?;
        let z = y.add(ctx.drop_path(m, self.drop_path)?)?;
        match &self.pc {
            Some(pc) => z.add(pc.forward_cl(p, z)?),
            None => Ok(z),
        }
    }
}
