//! Spatial token mixers and the embedded depthwise-convolution branch.

pub mod attention;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{self, layout::Orientation, ConvSpec};
use crate::params::{Bound, Conv, Linear, Norm, ParamRegistry};

pub use attention::{mha, window_attention, WindowGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    Pooling,
    #[serde(rename = "dwconv7")]
    DwConv7,
    SpatialReduction,
    LocalWindow,
    ShiftWindow,
    CrossShapedWindow,
}

impl MixerKind {
    pub const ALL: [MixerKind; 6] = [
        MixerKind::Pooling,
        MixerKind::DwConv7,
        MixerKind::SpatialReduction,
        MixerKind::LocalWindow,
        MixerKind::ShiftWindow,
        MixerKind::CrossShapedWindow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Pooling => "pooling",
            MixerKind::DwConv7 => "dwconv7",
            MixerKind::SpatialReduction => "spatial-reduction",
            MixerKind::LocalWindow => "local-window",
            MixerKind::ShiftWindow => "shift-window",
            MixerKind::CrossShapedWindow => "cross-shaped-window",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, MixerKind::Pooling | MixerKind::DwConv7)
    }
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase().replace('_', "-");
        let kind = match s.as_str() {
            "pooling" | "pool" => MixerKind::Pooling,
            "dwconv7" | "dwconv" | "conv7" => MixerKind::DwConv7,
            "spatial-reduction" | "sra" => MixerKind::SpatialReduction,
            "local-window" | "local" | "window" => MixerKind::LocalWindow,
            "shift-window" | "shift" | "swin" => MixerKind::ShiftWindow,
            "cross-shaped-window" | "cross-shaped" | "cswin" => MixerKind::CrossShapedWindow,
            _ => {
                let names: Vec<_> = MixerKind::ALL.iter().map(|k| k.name()).collect();
                return Err(Error::Usage(format!("unknown mixer `{s}` (expected one of {})", names.join(", "))));
            }
        };
        Ok(kind)
    }
}

/// A window extent, or the whole feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowSize {
    Size(usize),
    #[serde(with = "global_tag")]
    Global,
}

mod global_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("global")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "global" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected a positive integer or \"global\", got \"{s}\"")))
        }
    }
}

impl WindowSize {
    /// Extent along an axis of length `n`.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            WindowSize::Size(w) => w.clamp(1, n),
            WindowSize::Global => n,
        }
    }
}

impl fmt::Display for WindowSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSize::Size(w) => write!(f, "{w}"),
            WindowSize::Global => f.write_str("global"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub dim: usize,
    pub heads: usize,
    /// Local and shift window extent.
    pub window: WindowSize,
    pub shifted: bool,
    pub sr_ratio: usize,
    pub stripe: WindowSize,
    pub ec: bool,
    /// Route the embedded convolution through the output projection.
    pub ec_before_proj: bool,
    pub ln_eps: f64,
}

impl MixerConfig {
    pub fn new(kind: MixerKind, dim: usize, heads: usize) -> Self {
        MixerConfig {
            kind,
            dim,
            heads,
            window: WindowSize::Size(7),
            shifted: false,
            sr_ratio: 1,
            stripe: WindowSize::Size(7),
            ec: true,
            ec_before_proj: false,
            ln_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Geometry {
    Window { window: WindowSize, shifted: bool },
    Reduction { ratio: usize, conv: Option<(Conv, Norm)> },
    Cross { stripe: WindowSize },
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub dim: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub geometry: Geometry,
}

#[derive(Clone, Debug)]
pub enum MixerCore {
    Pooling,
    DwConv7(Conv),
    Attention(Attention),
}

/// A mixer plus its optional embedded depthwise 3x3 branch.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub kind: MixerKind,
    pub dim: usize,
    pub core: MixerCore,
    pub ec: Option<Conv>,
    pub ec_before_proj: bool,
}

/// Intermediate tensors exposed for tests and probes.
pub struct MixerTrace<'t, T> {
    pub out: Var<'t, T>,
    /// Attention weights per head group (two groups for cross-shaped windows).
    pub probs: Vec<Var<'t, T>>,
}

impl TokenMixer {
    pub fn declare(reg: &mut ParamRegistry, name: &str, cfg: &MixerConfig) -> Result<Self> {
        let c = cfg.dim;
        if cfg.kind.is_attention() {
            if cfg.heads == 0 || c % cfg.heads != 0 {
                return Err(Error::Config(format!("{name}: {c} channels not divisible by {} heads", cfg.heads)));
            }
            if cfg.kind == MixerKind::CrossShapedWindow && cfg.heads % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name}: cross-shaped windows need an even head count, got {}",
                    cfg.heads
                )));
            }
            if cfg.kind == MixerKind::SpatialReduction && cfg.sr_ratio == 0 {
                return Err(Error::Config(format!("{name}: reduction ratio must be at least 1")));
            }
        }
        let core = match cfg.kind {
            MixerKind::Pooling => MixerCore::Pooling,
            MixerKind::DwConv7 => MixerCore::DwConv7(Conv::declare(reg, &format!("{name}.conv"), ConvSpec::depthwise(c, 7))?),
            kind => {
                let q = Linear::declare(reg, &format!("{name}.q"), c, c, true);
                let k = Linear::declare(reg, &format!("{name}.k"), c, c, true);
                let v = Linear::declare(reg, &format!("{name}.v"), c, c, true);
                let geometry = match kind {
                    MixerKind::SpatialReduction => {
                        let r = cfg.sr_ratio;
                        let conv = if r > 1 {
                            let spec = ConvSpec::new(c, c, r, r, 0);
                            Some((
                                Conv::declare(reg, &format!("{name}.sr"), spec)?,
                                Norm::declare(reg, &format!("{name}.sr_norm"), c, cfg.ln_eps),
                            ))
                        } else {
                            None
                        };
                        Geometry::Reduction { ratio: r, conv }
                    }
                    MixerKind::CrossShapedWindow => Geometry::Cross { stripe: cfg.stripe },
                    MixerKind::ShiftWindow => Geometry::Window { window: cfg.window, shifted: cfg.shifted },
                    _ => Geometry::Window { window: cfg.window, shifted: false },
                };
                let o = Linear::declare(reg, &format!("{name}.o"), c, c, true);
                MixerCore::Attention(Attention { dim: c, heads: cfg.heads, q, k, v, o, geometry })
            }
        };
        let ec = if cfg.ec {
            Some(Conv::declare(reg, &format!("{name}.ec"), ConvSpec::depthwise(c, 3))?)
        } else {
            None
        };
        Ok(TokenMixer { kind: cfg.kind, dim: c, core, ec, ec_before_proj: cfg.ec_before_proj })
    }

    /// Mixes a `B x C x H x W` feature map.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = x.dims();
        if d.len() != 4 || d[1] != self.dim {
            return Err(Error::shape("mixer", format!("input {d:?} for {} channels", self.dim)));
        }
        self.forward_cl(p, x.permute(&[0, 2, 3, 1])?)?.out.permute(&[0, 3, 1, 2])
    }

    /// Mixes a channel-last `B x H x W x C` map.
    pub fn forward_cl<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<MixerTrace<'t, T>> {
        match &self.core {
            MixerCore::Pooling => {
                let fm = x.permute(&[0, 3, 1, 2])?;
                let out = nn::avg_pool(fm)?.sub(fm)?.permute(&[0, 2, 3, 1])?;
                Ok(MixerTrace { out: self.add_ec(p, out, x)?, probs: vec![] })
            }
            MixerCore::DwConv7(conv) => {
                let out = conv.forward_cl(p, x)?;
                Ok(MixerTrace { out: self.add_ec(p, out, x)?, probs: vec![] })
            }
            MixerCore::Attention(att) => self.attend(att, p, x),
        }
    }

    fn add_ec<'t, T: Element>(&self, p: &Bound<'t, T>, out: Var<'t, T>, operand: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.ec {
            Some(ec) => out.add(ec.forward_cl(p, operand)?),
            None => Ok(out),
        }
    }

    fn attend<'t, T: Element>(&self, att: &Attention, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<MixerTrace<'t, T>> {
        let d = x.dims();
        let (b, h, w, c) = (d[0], d[1], d[2], d[3]);
        let q = att.q.forward(p, x)?;
        let mut v_full = None;
        let (attn, probs) = match &att.geometry {
            Geometry::Window { window, shifted } => {
                let k = att.k.forward(p, x)?;
                let v = att.v.forward(p, x)?;
                v_full = Some(v);
                let win = (window.resolve(h), window.resolve(w));
                let (out, probs, _) = window_attention(q, k, v, att.heads, win, *shifted)?;
                (out, vec![probs])
            }
            Geometry::Cross { stripe } => {
                let k = att.k.forward(p, x)?;
                let v = att.v.forward(p, x)?;
                v_full = Some(v);
                let half = c / 2;
                let mut outs = Vec::with_capacity(2);
                let mut probs = Vec::with_capacity(2);
                for (i, o) in [Orientation::Horizontal, Orientation::Vertical].into_iter().enumerate() {
                    let part = |t: Var<'t, T>| t.slice(3, i * half, half);
                    let sw = match o {
                        Orientation::Horizontal => stripe.resolve(h),
                        Orientation::Vertical => stripe.resolve(w),
                    };
                    let win = nn::layout::stripe_window(h, w, sw, o);
                    let (out, pr, _) = window_attention(part(q)?, part(k)?, part(v)?, att.heads / 2, win, false)?;
                    outs.push(out);
                    probs.push(pr);
                }
                (Var::concat(&outs, 3)?, probs)
            }
            Geometry::Reduction { ratio, conv } => {
                let kv_src = match conv {
                    Some((sr, norm)) => {
                        let r = *ratio;
                        let fm = x.permute(&[0, 3, 1, 2])?;
                        let fm = fm.pad(2, 0, h.div_ceil(r) * r - h, 0.0)?.pad(3, 0, w.div_ceil(r) * r - w, 0.0)?;
                        let red = sr.forward(p, fm)?;
                        let rd = red.dims();
                        let tokens = red.permute(&[0, 2, 3, 1])?.reshape(&[b, rd[2] * rd[3], c])?;
                        norm.forward(p, tokens)?
                    }
                    None => x.reshape(&[b, h * w, c])?,
                };
                let k = att.k.forward(p, kv_src)?;
                let v = att.v.forward(p, kv_src)?;
                let (out, probs) = mha(q.reshape(&[b, h * w, c])?, k, v, att.heads, None)?;
                (out.reshape(&[b, h, w, c])?, vec![probs])
            }
        };
        let out = match &self.ec {
            None => att.o.forward(p, attn)?,
            Some(ec) => {
                let v = match v_full {
                    Some(v) => v,
                    None => att.v.forward(p, x)?,
                };
                let dv = ec.forward_cl(p, v)?;
                if self.ec_before_proj {
                    att.o.forward(p, attn.add(dv)?)?
                } else {
                    att.o.forward(p, attn)?.add(dv)?
                }
            }
        };
        Ok(MixerTrace { out, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_roundtrip() {
        for k in MixerKind::ALL {
            assert_eq!(k.name().parse::<MixerKind>().unwrap(), k);
            let j = serde_json::to_string(&k).unwrap();
            assert_eq!(j, format!("\"{}\"", k.name()));
            assert_eq!(serde_json::from_str::<MixerKind>(&j).unwrap(), k);
        }
        assert!("nope".parse::<MixerKind>().is_err());
    }

    #[test]
    fn window_size_serde() {
        assert_eq!(serde_json::from_str::<WindowSize>("7").unwrap(), WindowSize::Size(7));
        assert_eq!(serde_json::from_str::<WindowSize>("\"global\"").unwrap(), WindowSize::Global);
        assert_eq!(serde_json::to_string(&WindowSize::Global).unwrap(), "\"global\"");
        assert!(serde_json::from_str::<WindowSize>("\"big\"").is_err());
    }

    #[test]
    fn odd_heads_rejected_for_cross() {
        let mut reg = ParamRegistry::new();
        let cfg = MixerConfig::new(MixerKind::CrossShapedWindow, 12, 3);
        assert!(matches!(TokenMixer::declare(&mut reg, "m", &cfg), Err(Error::Config(_))));
    }
}
