use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::{MixerKind, WindowSize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Classification,
    Dense,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "classification" | "cls" => Ok(Mode::Classification),
            "dense" => Ok(Mode::Dense),
            _ => Err(Error::Usage(format!("unknown mode `{s}` (expected classification or dense)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Classification => "classification",
            Mode::Dense => "dense",
        })
    }
}

/// Optional convolutional components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub hdc: bool,
    pub ec: bool,
    pub pc: bool,
    /// Three-convolution stem; otherwise a single strided convolution.
    pub stem: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

impl Toggles {
    pub const ALL: Toggles = Toggles { hdc: true, ec: true, pc: true, stem: true };
    pub const NONE: Toggles = Toggles { hdc: false, ec: false, pc: false, stem: false };

    /// The cumulative component ladder: base, +HdC, +EC, +PC, +stem.
    pub fn ladder() -> [(&'static str, Toggles); 5] {
        let b = Toggles::NONE;
        [
            ("base", b),
            ("+hdc", Toggles { hdc: true, ..b }),
            ("+ec", Toggles { hdc: true, ec: true, ..b }),
            ("+pc", Toggles { hdc: true, ec: true, pc: true, ..b }),
            ("+stem", Toggles::ALL),
        ]
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(f, "hdc={} ec={} pc={} stem={}", on(self.hdc), on(self.ec), on(self.pc), on(self.stem))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    pub stem_channels: usize,
    pub channels: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: usize,
    /// Window extents per stage in classification mode.
    pub windows: [WindowSize; 4],
    /// Window extents per stage in dense mode.
    pub dense_windows: [WindowSize; 4],
    pub sr_ratios: [usize; 4],
    pub stripe_widths: [WindowSize; 4],
    pub mixer: MixerKind,
    pub mode: Mode,
    pub toggles: Toggles,
    pub num_classes: usize,
    pub seed: u64,
    pub ln_eps: f64,
    /// Maximum stochastic-depth rate, reached at the last block.
    pub drop_path: f64,
    pub ec_before_proj: bool,
}

const W7: WindowSize = WindowSize::Size(7);
const W11: WindowSize = WindowSize::Size(11);
const GLOBAL: WindowSize = WindowSize::Global;

impl VariantConfig {
    fn base(name: &str, stem: usize, c1: usize, h1: usize) -> Self {
        VariantConfig {
            name: name.to_string(),
            stem_channels: stem,
            channels: [c1, 2 * c1, 4 * c1, 8 * c1],
            depths: [2, 2, 18, 2],
            heads: [h1, 2 * h1, 4 * h1, 8 * h1],
            mlp_ratio: 4,
            windows: [W7, W7, W7, GLOBAL],
            dense_windows: [W11, W11, W11, GLOBAL],
            sr_ratios: [8, 4, 2, 1],
            stripe_widths: [WindowSize::Size(1), WindowSize::Size(2), W7, GLOBAL],
            mixer: MixerKind::LocalWindow,
            mode: Mode::Classification,
            toggles: Toggles::ALL,
            num_classes: 1000,
            seed: 0,
            ln_eps: 1e-6,
            drop_path: 0.0,
            ec_before_proj: false,
        }
    }

    pub fn tiny_t() -> Self {
        Self::base("T", 32, 64, 2)
    }

    pub fn small() -> Self {
        Self::base("S", 48, 96, 3)
    }

    pub fn base_b() -> Self {
        Self::base("B", 64, 128, 4)
    }

    /// Desk-scale configuration for tests and training runs on 32x32 inputs.
    pub fn tiny() -> Self {
        VariantConfig {
            name: "tiny".into(),
            stem_channels: 4,
            channels: [8, 16, 32, 64],
            depths: [1, 1, 2, 1],
            heads: [2, 2, 4, 4],
            num_classes: 4,
            ..Self::base("tiny", 4, 8, 2)
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_uppercase().as_str() {
            "T" => Ok(Self::tiny_t()),
            "S" => Ok(Self::small()),
            "B" => Ok(Self::base_b()),
            "TINY" => Ok(Self::tiny()),
            _ => Err(Error::Usage(format!("unknown variant `{name}` (expected T, S, B or tiny)"))),
        }
    }

    pub fn with_mixer(mut self, mixer: MixerKind) -> Self {
        self.mixer = mixer;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Window extents in effect for the current mode.
    pub fn active_windows(&self) -> [WindowSize; 4] {
        match self.mode {
            Mode::Classification => self.windows,
            Mode::Dense => self.dense_windows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("variant {}: {m}", self.name)));
        if self.stem_channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return bad("stem_channels, mlp_ratio and num_classes must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must lie in [0, 1), got {}", self.drop_path));
        }
        for i in 0..4 {
            let (c, h) = (self.channels[i], self.heads[i]);
            if c == 0 || self.depths[i] == 0 {
                return bad(format!("stage {} needs positive channels and depth", i + 1));
            }
            if self.mixer.is_attention() {
                if h == 0 || c % h != 0 {
                    return bad(format!("stage {} channels {c} not divisible by {h} heads", i + 1));
                }
                if self.mixer == MixerKind::CrossShapedWindow && h % 2 != 0 {
                    return bad(format!("cross-shaped windows need an even head count, stage {} has {h}", i + 1));
                }
            }
            if self.sr_ratios[i] == 0 {
                return bad(format!("stage {} reduction ratio must be at least 1", i + 1));
            }
            for w in [self.windows[i], self.dense_windows[i], self.stripe_widths[i]] {
                if w == WindowSize::Size(0) {
                    return bad(format!("stage {} window extents must be positive", i + 1));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_variants() {
        let t = VariantConfig::tiny_t();
        assert_eq!((t.stem_channels, t.channels, t.heads), (32, [64, 128, 256, 512], [2, 4, 8, 16]));
        let s = VariantConfig::small();
        assert_eq!((s.stem_channels, s.channels, s.heads), (48, [96, 192, 384, 768], [3, 6, 12, 24]));
        let b = VariantConfig::base_b();
        assert_eq!((b.stem_channels, b.channels, b.heads), (64, [128, 256, 512, 1024], [4, 8, 16, 32]));
        for v in [t, s, b] {
            assert_eq!(v.depths, [2, 2, 18, 2]);
            assert_eq!(v.windows, [W7, W7, W7, GLOBAL]);
            assert_eq!(v.dense_windows, [W11, W11, W11, GLOBAL]);
            v.validate().unwrap();
        }
    }

    #[test]
    fn cross_needs_even_heads() {
        let s = VariantConfig::small().with_mixer(MixerKind::CrossShapedWindow);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        VariantConfig::tiny_t().with_mixer(MixerKind::CrossShapedWindow).validate().unwrap();
    }

    #[test]
    fn json_roundtrip() {
        let v = VariantConfig::tiny();
        let j = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<VariantConfig>(&j).unwrap(), v);
    }
}
