use crate::autodiff::Var;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mixers::{MixerConfig, MixerKind};
use crate::nn::ConvSpec;
use crate::params::{Bound, Conv, Linear, Norm, ParamRegistry, ParamStore};

use super::block::{Block, BlockConfig, Ctx};
use super::config::{Mode, Toggles, VariantConfig};

/// Required divisibility of input extents.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug)]
pub struct StemLayer {
    pub conv: Conv,
    pub norm: Norm,
    pub gelu: bool,
}

#[derive(Clone, Debug)]
pub struct Stem {
    pub layers: Vec<StemLayer>,
}

impl Stem {
    pub fn declare(reg: &mut ParamRegistry, out: usize, full: bool, eps: f64) -> Result<Self> {
        let specs = if full {
            vec![ConvSpec::new(3, out, 3, 2, 1), ConvSpec::new(out, out, 3, 1, 1), ConvSpec::new(out, out, 3, 1, 1)]
        } else {
            vec![ConvSpec::new(3, out, 3, 2, 1)]
        };
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                Ok(StemLayer {
                    conv: Conv::declare(reg, &format!("stem.{i}.conv"), spec)?,
                    norm: Norm::declare(reg, &format!("stem.{i}.norm"), out, eps),
                    gelu: full,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Stem { layers })
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = x.dims();
        if d.len() != 4 || d[1] != 3 || d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(Error::shape("stem", format!("expected B x 3 x H x W with even H, W; got {d:?}")));
        }
        let mut h = x;
        for l in &self.layers {
            h = l.norm.forward_channels(p, l.conv.forward(p, h)?)?;
            if l.gelu {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv,
    pub norm: Norm,
}

impl Downsample {
    pub fn declare(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, eps: f64) -> Result<Self> {
        Ok(Downsample {
            conv: Conv::declare(reg, &format!("{name}.conv"), ConvSpec::new(cin, cout, 3, 2, 1))?,
            norm: Norm::declare(reg, &format!("{name}.norm"), cout, eps),
        })
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.norm.forward_channels(p, self.conv.forward(p, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub dim: usize,
    pub down: Downsample,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub norm: Norm,
    pub fc: Linear,
}

/// Model structure. Parameters live separately in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: VariantConfig,
    pub registry: ParamRegistry,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Head,
}

impl Model {
    pub fn build(config: &VariantConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let eps = cfg.ln_eps;
        let mut reg = ParamRegistry::new();
        let stem = Stem::declare(&mut reg, cfg.stem_channels, cfg.toggles.stem, eps)?;
        let windows = cfg.active_windows();
        let total_blocks: usize = cfg.depths.iter().sum();
        let mut block_index = 0;
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.stem_channels;
        for i in 0..4 {
            let dim = cfg.channels[i];
            let down = Downsample::declare(&mut reg, &format!("stages.{i}.down"), cin, dim, eps)?;
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for j in 0..cfg.depths[i] {
                let rate = if total_blocks > 1 {
                    cfg.drop_path * block_index as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                let mixer = MixerConfig {
                    kind: cfg.mixer,
                    dim,
                    heads: cfg.heads[i],
                    window: windows[i],
                    shifted: cfg.mixer == MixerKind::ShiftWindow && j % 2 == 1,
                    sr_ratio: cfg.sr_ratios[i],
                    stripe: cfg.stripe_widths[i],
                    ec: cfg.toggles.ec,
                    ec_before_proj: cfg.ec_before_proj,
                    ln_eps: eps,
                };
                let bc = BlockConfig {
                    mixer,
                    mlp_ratio: cfg.mlp_ratio,
                    hdc: cfg.toggles.hdc,
                    pc: cfg.toggles.pc,
                    drop_path: rate,
                };
                blocks.push(Block::declare(&mut reg, &format!("stages.{i}.blocks.{j}"), &bc)?);
                block_index += 1;
            }
            stages.push(Stage { dim, down, blocks });
            cin = dim;
        }
        let head = Head {
            norm: Norm::declare(&mut reg, "head.norm", cin, eps),
            fc: Linear::declare(&mut reg, "head.fc", cin, cfg.num_classes, true),
        };
        Ok(Model { config: cfg, registry: reg, stem, stages, head })
    }

    /// Same weights layout, different window sizes.
    pub fn with_mode(&self, mode: Mode) -> Result<Self> {
        Model::build(&self.config.clone().with_mode(mode))
    }

    pub fn init_params<T: Element>(&self) -> ParamStore<T> {
        ParamStore::init(&self.registry, self.config.seed)
    }

    pub fn param_count(&self) -> usize {
        self.registry.total()
    }

    pub fn check_input(&self, dims: &[usize]) -> Result<()> {
        let ok = dims.len() == 4
            && dims[1] == 3
            && dims[2] >= INPUT_MULTIPLE
            && dims[3] >= INPUT_MULTIPLE
            && dims[2] % INPUT_MULTIPLE == 0
            && dims[3] % INPUT_MULTIPLE == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "model",
                format!("input {dims:?} must be B x 3 x H x W with H and W positive multiples of {INPUT_MULTIPLE}"),
            ))
        }
    }

    /// Stage outputs as `B x Cᵢ x Hᵢ x Wᵢ` feature maps, stopping after
    /// `upto` stages.
    pub fn forward_stages<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        upto: usize,
        ctx: &Ctx,
    ) -> Result<Vec<Var<'t, T>>> {
        self.check_input(&x.dims())?;
        let mut h = self.stem.forward(p, x)?;
        let mut outs = Vec::with_capacity(upto);
        for stage in self.stages.iter().take(upto) {
            h = stage.down.forward(p, h)?;
            let mut t = h.permute(&[0, 2, 3, 1])?;
            for b in &stage.blocks {
                t = b.forward_cl(p, t, ctx)?;
            }
            h = t.permute(&[0, 3, 1, 2])?;
            outs.push(h);
        }
        Ok(outs)
    }

    pub fn forward_features<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.forward_stages(p, x, 4, &Ctx::eval())
    }

    /// Logits `B x num_classes`.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_ctx(p, x, &Ctx::eval())
    }

    pub fn forward_ctx<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ctx: &Ctx) -> Result<Var<'t, T>> {
        let feats = self.forward_stages(p, x, 4, ctx)?;
        let f = *feats.last().expect("four stages");
        let d = f.dims();
        let tokens = f.reshape(&[d[0], d[1], d[2] * d[3]])?.permute(&[0, 2, 1])?;
        let pooled = self.head.norm.forward(p, tokens)?.mean(&[1], false)?;
        self.head.fc.forward(p, pooled)
    }

    /// Human-readable layer table.
    pub fn describe(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "variant {} | mixer {} | mode {} | {} | classes {}\n",
            c.name, c.mixer, c.mode, c.toggles, c.num_classes
        );
        let windows = c.active_windows();
        s += &format!("{:<10} {:>8} {:>6} {:>6} {:>8} {:>12}\n", "layer", "channels", "depth", "heads", "window", "params");
        let count = |prefix: &str| -> usize {
            self.registry.specs().iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.numel()).sum()
        };
        s += &format!("{:<10} {:>8} {:>6} {:>6} {:>8} {:>12}\n", "stem", c.stem_channels, self.stem.layers.len(), "-", "-", count("stem."));
        for (i, st) in self.stages.iter().enumerate() {
            s += &format!(
                "{:<10} {:>8} {:>6} {:>6} {:>8} {:>12}\n",
                format!("stage{}", i + 1),
                st.dim,
                st.blocks.len(),
                c.heads[i],
                windows[i].to_string(),
                count(&format!("stages.{i}."))
            );
        }
        s += &format!("{:<10} {:>8} {:>6} {:>6} {:>8} {:>12}\n", "head", c.num_classes, "-", "-", "-", count("head."));
        s += &format!("total parameters: {}\n", self.param_count());
        s
    }
}

/// Builds a named variant (`T`, `S`, `B`) or the desk-scale `tiny` config
/// with freshly initialized 32-bit parameters.
pub fn build_variant(
    name: &str,
    mixer: MixerKind,
    mode: Mode,
    toggles: Toggles,
    seed: u64,
) -> Result<(Model, ParamStore<f32>)> {
    let cfg = VariantConfig::by_name(name)?.with_mixer(mixer).with_mode(mode).with_toggles(toggles).with_seed(seed);
    let model = Model::build(&cfg)?;
    let params = model.init_params();
    Ok((model, params))
}
