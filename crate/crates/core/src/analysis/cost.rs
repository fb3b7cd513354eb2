//! Analytic parameter and multiply-accumulate accounting.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{Block, Model, INPUT_MULTIPLE};
use crate::error::{Error, Result};
use crate::mixers::{Geometry, MixerCore, TokenMixer, WindowGrid};
use crate::nn::layout::{stripe_window, Orientation};
use crate::nn::ConvSpec;
use crate::params::{Conv, Linear, Norm};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Per-module totals in declaration order, keyed by module path.
    pub per_layer: Vec<(String, usize)>,
}

/// Exact element count of every trainable tensor.
pub fn count_params(model: &Model) -> ParamCount {
    let mut per_layer: Vec<(String, usize)> = Vec::new();
    for s in model.registry.specs() {
        let module = s.name.rsplit_once('.').map_or(s.name.as_str(), |(m, _)| m).to_string();
        match per_layer.last_mut() {
            Some((m, n)) if *m == module => *n += s.numel(),
            _ => per_layer.push((module, s.numel())),
        }
    }
    ParamCount { total: model.registry.total(), per_layer }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub macs: u64,
    pub params: u64,
    /// Elementwise operations (normalization, activation, softmax).
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub resolution: (usize, usize),
    /// Totals count every multiply and add separately (twice the MACs).
    pub mul_add: bool,
    pub records: Vec<LayerCost>,
}

impl FlopReport {
    pub fn total_macs(&self) -> u64 {
        self.records.iter().map(|r| r.macs).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.records.iter().map(|r| r.params).sum()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.records.iter().map(|r| r.elementwise).sum()
    }

    pub fn macs_of_kind(&self, kind: &str) -> u64 {
        self.records.iter().filter(|r| r.kind == kind).map(|r| r.macs).sum()
    }

    /// CSV with columns `name,kind,macs,params` and a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,macs,params\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.kind, r.macs, r.params);
        }
        let _ = writeln!(s, "total,total,{},{}", self.total_macs(), self.total_params());
        s
    }
}

/// `k² · Cin/g · Cout · Hout · Wout`, or `None` if the kernel does not fit.
pub fn conv_macs(spec: &ConvSpec, h: usize, w: usize) -> Option<u64> {
    let (ho, wo) = spec.output_hw(h, w)?;
    Some((spec.kernel.0 * spec.kernel.1 * (spec.in_channels / spec.groups) * spec.out_channels * ho * wo) as u64)
}

struct Counter {
    mul: u64,
    records: Vec<LayerCost>,
}

impl Counter {
    fn push(&mut self, name: String, kind: &'static str, macs: u64, params: usize, elementwise: u64) {
        self.records.push(LayerCost { name, kind, macs: macs * self.mul, params: params as u64, elementwise });
    }

    fn conv(&mut self, name: &str, conv: &Conv, h: usize, w: usize) -> (usize, usize) {
        let s = &conv.spec;
        let (ho, wo) = s.output_hw(h, w).expect("validated extent");
        let macs = conv_macs(s, h, w).expect("validated extent");
        let kind = if s.is_depthwise() { "dwconv" } else { "conv" };
        self.push(name.to_string(), kind, macs, s.param_count(), 0);
        (ho, wo)
    }

    fn linear(&mut self, name: &str, lin: &Linear, tokens: usize) {
        self.push(name.to_string(), "linear", (tokens * lin.cin * lin.cout) as u64, lin.param_count(), 0);
    }

    fn norm(&mut self, name: &str, norm: &Norm, tokens: usize) {
        self.push(name.to_string(), "norm", 0, 2 * norm.channels, (tokens * norm.channels) as u64);
    }

    fn act(&mut self, name: &str, n: usize) {
        self.push(name.to_string(), "gelu", 0, 0, n as u64);
    }

    fn attention(&mut self, name: &str, groups: usize, nq: usize, nk: usize, c: usize, heads: usize) {
        // QKᵀ and PV, each heads · nq · nk · D per group
        let macs = 2 * groups * nq * nk * c;
        self.push(name.to_string(), "attention", macs as u64, 0, (groups * heads * nq * nk) as u64);
    }

    fn windowed(&mut self, name: &str, h: usize, w: usize, win: (usize, usize), shifted: bool, c: usize, heads: usize) {
        let g = WindowGrid::new(h, w, win.0, win.1, shifted);
        let n = g.tokens();
        self.attention(name, g.windows(), n, n, c, heads);
    }

    fn mixer(&mut self, name: &str, m: &TokenMixer, h: usize, w: usize) {
        let n = h * w;
        let c = m.dim;
        match &m.core {
            MixerCore::Pooling => self.push(format!("{name}.pool"), "pool", 0, 0, (9 * n * c) as u64),
            MixerCore::DwConv7(conv) => {
                self.conv(&format!("{name}.conv"), conv, h, w);
            }
            MixerCore::Attention(att) => {
                self.linear(&format!("{name}.q"), &att.q, n);
                let mut extra_v = false;
                match &att.geometry {
                    Geometry::Window { window, shifted } => {
                        self.linear(&format!("{name}.k"), &att.k, n);
                        self.linear(&format!("{name}.v"), &att.v, n);
                        let win = (window.resolve(h), window.resolve(w));
                        self.windowed(&format!("{name}.attn"), h, w, win, *shifted, c, att.heads);
                    }
                    Geometry::Cross { stripe } => {
                        self.linear(&format!("{name}.k"), &att.k, n);
                        self.linear(&format!("{name}.v"), &att.v, n);
                        for (o, tag) in [(Orientation::Horizontal, "h"), (Orientation::Vertical, "v")] {
                            let sw = match o {
                                Orientation::Horizontal => stripe.resolve(h),
                                Orientation::Vertical => stripe.resolve(w),
                            };
                            let win = stripe_window(h, w, sw, o);
                            self.windowed(&format!("{name}.attn_{tag}"), h, w, win, false, c / 2, att.heads / 2);
                        }
                    }
                    Geometry::Reduction { ratio, conv } => {
                        let nk = match conv {
                            Some((sr, norm)) => {
                                let r = *ratio;
                                let (hr, wr) = self.conv(&format!("{name}.sr"), sr, h.div_ceil(r) * r, w.div_ceil(r) * r);
                                self.norm(&format!("{name}.sr_norm"), norm, hr * wr);
                                hr * wr
                            }
                            None => n,
                        };
                        self.linear(&format!("{name}.k"), &att.k, nk);
                        self.linear(&format!("{name}.v"), &att.v, nk);
                        self.attention(&format!("{name}.attn"), 1, n, nk, c, att.heads);
                        extra_v = true;
                    }
                }
                if extra_v && m.ec.is_some() {
                    let v = &att.v;
                    self.push(format!("{name}.v_full"), "linear", (n * v.cin * v.cout) as u64, 0, 0);
                }
                self.linear(&format!("{name}.o"), &att.o, n);
            }
        }
        if let Some(ec) = &m.ec {
            self.conv(&format!("{name}.ec"), ec, h, w);
        }
    }

    fn block(&mut self, name: &str, b: &Block, h: usize, w: usize) {
        let n = h * w;
        self.norm(&format!("{name}.norm1"), &b.norm1, n);
        self.mixer(&format!("{name}.mixer"), &b.mixer, h, w);
        self.norm(&format!("{name}.norm2"), &b.norm2, n);
        let mlp = &b.mlp;
        self.linear(&format!("{name}.mlp.fc1"), &mlp.fc1, n);
        if let Some((conv, norm)) = &mlp.hdc {
            self.conv(&format!("{name}.mlp.hdc"), conv, h, w);
            self.norm(&format!("{name}.mlp.hdc_norm"), norm, n);
            self.act(&format!("{name}.mlp.hdc_act"), n * mlp.hidden);
        }
        self.act(&format!("{name}.mlp.act"), n * mlp.hidden);
        self.linear(&format!("{name}.mlp.fc2"), &mlp.fc2, n);
        if let Some(pc) = &b.pc {
            self.conv(&format!("{name}.pc"), pc, h, w);
        }
    }
}

/// MAC counts per layer at input resolution `h x w`. No forward pass is run.
pub fn count_flops(model: &Model, resolution: (usize, usize), mul_add: bool) -> Result<FlopReport> {
    let (h0, w0) = resolution;
    if h0 == 0 || w0 == 0 || h0 % INPUT_MULTIPLE != 0 || w0 % INPUT_MULTIPLE != 0 {
        return Err(Error::Usage(format!(
            "resolution {h0}x{w0} must be a positive multiple of {INPUT_MULTIPLE} in both extents"
        )));
    }
    let mut c = Counter { mul: if mul_add { 2 } else { 1 }, records: Vec::new() };
    let (mut h, mut w) = (h0, w0);
    for (i, l) in model.stem.layers.iter().enumerate() {
        (h, w) = c.conv(&format!("stem.{i}.conv"), &l.conv, h, w);
        c.norm(&format!("stem.{i}.norm"), &l.norm, h * w);
        if l.gelu {
            c.act(&format!("stem.{i}.act"), h * w * l.norm.channels);
        }
    }
    for (i, st) in model.stages.iter().enumerate() {
        (h, w) = c.conv(&format!("stages.{i}.down.conv"), &st.down.conv, h, w);
        c.norm(&format!("stages.{i}.down.norm"), &st.down.norm, h * w);
        for (j, b) in st.blocks.iter().enumerate() {
            c.block(&format!("stages.{i}.blocks.{j}"), b, h, w);
        }
    }
    c.norm("head.norm", &model.head.norm, h * w);
    c.linear("head.fc", &model.head.fc, 1);
    Ok(FlopReport { resolution, mul_add, records: c.records })
}
