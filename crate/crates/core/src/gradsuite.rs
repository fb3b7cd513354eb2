//! Randomized gradient-check targets covering every primitive and the
//! model's composite modules.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{Block, BlockConfig, Ctx, Icmlp, Model, VariantConfig, INPUT_MULTIPLE};
use crate::autodiff::gradcheck::{analytic, central_difference, grad_check, rel_error, GradCheckConfig, GradTarget, Precision};
use crate::autodiff::{Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mixers::{MixerConfig, MixerKind, TokenMixer, WindowSize};
use crate::params::{Bound, Init, ParamRegistry};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const PRIMITIVES: &[&str] = &[
    "add", "sub", "mul", "div", "neg", "exp", "log", "reciprocal", "sqrt", "gelu", "scale", "add_scalar",
    "matmul", "sum", "mean", "broadcast", "transpose", "reshape", "slice", "pad", "concat", "roll", "conv2d",
    "avg_pool2d", "layer_norm", "softmax", "log_softmax",
];

pub const COMPOSITES: &[&str] = &[
    "mixer/pooling",
    "mixer/dwconv7",
    "mixer/spatial-reduction",
    "mixer/local-window",
    "mixer/shift-window",
    "mixer/cross-shaped-window",
    "icmlp",
    "block",
    "model/tiny",
];

/// Tolerances per precision.
pub fn tolerance(p: Precision) -> f64 {
    match p {
        Precision::F64 => 1e-5,
        Precision::F32 => 1e-3,
    }
}

struct OpTarget {
    op: Op,
}

impl GradTarget for OpTarget {
    fn eval<'t, T: Element>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        tape.apply(self.op.clone(), inputs)
    }
}

fn uniform(r: &mut Stream, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| r.random_range(lo..hi))
}

/// Values with magnitude in `[lo, hi]` and random sign.
fn signed(r: &mut Stream, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims.to_vec(), |_| {
        let m = r.random_range(lo..hi);
        if r.random::<bool>() { m } else { -m }
    })
}

fn rand_dims(r: &mut Stream, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(1..=max)).collect()
}

fn rand_dims_in(r: &mut Stream, lo: usize, hi: usize, max: usize) -> Vec<usize> {
    let rank = r.random_range(lo..=hi);
    rand_dims(r, rank, max)
}

/// A shape broadcastable to `full`: some axes set to 1, leading axes
/// possibly dropped.
fn broadcast_source(r: &mut Stream, full: &[usize]) -> Vec<usize> {
    let drop = r.random_range(0..full.len());
    full[drop..].iter().map(|&d| if r.random::<f64>() < 0.5 { 1 } else { d }).collect()
}

fn primitive_case(name: &str, r: &mut Stream) -> Result<(Op, Vec<Tensor<f64>>)> {
    let n = |r: &mut Stream, d: &[usize]| uniform(r, d, -1.0, 1.0);
    Ok(match name {
        "add" | "sub" | "mul" | "div" => {
            let full = rand_dims_in(r, 1, 3, 4);
            let mut a = full.clone();
            let mut b = broadcast_source(r, &full);
            if r.random::<bool>() {
                std::mem::swap(&mut a, &mut b);
            }
            let op = match name {
                "add" => Op::Add,
                "sub" => Op::Sub,
                "mul" => Op::Mul,
                _ => Op::Div,
            };
            let tb = if name == "div" { signed(r, &b, 0.5, 1.5) } else { n(r, &b) };
            (op, vec![n(r, &a), tb])
        }
        "neg" | "exp" | "gelu" | "scale" | "add_scalar" => {
            let d = rand_dims_in(r, 1, 3, 5);
            let op = match name {
                "neg" => Op::Neg,
                "exp" => Op::Exp,
                "gelu" => Op::Gelu,
                "scale" => Op::Scale(r.random_range(-2.0..2.0)),
                _ => Op::AddScalar(r.random_range(-2.0..2.0)),
            };
            let x = if name == "gelu" { uniform(r, &d, -3.0, 3.0) } else { n(r, &d) };
            (op, vec![x])
        }
        "log" | "sqrt" => {
            let d = rand_dims_in(r, 1, 3, 5);
            (if name == "log" { Op::Log } else { Op::Sqrt }, vec![uniform(r, &d, 0.5, 2.0)])
        }
        "reciprocal" => {
            let d = rand_dims_in(r, 1, 3, 5);
            (Op::Reciprocal, vec![signed(r, &d, 0.5, 2.0)])
        }
        "matmul" => {
            let (m, k, nn) = (r.random_range(1..=5), r.random_range(1..=5), r.random_range(1..=5));
            let (ta, tb) = (r.random::<bool>(), r.random::<bool>());
            let batch: Vec<usize> = rand_dims_in(r, 0, 2, 3);
            let shared = !batch.is_empty() && r.random::<bool>();
            let mut ad = batch.clone();
            ad.extend(if ta { [k, m] } else { [m, k] });
            let mut bd = if shared { vec![] } else { batch };
            bd.extend(if tb { [nn, k] } else { [k, nn] });
            (Op::MatMul { trans_a: ta, trans_b: tb }, vec![n(r, &ad), n(r, &bd)])
        }
        "sum" | "mean" => {
            let rank = r.random_range(1..=4);
            let d = rand_dims(r, rank, 4);
            let mut axes: Vec<usize> = (0..rank).filter(|_| r.random::<bool>()).collect();
            if axes.is_empty() {
                axes.push(r.random_range(0..rank));
            }
            axes.shuffle(r);
            let keep_dims = r.random::<bool>();
            let op = if name == "sum" { Op::Sum { axes, keep_dims } } else { Op::Mean { axes, keep_dims } };
            (op, vec![n(r, &d)])
        }
        "broadcast" => {
            let full = rand_dims_in(r, 1, 4, 4);
            let src = broadcast_source(r, &full);
            (Op::BroadcastTo { dims: full }, vec![n(r, &src)])
        }
        "transpose" => {
            let rank = r.random_range(2..=4);
            let d = rand_dims(r, rank, 4);
            let mut perm: Vec<usize> = (0..rank).collect();
            perm.shuffle(r);
            (Op::Permute { perm }, vec![n(r, &d)])
        }
        "reshape" => {
            let d = rand_dims(r, 3, 4);
            let total: usize = d.iter().product();
            (Op::Reshape { dims: vec![total / d[0], d[0]] }, vec![n(r, &d)])
        }
        "slice" => {
            let rank = r.random_range(1..=4);
            let d = rand_dims(r, rank, 5);
            let axis = r.random_range(0..rank);
            let start = r.random_range(0..d[axis]);
            let len = r.random_range(1..=d[axis] - start);
            (Op::Slice { axis, start, len }, vec![n(r, &d)])
        }
        "pad" => {
            let rank = r.random_range(1..=4);
            let d = rand_dims(r, rank, 4);
            let op = Op::Pad {
                axis: r.random_range(0..rank),
                before: r.random_range(0..3),
                after: r.random_range(0..3),
                value: r.random_range(-1.0..1.0),
            };
            (op, vec![n(r, &d)])
        }
        "concat" => {
            let rank = r.random_range(1..=3);
            let d = rand_dims(r, rank, 4);
            let axis = r.random_range(0..rank);
            let parts = (0..r.random_range(1..=3))
                .map(|_| {
                    let mut di = d.clone();
                    di[axis] = r.random_range(1..=3);
                    n(r, &di)
                })
                .collect();
            (Op::Concat { axis }, parts)
        }
        "roll" => {
            let rank = r.random_range(1..=4);
            let d = rand_dims(r, rank, 5);
            (Op::Roll { axis: r.random_range(0..rank), shift: r.random_range(0..13) as isize - 6 }, vec![n(r, &d)])
        }
        "conv2d" => {
            let groups = *[1, 1, 2, 3].choose(r).unwrap();
            let depthwise = r.random::<f64>() < 0.3;
            let cin = if depthwise { groups * r.random_range(1..=2) } else { groups * r.random_range(1..=2) };
            let cout = if depthwise { cin } else { groups * r.random_range(1..=2) };
            let groups = if depthwise { cin } else { groups };
            let kh = r.random_range(1..=3);
            let kw = r.random_range(1..=3);
            let stride = (r.random_range(1..=2), r.random_range(1..=2));
            let padding = (r.random_range(0..=kh / 2 + 1).min(kh), r.random_range(0..=kw / 2 + 1).min(kw));
            let h = r.random_range(kh.max(2)..=6);
            let w = r.random_range(kw.max(2)..=6);
            let b = r.random_range(1..=2);
            let mut inputs = vec![n(r, &[b, cin, h, w]), n(r, &[cout, cin / groups, kh, kw])];
            if r.random::<bool>() {
                inputs.push(n(r, &[cout]));
            }
            (Op::Conv2d { stride, padding, groups }, inputs)
        }
        "avg_pool2d" => {
            let kernel = r.random_range(1..=3);
            let padding = r.random_range(0..kernel);
            let stride = r.random_range(1..=2);
            let d = [r.random_range(1..=2), r.random_range(1..=3), r.random_range(kernel..=6), r.random_range(kernel..=6)];
            (Op::AvgPool2d { kernel, stride, padding }, vec![n(r, &d)])
        }
        "layer_norm" => {
            let mut d = rand_dims_in(r, 1, 3, 4);
            let c = r.random_range(3..=8);
            d.push(c);
            let x = uniform(r, &d, -2.0, 2.0);
            (Op::LayerNorm { eps: 1e-6 }, vec![x, uniform(r, &[c], 0.5, 1.5), n(r, &[c])])
        }
        "softmax" | "log_softmax" => {
            let d = rand_dims_in(r, 1, 3, 5);
            let op = if name == "softmax" { Op::Softmax } else { Op::LogSoftmax };
            (op, vec![uniform(r, &d, -3.0, 3.0)])
        }
        _ => return Err(Error::Usage(format!("unknown gradient-check primitive `{name}`"))),
    })
}

/// Random parameter values far from the init (which would make attention
/// near-uniform and norms near-identity).
fn random_params(reg: &ParamRegistry, r: &mut Stream) -> Vec<Tensor<f64>> {
    reg.specs()
        .iter()
        .map(|s| {
            let fan_in = match s.dims.len() {
                4 => s.numel() / s.dims[0],
                2 => s.dims[0],
                _ => 1,
            };
            let (mean, std) = match s.init {
                Init::Ones => (1.0, 0.2),
                Init::Zeros => (0.0, 0.2),
                Init::TruncNormal(_) => (0.0, 1.0 / (fan_in as f64).sqrt()),
            };
            let d = Normal::new(mean, std).unwrap();
            Tensor::from_fn(s.dims.clone(), |_| d.sample(r))
        })
        .collect()
}

enum Module {
    Mixer(TokenMixer),
    Icmlp(Icmlp),
    Block(Block),
    Model(Box<Model>),
}

struct ModuleTarget {
    module: Module,
    /// Parameters held constant, in registry order; `None` entries are inputs.
    frozen: Vec<Option<Tensor<f64>>>,
}

/// Key biases shift every logit of a query equally, so softmax makes their
/// gradient identically zero. Query and key projections of a stage whose map
/// is a single token are equally dead.
fn is_structurally_zero(name: &str, single_token_stage: Option<&str>) -> bool {
    name.ends_with(".k.bias")
        || single_token_stage.is_some_and(|s| {
            name.starts_with(s) && (name.contains(".mixer.q.") || name.contains(".mixer.k."))
        })
}

/// Side of the tiny-model input used by the full-model check.
pub const MODEL_INPUT: usize = 32;

impl GradTarget for ModuleTarget {
    fn eval<'t, T: Element>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let x = inputs[0];
        let mut free = inputs[1..].iter();
        let vars = self
            .frozen
            .iter()
            .map(|f| match f {
                Some(t) => tape.constant(t.cast()),
                None => *free.next().expect("one input per free parameter"),
            })
            .collect();
        let p = Bound::from_vars(vars);
        match &self.module {
            Module::Mixer(m) => m.forward(&p, x),
            Module::Icmlp(m) => m.forward_cl(&p, x),
            Module::Block(b) => b.forward(&p, x, &Ctx::eval()),
            Module::Model(m) => m.forward(&p, x),
        }
    }
}

fn composite_case(name: &str, r: &mut Stream) -> Result<(ModuleTarget, Vec<Tensor<f64>>, Option<usize>)> {
    let mut reg = ParamRegistry::new();
    let c = 8;
    let mut single_token_stage = None;
    let (module, x, max_coords) = match name.split_once('/') {
        Some(("mixer", kind)) => {
            let kind: MixerKind = kind.parse()?;
            let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
            let mut cfg = MixerConfig::new(kind, c, 2);
            cfg.window = WindowSize::Size(r.random_range(2..=3));
            cfg.shifted = kind == MixerKind::ShiftWindow;
            cfg.sr_ratio = r.random_range(1..=3);
            cfg.stripe = WindowSize::Size(r.random_range(1..=2));
            cfg.ec_before_proj = r.random::<bool>();
            let m = TokenMixer::declare(&mut reg, "mixer", &cfg)?;
            (Module::Mixer(m), uniform(r, &[1, c, h, w], -1.5, 1.5), None)
        }
        Some(("model", _)) => {
            let mut cfg = VariantConfig::tiny();
            cfg.mixer = *MixerKind::ALL.choose(r).unwrap();
            let m = Model::build(&cfg)?;
            reg = m.registry.clone();
            if MODEL_INPUT / INPUT_MULTIPLE == 1 {
                single_token_stage = Some("stages.3.");
            }
            let x = uniform(r, &[1, 3, MODEL_INPUT, MODEL_INPUT], 0.0, 1.0);
            (Module::Model(Box::new(m)), x, Some(3))
        }
        _ if name == "icmlp" => {
            let m = Icmlp::declare(&mut reg, "mlp", c, 2, true, 1e-6)?;
            (Module::Icmlp(m), uniform(r, &[1, 4, 3, c], -1.5, 1.5), None)
        }
        _ if name == "block" => {
            let kind = *[MixerKind::LocalWindow, MixerKind::ShiftWindow].choose(r).unwrap();
            let mut mixer = MixerConfig::new(kind, c, 2);
            mixer.window = WindowSize::Size(3);
            mixer.shifted = kind == MixerKind::ShiftWindow;
            let cfg = BlockConfig { mixer, mlp_ratio: 2, hdc: true, pc: true, drop_path: 0.0 };
            let b = Block::declare(&mut reg, "block", &cfg)?;
            (Module::Block(b), uniform(r, &[1, c, 8, 8], -1.5, 1.5), Some(24))
        }
        _ => return Err(Error::Usage(format!("unknown gradient-check composite `{name}`"))),
    };
    let mut point = vec![x];
    let mut frozen = Vec::new();
    for (spec, t) in reg.specs().iter().zip(random_params(&reg, r)) {
        if is_structurally_zero(&spec.name, single_token_stage) {
            frozen.push(Some(t));
        } else {
            frozen.push(None);
            point.push(t);
        }
    }
    Ok((ModuleTarget { module, frozen }, point, max_coords))
}

/// A coordinate above tolerance, with a re-check that separates arithmetic
/// precision from a wrong derivative.
#[derive(Clone, Debug)]
pub struct Violation {
    pub seed: u64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// 32-bit mode: the 64-bit analytic gradient at the same point against
    /// the same difference. 64-bit mode: the analytic gradient against the
    /// nearest of the differences at ε/2, ε and 2ε.
    pub recheck: f64,
    /// `|analytic|` over the median `|analytic|` of the checked coordinates
    /// of the same input.
    pub relative_magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub precision: Precision,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub coords: usize,
    pub tolerance: f64,
    pub violations: Vec<Violation>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Violations whose re-check also exceeds the tolerance.
    pub fn unexplained(&self) -> usize {
        self.violations.iter().filter(|v| !(v.recheck <= self.tolerance)).count()
    }
}

pub const EPSILON: f64 = 1e-5;

fn config(precision: Precision, seed: u64, max_coords: Option<usize>, epsilon: f64) -> GradCheckConfig {
    GradCheckConfig { precision, epsilon, max_coords, seed }
}

fn median_abs(v: impl Iterator<Item = f64>) -> f64 {
    let mut a: Vec<f64> = v.map(f64::abs).collect();
    if a.is_empty() {
        return 0.0;
    }
    a.sort_by(f64::total_cmp);
    a[a.len() / 2]
}

fn check_seed<F: GradTarget>(
    f: &F,
    point: &[Tensor<f64>],
    cfg: &GradCheckConfig,
    tol: f64,
    res: &mut CaseResult,
) -> Result<()> {
    let report = grad_check(f, point, cfg)?;
    res.coords += report.coords_checked;
    if report.max_rel_error > res.max_rel_error {
        res.max_rel_error = report.max_rel_error;
        res.worst_seed = cfg.seed;
    }
    let bad: Vec<_> = report.checks.iter().filter(|c| !(c.rel_error <= tol)).collect();
    if bad.is_empty() {
        return Ok(());
    }
    let rounded: Vec<Tensor<f64>> = match cfg.precision {
        Precision::F64 => point.to_vec(),
        Precision::F32 => point.iter().map(|p| p.cast::<f32>().cast()).collect(),
    };
    let exact = match cfg.precision {
        Precision::F32 => Some(analytic::<f64, _>(f, &rounded, cfg.seed)?),
        Precision::F64 => None,
    };
    for c in bad {
        let recheck = match &exact {
            Some(g) => rel_error(g[c.input].data()[c.coord], c.numeric),
            None => {
                let mut best = c.rel_error;
                for e in [cfg.epsilon / 2.0, cfg.epsilon * 2.0] {
                    let n = central_difference(f, &rounded, c.input, c.coord, e, cfg.seed)?;
                    best = best.min(rel_error(c.analytic, n));
                }
                best
            }
        };
        let med = median_abs(report.checks.iter().filter(|o| o.input == c.input).map(|o| o.analytic));
        res.violations.push(Violation {
            seed: cfg.seed,
            input: c.input,
            coord: c.coord,
            analytic: c.analytic,
            numeric: c.numeric,
            rel_error: c.rel_error,
            recheck,
            relative_magnitude: if med > 0.0 { c.analytic.abs() / med } else { f64::INFINITY },
        });
    }
    Ok(())
}

/// Runs one target over `seeds` seeds starting at `base_seed`.
pub fn run_case(name: &str, precision: Precision, seeds: usize, base_seed: u64, epsilon: f64) -> Result<CaseResult> {
    let tol = tolerance(precision);
    let mut res = CaseResult {
        name: name.to_string(),
        precision,
        seeds,
        max_rel_error: 0.0,
        worst_seed: base_seed,
        coords: 0,
        tolerance: tol,
        violations: Vec::new(),
    };
    for s in 0..seeds as u64 {
        let seed = base_seed.wrapping_add(s);
        let mut r = rng::stream(seed, name);
        if PRIMITIVES.contains(&name) {
            let (op, point) = primitive_case(name, &mut r)?;
            check_seed(&OpTarget { op }, &point, &config(precision, seed, None, epsilon), tol, &mut res)?;
        } else {
            let (target, point, max) = composite_case(name, &mut r)?;
            check_seed(&target, &point, &config(precision, seed, max, epsilon), tol, &mut res)?;
        }
    }
    Ok(res)
}

/// Every target name, primitives first.
pub fn all_targets() -> Vec<&'static str> {
    PRIMITIVES.iter().chain(COMPOSITES).copied().collect()
}

