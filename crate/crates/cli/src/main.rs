use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use uninext::analysis::{compute_erf, count_flops, erf_ladder, ErfMap, StageProbe};
use uninext::arch::{Mode, Model, Toggles};
use uninext::autodiff::gradcheck::Precision;
use uninext::gradsuite::{self, CaseResult};
use uninext::io::checkpoint;
use uninext::io::RunConfig;
use uninext::mixers::MixerKind;
use uninext::train::{evaluate, history_csv, train_loop, SynthDataset};
use uninext::Error;

#[derive(Parser)]
#[command(name = "uninext", version, about = "Hierarchical vision backbone: costs, gradient checks, ERF maps and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the layer table of a model.
    Describe(ModelArgs),
    /// Emit the per-layer parameter and MAC report as CSV.
    Count(CountArgs),
    /// Run the gradient-oracle suite.
    Gradcheck(GradArgs),
    /// Write effective-receptive-field maps as CSV and PGM.
    Erf(ErfArgs),
    /// Train on the synthetic grating set.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on the regenerated synthetic set.
    Eval(EvalArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// T, S, B or tiny.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    mixer: Option<MixerKind>,
    #[arg(long)]
    mode: Option<Mode>,
    /// all, none, or a ladder rung: base, +hdc, +ec, +pc, +stem.
    #[arg(long, value_parser = parse_toggles)]
    toggles: Option<Toggles>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Square input extent.
    #[arg(long, default_value_t = 224)]
    resolution: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Count multiplies and adds separately.
    #[arg(long)]
    mul_add: bool,
    /// Summarize the five component-ladder configurations instead.
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    Ladder,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F64,
    F32,
    Both,
}

#[derive(Args)]
struct GradArgs {
    /// Primitives only, 64-bit.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
    precision: PrecisionArg,
    /// Only targets whose name contains this string.
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = gradsuite::EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ErfArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    stage: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Parameters to probe; fresh initialization otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Maps for Base, +HdC, +EC, +PC in dense mode.
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// CSV metrics log (step,loss,accuracy,lr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate on a set drawn from a different seed than training.
    #[arg(long)]
    holdout: bool,
}

fn parse_toggles(s: &str) -> Result<Toggles, String> {
    match s {
        "all" => return Ok(Toggles::ALL),
        "none" => return Ok(Toggles::NONE),
        _ => {}
    }
    Toggles::ladder()
        .into_iter()
        .find(|(name, _)| *name == s || name.trim_start_matches('+') == s)
        .map(|(_, t)| t)
        .ok_or_else(|| format!("unknown toggles `{s}` (all, none, base, +hdc, +ec, +pc, +stem)"))
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) => Failure::Check(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

impl ModelArgs {
    fn run_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::parse("{}", "defaults")?,
        };
        let m = &mut cfg.model;
        if let Some(v) = &self.variant {
            m.variant = Some(v.clone());
            m.custom = None;
        }
        m.mixer = self.mixer.or(m.mixer);
        m.mode = self.mode.or(m.mode);
        m.toggles = self.toggles.or(m.toggles);
        if let Some(s) = self.seed {
            m.seed = Some(s);
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn with_default_variant(&self, name: &str) -> ModelArgs {
        let mut a = self.clone();
        if a.variant.is_none() && a.config.is_none() {
            a.variant = Some(name.to_string());
        }
        a
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn describe(a: &ModelArgs) -> Outcome {
    let model = Model::build(&a.run_config()?.variant()?)?;
    print!("{}", model.describe());
    Ok(())
}

fn count(a: &CountArgs) -> Outcome {
    let hw = (a.height.unwrap_or(a.resolution), a.width.unwrap_or(a.resolution));
    let variant = a.model.with_default_variant("T").run_config()?.variant()?;
    let text = match a.ablation {
        None => count_flops(&Model::build(&variant)?, hw, a.mul_add)?.to_csv(),
        Some(Ablation::Ladder) => {
            let mut s = String::from("config,params,macs\n");
            for (name, t) in Toggles::ladder() {
                let r = count_flops(&Model::build(&variant.clone().with_toggles(t))?, hw, a.mul_add)?;
                s += &format!("{name},{},{}\n", r.total_params(), r.total_macs());
            }
            s
        }
    };
    write_out(a.output.as_deref(), &text)
}

fn gradcheck(a: &GradArgs) -> Outcome {
    let precisions: &[Precision] = match (a.tiny, a.precision) {
        (true, _) | (false, PrecisionArg::F64) => &[Precision::F64],
        (false, PrecisionArg::F32) => &[Precision::F32],
        (false, PrecisionArg::Both) => &[Precision::F64, Precision::F32],
    };
    let targets: Vec<&str> = if a.tiny { gradsuite::PRIMITIVES.to_vec() } else { gradsuite::all_targets() };
    let targets: Vec<&str> =
        targets.into_iter().filter(|t| a.target.as_deref().is_none_or(|f| t.contains(f))).collect();
    if targets.is_empty() {
        return Err(Failure::Usage("no gradient-check target matches the filter".into()));
    }
    println!("target,precision,max_rel_error,tolerance,coords,status");
    let mut failed: Vec<CaseResult> = Vec::new();
    for t in targets {
        for &p in precisions {
            let r = gradsuite::run_case(t, p, a.seeds, a.seed, a.epsilon)?;
            let status = if r.passed() { "ok" } else { "FAIL" };
            println!("{},{:?},{:.3e},{:.0e},{},{status}", r.name, p, r.max_rel_error, r.tolerance, r.coords);
            if !r.passed() {
                failed.push(r);
            }
        }
    }
    match failed.len() {
        0 => Ok(()),
        n => Err(Failure::Check(format!("{n} gradient check(s) above tolerance"))),
    }
}

fn write_map(dir: &Path, stem: &str, map: &ErfMap) -> Outcome {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), map.to_csv())?;
    fs::write(dir.join(format!("{stem}.pgm")), map.to_pgm())?;
    println!("{stem}: stage {} over {} images, 95% radius {:.3}", map.stage, map.images, map.spread_radius(0.95));
    Ok(())
}

fn erf(a: &ErfArgs) -> Outcome {
    let cfg = a.model.run_config()?;
    let stage = a.stage.unwrap_or(cfg.erf.stage);
    let samples = a.samples.unwrap_or(cfg.erf.samples);
    let size = a.image_size.unwrap_or(cfg.erf.image_size);
    let mut variant = cfg.variant()?;
    match a.ablation {
        Some(Ablation::Ladder) => {
            if a.model.mode.is_none() && cfg.model.mode.is_none() {
                variant.mode = Mode::Dense;
            }
            let maps = erf_ladder(&variant, samples, size, stage)?;
            for m in &maps {
                write_map(&a.out_dir, &format!("erf-{}", m.label.trim_start_matches('+')), m)?;
            }
            let radii: Vec<f64> = maps.iter().map(|m| m.spread_radius(0.95)).collect();
            if radii.windows(2).any(|w| w[1] < w[0]) {
                return Err(Failure::Check(format!("95% spread radius decreases along the ladder: {radii:?}")));
            }
            Ok(())
        }
        None => {
            let model = Model::build(&variant)?;
            let params = match &a.checkpoint {
                Some(p) => checkpoint::load_params(p, &model.registry)?.cast::<f64>(),
                None => model.init_params::<f64>(),
            };
            let data = SynthDataset::<f64>::generate(samples, size, variant.num_classes.max(1), variant.seed)?;
            let (images, _) = data.batch(&(0..samples).collect::<Vec<_>>());
            let probe = StageProbe::new(&model, &params, stage)?;
            let map = compute_erf(&probe, &images, stage, &variant.name)?;
            write_map(&a.out_dir, &format!("erf-stage{stage}"), &map)
        }
    }
}

fn train(a: &TrainArgs) -> Outcome {
    let mut cfg = a.model.run_config()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
        cfg.train.warmup = cfg.train.warmup.min(s.saturating_sub(1));
    }
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    cfg.train.batch = a.batch.unwrap_or(cfg.train.batch);
    let model = Model::build(&cfg.train_variant()?)?;
    let every = (cfg.train.steps / 10).max(1);
    let out = train_loop::<f32>(&cfg.train, &model, model.init_params(), |m| {
        if m.step % every == 0 || m.step + 1 == cfg.train.steps {
            eprintln!("step {:>4}  loss {:.4}  acc {:.3}  lr {:.2e}", m.step, m.loss, m.accuracy, m.lr);
        }
    })?;
    if let Some(log) = a.log.as_ref().or(cfg.io.log_path.as_ref()) {
        write_out(Some(log), &history_csv(&out.history))?;
    }
    if let Some(ck) = a.checkpoint.as_ref().or(cfg.io.checkpoint_path.as_ref()) {
        if let Some(dir) = ck.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        checkpoint::save_params(ck, &out.params)?;
    }
    println!("train accuracy {:.4}", out.train_accuracy);
    Ok(())
}

/// Seed offset for the held-out evaluation set.
const HOLDOUT_SALT: u64 = 0x5eed_0f_e7a1;

fn eval(a: &EvalArgs) -> Outcome {
    let cfg = a.model.run_config()?;
    let path = a
        .checkpoint
        .as_ref()
        .or(cfg.io.checkpoint_path.as_ref())
        .ok_or_else(|| Failure::Usage("eval needs --checkpoint or io.checkpoint_path".into()))?;
    let model = Model::build(&cfg.train_variant()?)?;
    let params = checkpoint::load_params(path, &model.registry)?;
    let t = &cfg.train;
    let seed = if a.holdout { t.seed ^ HOLDOUT_SALT } else { t.seed };
    let data = SynthDataset::<f32>::generate(t.dataset_size, t.image_size, t.classes, seed)?;
    let acc = evaluate(&model, &params, &data, t.batch.max(32))?;
    println!("accuracy {acc:.4} on {} images", data.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Describe(a) => describe(a),
        Command::Count(a) => count(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Erf(a) => erf(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Check(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
