use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use uninext::analysis::{compute_erf, count_flops, count_params, dependency_set, erf_ladder, ErfMap, ErfProbe, StageProbe};
use uninext::arch::{Block, BlockConfig, Ctx, Mode, Model, Toggles, VariantConfig};
use uninext::autodiff::gradcheck::Precision;
use uninext::gradsuite::{self, CaseResult};
use uninext::io::checkpoint::{load_params, save_params};
use uninext::mixers::{MixerConfig, MixerKind, TokenMixer, WindowSize};
use uninext::nn::{
    conv2d, cyclic_shift, from_tokens, softmax, stripe_partition, stripe_reverse, to_tokens, window_partition,
    window_reverse, ConvSpec, Orientation,
};
use uninext::params::{ParamRegistry, ParamStore};
use uninext::train::{loss_and_grads, train_loop, SynthDataset, TrainConfig};
use uninext::{rng, Result, Tape, Tensor, Var};

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("[{}] {id} {what}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn within(measured: f64, target: f64, tol: f64) -> bool {
    (measured / target - 1.0).abs() <= tol
}

fn params_and_macs(cfg: &VariantConfig, hw: (usize, usize)) -> Result<(usize, u64)> {
    let m = Model::build(cfg)?;
    Ok((count_params(&m).total, count_flops(&m, hw, false)?.total_macs()))
}

fn parameter_counts(r: &mut Report) -> Result<()> {
    for (name, target) in [("T", 24e6), ("S", 51e6), ("B", 91e6)] {
        let t = Instant::now();
        let m = Model::build(&VariantConfig::by_name(name)?.with_mixer(MixerKind::LocalWindow))?;
        let p = count_params(&m).total as f64;
        let secs = t.elapsed().as_secs_f64();
        r.line(
            "1",
            within(p, target, 0.05) && secs < 1.0,
            &format!("{name} params"),
            format!("{:.2}M vs {:.0}M (±5%), {secs:.2}s", p / 1e6, target / 1e6),
        );
    }
    Ok(())
}

fn mac_counts(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let (_, macs) = params_and_macs(&VariantConfig::tiny_t(), (224, 224))?;
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "2a",
        within(macs as f64, 4.3e9, 0.10) && secs < 5.0,
        "T MACs at 224x224",
        format!("{:.3}G vs 4.3G (±10%), {secs:.2}s", macs as f64 / 1e9),
    );
    let t = Instant::now();
    let (_, macs) = params_and_macs(&VariantConfig::tiny_t().with_mode(Mode::Dense), (800, 1280))?;
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "2b",
        within(macs as f64, 266e9, 0.10) && secs < 5.0,
        "T dense MACs at 800x1280",
        format!("{:.1}G vs 266G (±10%), {secs:.2}s", macs as f64 / 1e9),
    );
    Ok(())
}

fn cost_ladder(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let mut rows = Vec::new();
    let data = SynthDataset::<f32>::generate(1, 64, 1000, 0)?;
    let (x, y) = data.batch(&[0]);
    for (name, toggles) in Toggles::ladder() {
        let model = Model::build(&VariantConfig::tiny_t().with_toggles(toggles))?;
        let params = model.init_params::<f32>();
        let (loss, _, grads) = loss_and_grads(&model, &params, &x, &y, &Ctx::eval())?;
        let finite = loss.is_finite() && grads.iter().all(|g| g.is_finite());
        let (p, m) = (count_params(&model).total, count_flops(&model, (64, 64), false)?.total_macs());
        rows.push((name, p, m, finite));
    }
    let secs = t.elapsed().as_secs_f64();
    let monotone = rows.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].2 <= w[1].2);
    let hdc = rows[1].1 - rows[0].1;
    let desc: Vec<String> =
        rows.iter().map(|(n, p, m, _)| format!("{n} {:.2}M/{:.3}G", *p as f64 / 1e6, *m as f64 / 1e9)).collect();
    r.line(
        "3",
        monotone && rows.iter().all(|row| row.3) && hdc <= 500_000 && secs < 120.0,
        "T ladder at 64x64",
        format!("{}; HdC +{:.3}M (<= 0.5M); fwd+bwd finite; {secs:.1}s", desc.join(", "), hdc as f64 / 1e6),
    );
    Ok(())
}

fn gradient_suite(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let mut failures: Vec<CaseResult> = Vec::new();
    let (mut cases, mut worst) = (0, [0.0f64; 2]);
    for name in gradsuite::all_targets() {
        for (k, p) in [Precision::F64, Precision::F32].into_iter().enumerate() {
            let res = gradsuite::run_case(name, p, 20, 0, gradsuite::EPSILON)?;
            cases += 1;
            worst[k] = worst[k].max(res.max_rel_error);
            if !res.passed() {
                failures.push(res);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let detail: Vec<String> = failures
        .iter()
        .map(|f| {
            format!(
                "{} {:?} {:.2e} ({} coords over, {} not explained by rounding)",
                f.name,
                f.precision,
                f.max_rel_error,
                f.violations.len(),
                f.unexplained()
            )
        })
        .collect();
    r.line(
        "4",
        failures.is_empty() && secs < 600.0,
        "gradient suite, 20 seeds",
        format!(
            "{cases} cases, worst f64 {:.2e} (<= 1e-5), worst f32 {:.2e} (<= 1e-3), {secs:.0}s{}",
            worst[0],
            worst[1],
            if detail.is_empty() { String::new() } else { format!("; over: {}", detail.join("; ")) }
        ),
    );
    Ok(())
}

fn layouts_roundtrip() -> Result<bool> {
    let mut ok = true;
    for (seed, (b, c, h, w, win, shift)) in
        [(2, 3, 6, 9, 3, (2, -4)), (1, 4, 8, 8, 4, (-3, 5)), (3, 1, 2, 4, 2, (7, 1)), (1, 2, 5, 5, 1, (0, 0))]
            .into_iter()
            .enumerate()
    {
        let x = rng::uniform::<f32>(&mut rng::stream(seed as u64, "layout"), &[b, c, h, w], -5.0, 5.0);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        ok &= from_tokens(to_tokens(xv)?, (h, w))?.value().bit_eq(&x);
        ok &= window_reverse(window_partition(xv, win)?, b, h, w, win)?.value().bit_eq(&x);
        for o in [Orientation::Horizontal, Orientation::Vertical] {
            ok &= stripe_reverse(stripe_partition(xv, win, o)?, b, h, w, win, o)?.value().bit_eq(&x);
        }
        ok &= cyclic_shift(cyclic_shift(xv, shift)?, (-shift.0, -shift.1))?.value().bit_eq(&x);
    }
    Ok(ok)
}

fn softmax_gap() -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let x = rng::uniform::<f32>(&mut rng::stream(seed, "softmax"), &[7, 13], -30.0, 30.0);
        let tape = Tape::new();
        let y = softmax(tape.constant(x), 1)?.value();
        for row in y.data().chunks(13) {
            worst = worst.max((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn random_store(reg: &ParamRegistry, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::<f64>::init(reg, seed);
    let mut r = rng::stream(seed, "acceptance");
    for t in store.tensors_mut() {
        *t = rng::uniform(&mut r, t.dims(), -0.5, 0.5);
    }
    store
}

fn mixer_out(mixer: &TokenMixer, store: &ParamStore<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    Ok(mixer.forward_cl(&p, tape.constant(x.clone()))?.out.value())
}

fn permute_window(x: &Tensor<f64>, bi: usize, bj: usize, perm: &[usize]) -> Tensor<f64> {
    let (w, c) = (x.dims()[2], x.dims()[3]);
    let cell = |t: usize| ((bi * 3 + t / 3) * w + bj * 3 + t % 3) * c;
    let mut y = x.clone();
    for (k, &src) in perm.iter().enumerate() {
        y.data_mut()[cell(k)..cell(k) + c].copy_from_slice(&x.data()[cell(src)..cell(src) + c]);
    }
    y
}

fn window_equivariance_gap() -> Result<f64> {
    let cfg = MixerConfig { window: WindowSize::Size(3), ec: false, ..MixerConfig::new(MixerKind::LocalWindow, 8, 2) };
    let mut worst = 0.0f64;
    for seed in 0..8 {
        let mut reg = ParamRegistry::new();
        let mixer = TokenMixer::declare(&mut reg, "m", &cfg)?;
        let store = random_store(&reg, seed);
        let x = rng::uniform::<f64>(&mut rng::stream(seed, "x"), &[1, 6, 6, 8], -1.0, 1.0);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng::stream(seed, "perm"));
        let (bi, bj) = ((seed % 2) as usize, (seed / 2 % 2) as usize);
        let y = mixer_out(&mixer, &store, &x)?;
        let yp = mixer_out(&mixer, &store, &permute_window(&x, bi, bj, &perm))?;
        worst = worst.max(permute_window(&y, bi, bj, &perm).max_abs_diff(&yp));
    }
    Ok(worst)
}

fn zero_branch_identity() -> Result<bool> {
    let mut ok = true;
    for kind in MixerKind::ALL {
        let mut reg = ParamRegistry::new();
        let cfg = BlockConfig { mixer: MixerConfig::new(kind, 8, 2), mlp_ratio: 4, hdc: true, pc: true, drop_path: 0.0 };
        let block = Block::declare(&mut reg, "b", &cfg)?;
        let mut store = ParamStore::<f64>::init(&reg, 1);
        for (spec, t) in reg.specs().iter().zip(store.tensors_mut()) {
            let norm_gain = spec.name.split('.').any(|s| s.ends_with("norm")) && spec.name.ends_with(".weight");
            *t = Tensor::full(t.dims().to_vec(), if norm_gain { 1.0 } else { 0.0 });
        }
        let x = match kind {
            MixerKind::Pooling => Tensor::full([2, 8, 5, 6], 0.7),
            _ => rng::uniform::<f64>(&mut rng::stream(3, "x"), &[2, 8, 5, 6], -1.0, 1.0),
        };
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        ok &= block.forward(&p, tape.constant(x.clone()), &Ctx::eval())?.value().bit_eq(&x);
    }
    Ok(ok)
}

fn unshifted_gap() -> Result<f64> {
    let local = MixerConfig { window: WindowSize::Size(3), ..MixerConfig::new(MixerKind::LocalWindow, 8, 2) };
    let shift = MixerConfig { kind: MixerKind::ShiftWindow, shifted: false, ..local.clone() };
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let mut reg = ParamRegistry::new();
        let a = TokenMixer::declare(&mut reg, "m", &local)?;
        let store = random_store(&reg, seed);
        let mut reg_b = ParamRegistry::new();
        let b = TokenMixer::declare(&mut reg_b, "m", &shift)?;
        let store_b = ParamStore::from_tensors(&reg_b, store.tensors().to_vec())?;
        let x = rng::uniform::<f64>(&mut rng::stream(seed, "x"), &[2, 7, 5, 8], -1.0, 1.0);
        worst = worst.max(mixer_out(&a, &store, &x)?.max_abs_diff(&mixer_out(&b, &store_b, &x)?));
    }
    Ok(worst)
}

fn checkpoint_bytes_stable() -> Result<bool> {
    let dir = tempfile::tempdir()?;
    let model = Model::build(&VariantConfig::tiny().with_mixer(MixerKind::CrossShapedWindow).with_seed(4))?;
    let params = model.init_params::<f32>();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_params(&a, &params)?;
    let back = load_params(&a, &model.registry)?;
    save_params(&b, &back)?;
    Ok(std::fs::read(&a)? == std::fs::read(&b)?)
}

fn exact_invariants(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let roundtrip = layouts_roundtrip()?;
    let sm = softmax_gap()?;
    let equi = window_equivariance_gap()?;
    let identity = zero_branch_identity()?;
    let shift = unshifted_gap()?;
    let ckpt = checkpoint_bytes_stable()?;
    let secs = t.elapsed().as_secs_f64();
    r.line("5a", roundtrip, "window/stripe/token/shift roundtrips", format!("bit-exact: {roundtrip}"));
    r.line("5b", sm <= 1e-6, "softmax row sums", format!("max |sum - 1| = {sm:.1e} (<= 1e-6)"));
    r.line("5c", equi <= 1e-6, "within-window permutation equivariance", format!("max gap {equi:.1e} (<= 1e-6)"));
    r.line("5d", identity, "zeroed-branch block identity, all mixers", format!("bit-exact: {identity}"));
    r.line("5e", shift <= 1e-6, "shift=0 vs local window", format!("max gap {shift:.1e} (<= 1e-6)"));
    r.line("5f", ckpt && secs < 120.0, "checkpoint roundtrip", format!("byte-identical: {ckpt}; suite {secs:.1}s"));
    Ok(())
}

struct ConvStack(Vec<Tensor<f64>>);

impl ErfProbe<f64> for ConvStack {
    fn features<'t>(&self, tape: &'t Tape<f64>, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let c = x.dims()[1];
        let spec = ConvSpec { bias: false, ..ConvSpec::new(c, c, 3, 1, 1) };
        self.0.iter().try_fold(x, |h, w| conv2d(h, &spec, tape.constant(w.clone()), None))
    }
}

fn square_support(m: &ErfMap, half: usize) -> bool {
    let (ci, cj) = (m.height / 2, m.width / 2);
    (0..m.height).all(|i| (0..m.width).all(|j| (m.at(i, j) > 0.0) == (i.abs_diff(ci) <= half && j.abs_diff(cj) <= half)))
}

fn erf_properties(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let mut sound = true;
    for kind in MixerKind::ALL {
        for stage in [1, 2] {
            let model = Model::build(&VariantConfig::tiny().with_mixer(kind))?;
            let params = model.init_params::<f64>();
            let probe = StageProbe::new(&model, &params, stage)?;
            let images = rng::uniform::<f64>(&mut rng::stream(5, "img"), &[1, 3, 32, 32], 0.0, 1.0);
            let support = compute_erf(&probe, &images, stage, "sound")?.support();
            let deps = dependency_set(&probe, &images)?;
            sound &= support.iter().any(|&s| s) && support.iter().zip(&deps).all(|(&s, &d)| !s || d);
        }
    }
    r.line("6a", sound, "saliency support within perturbation dependency set", format!("six mixers, stages 1-2, 32x32: {sound}"));

    let mut w = rng::stream(1, "stack");
    let stack = |n: usize, w: &mut rng::Stream| ConvStack((0..n).map(|_| rng::uniform(w, &[2, 2, 3, 3], 0.5, 1.5)).collect());
    let images = rng::uniform::<f64>(&mut rng::stream(0, "img"), &[4, 2, 11, 11], -1.0, 1.0);
    let one = compute_erf(&stack(1, &mut w), &images, 1, "one")?;
    let two = compute_erf(&stack(2, &mut w), &images, 1, "two")?;
    let exact = square_support(&one, 1) && square_support(&two, 2);
    r.line("6b", exact, "one/two-conv supports", format!("3x3 and 5x5 exactly: {exact}"));

    let maps = erf_ladder(&VariantConfig::tiny().with_mode(Mode::Dense).with_seed(0), 16, 64, 3)?;
    let radii: Vec<String> = maps.iter().map(|m| format!("{} {:.3}", m.label, m.spread_radius(0.95))).collect();
    let monotone = maps.windows(2).all(|p| p[1].spread_radius(0.95) >= p[0].spread_radius(0.95));
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "6c",
        monotone && secs < 600.0,
        "95% spread radius along ladder, stage 3, tiny dense, 16 images, seed 0",
        format!("{}; {secs:.0}s", radii.join(" -> ")),
    );
    Ok(())
}

fn learnability(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    let mut accs = Vec::new();
    for kind in MixerKind::ALL {
        let model = Model::build(&VariantConfig::tiny().with_mixer(kind).with_seed(1))?;
        let out = train_loop::<f32>(&cfg, &model, model.init_params(), |_| {})?;
        accs.push((kind, out.train_accuracy));
    }
    let secs = t.elapsed().as_secs_f64();
    let local = accs.iter().find(|(k, _)| *k == MixerKind::LocalWindow).map(|a| a.1).unwrap_or(0.0);
    let all: Vec<String> = accs.iter().map(|(k, a)| format!("{k} {a:.3}")).collect();
    r.line("7a", local >= 0.95, "local-window train accuracy, 300 steps", format!("{local:.3} (>= 0.95)"));
    r.line(
        "7b",
        accs.iter().all(|a| a.1 >= 0.9) && secs < 1800.0,
        "all mixers train accuracy, 300 steps",
        format!("{} (>= 0.9); {secs:.0}s", all.join(", ")),
    );
    Ok(())
}

fn mode_transfer(r: &mut Report) -> Result<()> {
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("cls.ckpt");
    let cls = Model::build(&VariantConfig::tiny_t())?;
    let params = cls.init_params::<f32>();
    save_params(&path, &params)?;
    let dense = cls.with_mode(Mode::Dense)?;
    let loaded = load_params(&path, &dense.registry)?;
    let unchanged = loaded.tensors().iter().zip(params.tensors()).all(|(a, b)| a.bit_eq(b));
    let x = rng::uniform::<f32>(&mut rng::stream(0, "img"), &[1, 3, 352, 352], 0.0, 1.0);
    let tape = Tape::new();
    let p = loaded.bind(&tape, false);
    let logits = dense.forward(&p, tape.constant(x))?.value();
    let secs = t.elapsed().as_secs_f64();
    r.line(
        "8",
        unchanged && logits.is_finite() && secs < 60.0,
        "T classification checkpoint in dense mode at 352x352",
        format!("tensors unchanged: {unchanged}; logits {:?} finite: {}; {secs:.1}s", logits.dims(), logits.is_finite()),
    );
    Ok(())
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    let criteria: [(&str, fn(&mut Report) -> Result<()>); 8] = [
        ("1", parameter_counts),
        ("2", mac_counts),
        ("3", cost_ladder),
        ("4", gradient_suite),
        ("5", exact_invariants),
        ("6", erf_properties),
        ("7", learnability),
        ("8", mode_transfer),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    for (id, run) in criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|s| s == id)) {
            continue;
        }
        if let Err(e) = run(&mut report) {
            report.line(id, false, "error", e.to_string());
        }
    }
    println!("{} criteria failed", report.failed);
    if report.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
