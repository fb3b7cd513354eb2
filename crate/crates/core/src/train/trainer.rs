use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{Ctx, Model};
use crate::autodiff::Tape;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::Tensor;

use super::data::SynthDataset;
use super::loss::{accuracy, cross_entropy};
use super::optim::{adamw_step, lr_schedule, AdamWConfig, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub wd: f64,
    pub steps: usize,
    pub warmup: usize,
    pub batch: usize,
    pub image_size: usize,
    pub classes: usize,
    /// Number of distinct training images.
    pub dataset_size: usize,
    pub decay_all: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            wd: 0.05,
            steps: 300,
            warmup: 20,
            batch: 16,
            image_size: 32,
            classes: 4,
            dataset_size: 256,
            decay_all: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub history: Vec<StepMetrics>,
    /// Accuracy over the whole training set after the last step.
    pub train_accuracy: f64,
}

pub fn history_csv(history: &[StepMetrics]) -> String {
    let mut s = String::from("step,loss,accuracy,lr\n");
    for m in history {
        let _ = writeln!(s, "{},{:.6},{:.4},{:.6e}", m.step, m.loss, m.accuracy, m.lr);
    }
    s
}

/// Loss, logits and leaf gradients for one batch.
pub fn loss_and_grads<T: Element>(
    model: &Model,
    params: &ParamStore<T>,
    images: &Tensor<T>,
    labels: &[usize],
    ctx: &Ctx,
) -> Result<(f64, Tensor<T>, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let p = params.bind(&tape, true);
    let x = tape.constant(images.clone());
    let logits = model.forward_ctx(&p, x, ctx)?;
    let loss = cross_entropy(logits, labels)?;
    let lv = loss.value().data()[0].as_f64();
    if !lv.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {lv}")));
    }
    let mut g = tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| g.take(v).expect("parameter gradient")).collect();
    Ok((lv, logits.value(), grads))
}

pub fn evaluate<T: Element>(
    model: &Model,
    params: &ParamStore<T>,
    data: &SynthDataset<T>,
    batch: usize,
) -> Result<f64> {
    let mut hits = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let tape = Tape::new();
        let p = params.bind(&tape, false);
        let logits = model.forward(&p, tape.constant(x))?.value();
        hits += accuracy(&logits, &y) * chunk.len() as f64;
    }
    Ok(hits / data.len() as f64)
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    }
}

/// Trains on a synthetic dataset drawn from `cfg.seed`. `on_step` sees each
/// step's metrics as they are produced.
pub fn train_loop<T: Element>(
    cfg: &TrainConfig,
    model: &Model,
    init: ParamStore<T>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome<T>> {
    if cfg.steps == 0 || cfg.batch == 0 || (cfg.warmup > 0 && cfg.warmup >= cfg.steps) {
        return Err(Error::Config(format!(
            "train needs steps >= 1, batch >= 1 and warmup < steps (got {}, {}, {})",
            cfg.steps, cfg.batch, cfg.warmup
        )));
    }
    if cfg.classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "train.classes = {} but the model has {} outputs",
            cfg.classes, model.config.num_classes
        )));
    }
    let data = SynthDataset::<T>::generate(cfg.dataset_size, cfg.image_size, cfg.classes, cfg.seed)?;
    let mut params = init;
    let opt = AdamWConfig { weight_decay: cfg.wd, decay_all: cfg.decay_all, ..Default::default() };
    let mut state = OptimState::new(&params, opt);
    let mut order_rng = rng::stream(cfg.seed, "train.order");
    let ctx = Ctx::train(rng::stream(cfg.seed, "train.drop_path"));
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
            }
            idx.push(order.pop().unwrap());
        }
        let (x, y) = data.batch(&idx);
        let (loss, logits, grads) = loss_and_grads(model, &params, &x, &y, &ctx).map_err(|e| at_step(step, e))?;
        let lr = lr_schedule(step + 1, cfg.steps, cfg.warmup, cfg.lr);
        adamw_step(&mut params, &grads, &mut state, lr).map_err(|e| at_step(step, e))?;
        let m = StepMetrics { step, loss, accuracy: accuracy(&logits, &y), lr };
        on_step(&m);
        history.push(m);
    }
    let train_accuracy = evaluate(model, &params, &data, cfg.batch.max(32))?;
    Ok(TrainOutcome { params, history, train_accuracy })
}
