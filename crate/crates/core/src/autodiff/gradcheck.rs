//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::rng;
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// A differentiable function of one or more tensors. Implementations must
/// build the same graph for every element type.
pub trait GradTarget: Sync {
    fn eval<'t, T: Element>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>>;
}

/// Adapts a 64-bit closure of a single input.
pub struct FnTarget<F>(pub F);

impl<F> GradTarget for FnTarget<F>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + Sync,
{
    fn eval<'t, T: Element>(&self, tape: &'t Tape<T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let any: &dyn std::any::Any = tape;
        let tape64 = any
            .downcast_ref::<Tape<f64>>()
            .ok_or_else(|| Error::Usage("closure targets support 64-bit mode only".into()))?;
        let x = tape64.var(inputs[0].id())?;
        let out = (self.0)(tape64, x)?;
        tape.var(out.id())
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub precision: Precision,
    pub epsilon: f64,
    /// Check at most this many coordinates per input (sampled by `seed`).
    pub max_coords: Option<usize>,
    /// Seeds the non-scalar output weighting and coordinate sampling.
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn f64(epsilon: f64) -> Self {
        GradCheckConfig { precision: Precision::F64, epsilon, max_coords: None, seed: 0 }
    }

    pub fn f32() -> Self {
        GradCheckConfig { precision: Precision::F32, epsilon: 1e-6, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<CoordCheck>,
    /// Every checked coordinate, in input order.
    pub checks: Vec<CoordCheck>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "gradcheck.weights");
    (0..n)
        .map(|_| {
            let mag: f64 = r.random_range(0.5..1.5);
            if r.random::<bool>() { mag } else { -mag }
        })
        .collect()
}

/// Reduces the target output to a scalar. Non-scalar outputs are contracted
/// with a fixed weight tensor whose entries have magnitude in [0.5, 1.5].
pub(crate) fn scalar_loss<'t, T: Element>(out: Var<'t, T>, seed: u64) -> Result<Var<'t, T>> {
    let dims = out.dims();
    let n: usize = dims.iter().product();
    if n == 1 {
        return out.sum_all();
    }
    let w = loss_weights(n, seed).into_iter().map(T::from_f64).collect();
    let w = out.tape().constant(Tensor::from_parts(dims, w));
    out.mul(w)?.sum_all()
}

fn eval_output<F: GradTarget>(f: &F, point: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let tape = Tape::<f64>::new();
    let vars: Vec<_> = point.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&tape, &vars)?.value();
    match out.data().iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numeric(format!("non-finite forward value {v}"))),
        None => Ok(out),
    }
}

/// Reverse-mode gradient of the checker's scalar loss, computed in `T`.
pub fn analytic<T: Element, F: GradTarget>(f: &F, point: &[Tensor<f64>], seed: u64) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::<T>::new();
    let vars: Vec<_> = point.iter().map(|p| tape.leaf(p.cast())).collect();
    let out = f.eval(&tape, &vars)?;
    let loss = scalar_loss(out, seed)?;
    let v = loss.value().data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite forward value {v}")));
    }
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v).expect("leaf gradient").cast()).collect())
}

/// Compares reverse-mode gradients against central differences
/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` and returns the largest relative error.
///
/// In 32-bit mode the analytic gradient is computed in f32 at the point
/// rounded to f32, while the differences are taken in f64 at that same point.
pub fn grad_check<F: GradTarget>(f: &F, point: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Usage(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let point: Vec<Tensor<f64>> = match cfg.precision {
        Precision::F64 => point.to_vec(),
        Precision::F32 => point.iter().map(|p| p.cast::<f32>().cast()).collect(),
    };
    let ad = match cfg.precision {
        Precision::F64 => analytic::<f64, _>(f, &point, cfg.seed)?,
        Precision::F32 => analytic::<f32, _>(f, &point, cfg.seed)?,
    };
    let mut coords = Vec::new();
    let mut pick = rng::stream(cfg.seed, "gradcheck.coords");
    for (i, p) in point.iter().enumerate() {
        let n = p.numel();
        match cfg.max_coords {
            Some(m) if m < n => {
                let mut idx = sample(&mut pick, n, m).into_vec();
                idx.sort_unstable();
                coords.extend(idx.into_iter().map(|c| (i, c)));
            }
            _ => coords.extend((0..n).map(|c| (i, c))),
        }
    }
    let weights = loss_weights_for(f, &point, cfg.seed)?;
    let fd = Exec::auto().map_range(coords.len(), 1 << 16, |k| {
        let (i, c) = coords[k];
        difference(f, &point, &weights, i, c, cfg.epsilon)
    });
    let mut report = GradCheckReport { max_rel_error: 0.0, coords_checked: coords.len(), worst: None, checks: vec![] };
    for (&(i, c), num) in coords.iter().zip(fd) {
        let numeric = num?;
        let analytic = ad[i].data()[c];
        let check = CoordCheck { input: i, coord: c, analytic, numeric, rel_error: rel_error(analytic, numeric) };
        if check.rel_error > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(check.rel_error);
            report.worst = Some(check.clone());
        }
        report.checks.push(check);
    }
    Ok(report)
}

fn loss_weights_for<F: GradTarget>(f: &F, point: &[Tensor<f64>], seed: u64) -> Result<Vec<f64>> {
    let n = eval_output(f, point)?.numel();
    Ok(if n == 1 { vec![1.0] } else { loss_weights(n, seed) })
}

/// `(f(x+εe) − f(x−εe)) / 2ε`, contracted after the elementwise difference
/// so outputs the perturbation does not reach cancel exactly.
fn difference<F: GradTarget>(
    f: &F,
    point: &[Tensor<f64>],
    weights: &[f64],
    input: usize,
    coord: usize,
    eps: f64,
) -> Result<f64> {
    let mut shifted = point.to_vec();
    let x0 = point[input].data()[coord];
    shifted[input].data_mut()[coord] = x0 + eps;
    let op = eval_output(f, &shifted)?;
    shifted[input].data_mut()[coord] = x0 - eps;
    let om = eval_output(f, &shifted)?;
    let diff: f64 = weights.iter().zip(op.data().iter().zip(om.data())).map(|(w, (a, b))| w * (a - b)).sum();
    Ok(diff / (2.0 * eps))
}

/// 64-bit central difference of the checker's scalar loss along one
/// coordinate.
pub fn central_difference<F: GradTarget>(
    f: &F,
    point: &[Tensor<f64>],
    input: usize,
    coord: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    difference(f, point, &loss_weights_for(f, point, seed)?, input, coord, eps)
}

/// Single-input 64-bit check of a closure producing any output.
pub fn grad_check_fn<F>(f: F, point: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + Sync,
{
    Ok(grad_check(&FnTarget(f), std::slice::from_ref(point), &GradCheckConfig::f64(epsilon))?.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_f64([3, 2], &[0.3, -1.2, 2.0, 0.1, 5.0, -0.7]).unwrap();
        let e = grad_check_fn(|_, x| x.sum_all(), &x, 1e-3).unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn gelu_sum_at_three_points() {
        let x = Tensor::from_f64([3], &[-1.0, 0.0, 1.0]).unwrap();
        let e = grad_check_fn(|_, x| x.gelu()?.sum_all(), &x, 1e-3).unwrap();
        assert!(e <= 1e-5, "{e}");
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::from_f64([2], &[-1.0, 1.0]).unwrap();
        let err = grad_check_fn(|_, x| x.ln()?.sum_all(), &x, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        let x = Tensor::from_f64([1], &[1.0]).unwrap();
        assert!(matches!(grad_check_fn(|_, x| x.sum_all(), &x, 0.0), Err(Error::Usage(_))));
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
