//! Effective receptive field: input-gradient saliency of a central unit.

use std::fmt::Write as _;

use crate::arch::{Block, Ctx, Model, Toggles, VariantConfig};
use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::SynthDataset;

/// Maps an input image `1 x C x H x W` to a feature map `1 x C' x h x w`
/// whose central unit is probed.
pub trait ErfProbe<T: Element>: Sync {
    fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>>;
}

/// Probes the output of one backbone stage (1-based).
pub struct StageProbe<'a, T> {
    pub model: &'a Model,
    pub params: &'a ParamStore<T>,
    pub stage: usize,
}

impl<'a, T: Element> StageProbe<'a, T> {
    pub fn new(model: &'a Model, params: &'a ParamStore<T>, stage: usize) -> Result<Self> {
        if !(1..=4).contains(&stage) {
            return Err(Error::Usage(format!("stage must be 1..=4, got {stage}")));
        }
        Ok(StageProbe { model, params, stage })
    }
}

impl<T: Element> ErfProbe<T> for StageProbe<'_, T> {
    fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.params.bind(tape, false);
        let outs = self.model.forward_stages(&p, x, self.stage, &Ctx::eval())?;
        Ok(*outs.last().expect("at least one stage"))
    }
}

/// Applies a sequence of blocks directly to the input map.
pub struct BlocksProbe<'a, T> {
    pub blocks: &'a [Block],
    pub params: &'a ParamStore<T>,
}

impl<T: Element> ErfProbe<T> for BlocksProbe<'_, T> {
    fn features<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let p = self.params.bind(tape, false);
        let mut h = x;
        for b in self.blocks {
            h = b.forward(&p, h, &Ctx::eval())?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative, maximum 1 (all zero if the gradient vanished).
    pub values: Vec<f64>,
    pub stage: usize,
    pub images: usize,
    pub label: String,
}

fn center_scalar<'t, T: Element>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let d = f.dims();
    if d.len() != 4 {
        return Err(Error::shape("erf", format!("probe must return a feature map, got {d:?}")));
    }
    f.slice(2, d[2] / 2, 1)?.slice(3, d[3] / 2, 1)?.sum_all()
}

fn image<T: Element>(images: &Tensor<T>, n: usize) -> Tensor<T> {
    let d = images.dims();
    let per: usize = d[1..].iter().product();
    Tensor::from_parts(
        [&[1], &d[1..]].concat(),
        images.data()[n * per..(n + 1) * per].to_vec(),
    )
}

/// Averages `|∂ center / ∂ input|` (summed over input channels) over the
/// images and normalizes to a maximum of 1.
pub fn compute_erf<T: Element, P: ErfProbe<T>>(probe: &P, images: &Tensor<T>, stage: usize, label: &str) -> Result<ErfMap> {
    let d = images.dims();
    if d.len() != 4 {
        return Err(Error::shape("erf", format!("images must be N x C x H x W, got {d:?}")));
    }
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let maps = Exec::auto().map_range(n, 1 << 20, |i| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let x = tape.leaf(image(images, i));
        let s = center_scalar(probe.features(&tape, x)?)?;
        let g = tape.backward(s)?;
        let g = g.get(x).expect("input gradient");
        let mut m = vec![0.0; h * w];
        for ch in 0..c {
            for (acc, v) in m.iter_mut().zip(&g.data()[ch * h * w..(ch + 1) * h * w]) {
                *acc += v.as_f64().abs();
            }
        }
        Ok(m)
    });
    let mut values = vec![0.0; h * w];
    for m in maps {
        for (a, v) in values.iter_mut().zip(m?) {
            *a += v;
        }
    }
    for v in &mut values {
        *v /= n as f64;
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    Ok(ErfMap { height: h, width: w, values, stage, images: n, label: label.to_string() })
}

/// Input cells whose perturbation changes the probed central unit, found by
/// bumping one cell at a time. Channel `k` of the cell moves by `k + 1`, so a
/// per-token normalization cannot cancel the bump.
pub fn dependency_set<T: Element, P: ErfProbe<T>>(probe: &P, image: &Tensor<T>) -> Result<Vec<bool>> {
    let d = image.dims();
    let (c, h, w) = (d[1], d[2], d[3]);
    let eval = |x: Tensor<T>| -> Result<T> {
        let tape = Tape::new();
        let v = tape.constant(x);
        Ok(center_scalar(probe.features(&tape, v)?)?.value().data()[0])
    };
    let base = eval(image.clone())?;
    let res = Exec::auto().map_range(h * w, 1 << 20, |cell| -> Result<bool> {
        let mut x = image.clone();
        let data = x.data_mut();
        for ch in 0..c {
            data[ch * h * w + cell] += T::from_f64(ch as f64 + 1.0);
        }
        Ok(eval(x)? != base)
    });
    res.into_iter().collect()
}

/// ERF maps along the component ladder Base, +HdC, +EC, +PC for `base`
/// (its toggles are replaced), over `samples` synthetic images.
pub fn erf_ladder(base: &VariantConfig, samples: usize, image_size: usize, stage: usize) -> Result<Vec<ErfMap>> {
    let data = SynthDataset::<f64>::generate(samples, image_size, base.num_classes.max(1), base.seed)?;
    let idx: Vec<usize> = (0..samples).collect();
    let (images, _) = data.batch(&idx);
    Toggles::ladder()[..4]
        .iter()
        .map(|&(label, toggles)| {
            let model = Model::build(&base.clone().with_toggles(toggles))?;
            let params = model.init_params::<f64>();
            let probe = StageProbe::new(&model, &params, stage)?;
            compute_erf(&probe, &images, stage, label)
        })
        .collect()
}

impl ErfMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn support(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v > 0.0).collect()
    }

    /// Inclusive bounding box `(row0, row1, col0, col1)` of the nonzero cells.
    pub fn support_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.at(i, j) > 0.0 {
                    bb = Some(match bb {
                        None => (i, i, j, j),
                        Some((r0, r1, c0, c1)) => (r0.min(i), r1.max(i), c0.min(j), c1.max(j)),
                    });
                }
            }
        }
        bb
    }

    /// Smallest Euclidean radius around the central cell enclosing
    /// `fraction` of the total saliency mass.
    pub fn spread_radius(&self, fraction: f64) -> f64 {
        let (ci, cj) = ((self.height / 2) as f64, (self.width / 2) as f64);
        let total: f64 = self.values.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let mut cells: Vec<(f64, f64)> = (0..self.height * self.width)
            .map(|k| {
                let (i, j) = ((k / self.width) as f64, (k % self.width) as f64);
                (((i - ci).powi(2) + (j - cj).powi(2)).sqrt(), self.values[k])
            })
            .collect();
        cells.sort_by(|a, b| a.0.total_cmp(&b.0));
        let target = fraction * total;
        let mut acc = 0.0;
        let mut k = 0;
        while k < cells.len() {
            let r = cells[k].0;
            while k < cells.len() && cells[k].0 == r {
                acc += cells[k].1;
                k += 1;
            }
            if acc >= target * (1.0 - 1e-12) {
                return r;
            }
        }
        cells.last().map_or(0.0, |c| c.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{}", line.join(","));
        }
        s
    }

    /// Binary 8-bit greyscale PGM.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: Vec<f64>) -> ErfMap {
        ErfMap { height: h, width: w, values, stage: 1, images: 1, label: String::new() }
    }

    #[test]
    fn radius_of_point_and_ring() {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        assert_eq!(map(5, 5, v.clone()).spread_radius(0.95), 0.0);
        v[13] = 1.0;
        v[11] = 1.0;
        assert_eq!(map(5, 5, v).spread_radius(0.95), 1.0);
    }

    #[test]
    fn pgm_header_and_scale() {
        let m = map(1, 2, vec![0.0, 1.0]);
        let p = m.to_pgm();
        assert_eq!(&p[..11], b"P5\n2 1\n255\n");
        assert_eq!(&p[11..], &[0, 255]);
        assert_eq!(m.to_csv(), "0.000000,1.000000\n");
    }
}
