//! Synthetic oriented-grating classification data.

use std::f64::consts::PI;

use rand::Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Largest absolute pixel noise.
pub const NOISE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SynthDataset<T> {
    /// `N x 3 x S x S`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub size: usize,
    pub seed: u64,
}

/// Grating orientation and RGB tint for class `k` of `classes`.
pub fn class_pattern(k: usize, classes: usize) -> (f64, [f64; 3]) {
    let theta = PI * k as f64 / classes as f64;
    let hue = 2.0 * PI * k as f64 / classes as f64;
    let tint = [0, 1, 2].map(|c| 0.55 + 0.45 * (hue + 2.0 * PI * c as f64 / 3.0).cos());
    (theta, tint)
}

impl<T: Element> SynthDataset<T> {
    pub fn generate(n: usize, size: usize, classes: usize, seed: u64) -> Result<Self> {
        if n == 0 || size == 0 || classes < 2 {
            return Err(Error::Usage(format!("dataset needs n, size >= 1 and >= 2 classes (got {n}, {size}, {classes})")));
        }
        let mut r = rng::stream(seed, "synth.data");
        let plane = size * size;
        let mut data = Vec::with_capacity(n * 3 * plane);
        let mut labels = Vec::with_capacity(n);
        let freq = 2.0 * PI / 6.0;
        for _ in 0..n {
            let k = r.random_range(0..classes);
            labels.push(k);
            let (theta, tint) = class_pattern(k, classes);
            let phase: f64 = r.random_range(0.0..2.0 * PI);
            let (ct, st) = (theta.cos(), theta.sin());
            for t in tint {
                for y in 0..size {
                    for x in 0..size {
                        let g = 0.5 + 0.5 * (freq * (x as f64 * ct + y as f64 * st) + phase).sin();
                        let noise: f64 = r.random_range(-NOISE..=NOISE);
                        let v = 0.15 + 0.7 * g * t + noise;
                        data.push(T::from_f64(v.clamp(0.0, 1.0)));
                    }
                }
            }
        }
        Ok(SynthDataset {
            images: Tensor::from_parts(vec![n, 3, size, size], data),
            labels,
            classes,
            size,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        (
            Tensor::from_parts(vec![idx.len(), 3, self.size, self.size], data),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = SynthDataset::<f32>::generate(16, 8, 4, 3).unwrap();
        let b = SynthDataset::<f32>::generate(16, 8, 4, 3).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.labels.iter().all(|&l| l < 4));
        let (x, y) = a.batch(&[3, 0]);
        assert_eq!(x.dims(), &[2, 3, 8, 8]);
        assert_eq!(y, vec![a.labels[3], a.labels[0]]);
    }

    #[test]
    fn patterns_distinct() {
        let p: Vec<_> = (0..4).map(|k| class_pattern(k, 4)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((p[i].0 - p[j].0).abs() > 0.1);
            }
        }
    }
}
