//! Parameter declaration, storage and binding to a tape, plus the basic
//! parameterized layers.
//!
//! Modules declare their tensors in a [`ParamRegistry`] without allocating
//! anything, which is what the analytic counters use. A [`ParamStore`]
//! materializes the declared tensors from a seed.

use std::ops::Index;

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, dims: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(self.specs.iter().all(|s| s.name != name), "duplicate parameter {name}");
        self.specs.push(ParamSpec { name, dims: dims.to_vec(), init, decay: dims.len() >= 2 });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }
}

/// Materialized parameter tensors in declaration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Each tensor draws from its own stream keyed by its name, so adding a
    /// parameter never perturbs the others.
    pub fn init(reg: &ParamRegistry, seed: u64) -> Self {
        let tensors = reg
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(s.dims.clone()),
                Init::Ones => Tensor::ones(s.dims.clone()),
                Init::TruncNormal(std) => rng::trunc_normal(&mut rng::stream(seed, &s.name), &s.dims, std),
            })
            .collect();
        ParamStore { specs: reg.specs.clone(), tensors }
    }

    pub fn from_tensors(reg: &ParamRegistry, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != reg.len() {
            return Err(Error::Usage(format!("{} tensors for {} parameters", tensors.len(), reg.len())));
        }
        for (s, t) in reg.specs.iter().zip(&tensors) {
            if s.dims != t.dims() {
                return Err(Error::shape("params", format!("`{}` expects {:?}, got {:?}", s.name, s.dims, t.dims())));
            }
        }
        Ok(ParamStore { specs: reg.specs.clone(), tensors })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.tensors[i])
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { specs: self.specs.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Records every parameter on `tape`, as differentiable leaves when
    /// `trainable` is set and as constants otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T> Bound<'t, T> {
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn declare(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let weight = reg.declare(format!("{name}.weight"), &[cin, cout], Init::TruncNormal(WEIGHT_STD));
        let bias = bias.then(|| reg.declare(format!("{name}.bias"), &[cout], Init::Zeros));
        Linear { cin, cout, weight, bias }
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        nn::linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    pub fn param_count(&self) -> usize {
        self.cin * self.cout + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn declare(reg: &mut ParamRegistry, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let weight = reg.declare(format!("{name}.weight"), &spec.weight_dims(), Init::TruncNormal(WEIGHT_STD));
        let bias = spec.bias.then(|| reg.declare(format!("{name}.bias"), &[spec.out_channels], Init::Zeros));
        Ok(Conv { spec, weight, bias })
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        nn::conv2d(x, &self.spec, p[self.weight], self.bias.map(|b| p[b]))
    }

    /// Applies the convolution to a channel-last `B x H x W x C` map.
    pub fn forward_cl<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(p, x.permute(&[0, 3, 1, 2])?)?.permute(&[0, 2, 3, 1])
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn declare(reg: &mut ParamRegistry, name: &str, channels: usize, eps: f64) -> Self {
        let gamma = reg.declare(format!("{name}.weight"), &[channels], Init::Ones);
        let beta = reg.declare(format!("{name}.bias"), &[channels], Init::Zeros);
        Norm { channels, gamma, beta, eps }
    }

    /// Normalizes over the last axis.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        nn::layer_norm(x, p[self.gamma], p[self.beta], self.eps)
    }

    /// Normalizes over the channel axis of a `B x C x H x W` map.
    pub fn forward_channels<'t, T: Element>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        nn::layer_norm_channels(x, p[self.gamma], p[self.beta], self.eps)
    }
}
