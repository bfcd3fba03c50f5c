//! Named parameter and batch-norm statistic collections.

use cats_autodiff::ops::{BatchNormMode, RunningStats};
use cats_autodiff::{Element, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CatsError, Result};

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn draw(init: Init, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::HeUniform { fan_in } => {
            let b = (6.0 / fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        }
        Init::TruncNormal { std } => {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n)
                .map(|_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        }
    }
}

/// Parameter and batch-norm layouts declared by a network, in declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelSpecs {
    pub params: Vec<ParamSpec>,
    /// Batch-norm layer path and channel count.
    pub stats: Vec<(String, usize)>,
}

impl ModelSpecs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Convolution weight `[cout, cin, k, k, k]` and optional bias.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        let fan_in = cin * k.pow(3);
        self.params.push(ParamSpec::new(format!("{name}.weight"), &[cout, cin, k, k, k], Init::HeUniform { fan_in }));
        if bias {
            self.params.push(ParamSpec::new(format!("{name}.bias"), &[cout], Init::Zeros));
        }
    }

    /// Transposed convolution weight `[cin, cout, k, k, k]` with stride `k` (no bias).
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.params.push(ParamSpec::new(format!("{name}.weight"), &[cin, cout, k, k, k], Init::HeUniform { fan_in: cin }));
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) {
        self.params.push(ParamSpec::new(format!("{name}.gain"), &[channels], Init::Ones));
        self.params.push(ParamSpec::new(format!("{name}.shift"), &[channels], Init::Zeros));
        self.stats.push((name.to_string(), channels));
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) {
        self.params.push(ParamSpec::new(format!("{name}.gain"), &[width], Init::Ones));
        self.params.push(ParamSpec::new(format!("{name}.shift"), &[width], Init::Zeros));
    }

    /// Dense weight `[fan_in, fan_out]` (truncated normal) and optional zero bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.params.push(ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], Init::TruncNormal { std: 0.02 }));
        if bias {
            self.params.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Zeros));
        }
    }

    pub fn push(&mut self, spec: ParamSpec) {
        self.params.push(spec);
    }

    pub fn extend(&mut self, other: ModelSpecs) {
        self.params.extend(other.params);
        self.stats.extend(other.stats);
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }
}

/// Ordered map from parameter path to tensor. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet<T: Element = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParameterSet<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Initialise every spec from one seeded stream, in spec order.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::new();
        for spec in specs {
            let data = draw(spec.init, spec.numel(), &mut rng).into_iter().map(T::from_f64).collect();
            set.insert(&spec.name, Tensor::variable(data, &spec.shape)?)?;
        }
        Ok(set)
    }

    pub fn from_parts(names: &[String], tensors: &[Tensor<T>]) -> Result<Self> {
        let mut set = Self::new();
        for (n, t) in names.iter().zip(tensors) {
            set.insert(n, t.clone())?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.entries.insert(name.to_string(), tensor).is_some() {
            return Err(CatsError::config(name, "duplicate parameter name"));
        }
        Ok(())
    }

    /// Replace an existing entry in place (order unchanged).
    pub fn replace(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self.entries.get_mut(name).ok_or_else(|| missing(name))?;
        if slot.shape() != tensor.shape() {
            return Err(CatsError::Data(format!(
                "parameter `{}` has shape {:?}, replacement {:?}",
                name,
                slot.shape(),
                tensor.shape()
            )));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| missing(name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Copy with every tensor converted to another precision, tracking flags kept.
    pub fn cast<U: Element>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().with_requires_grad(v.requires_grad())))
                .collect(),
        }
    }

    /// Copy in which tensors whose name starts with one of `prefixes` are zeroed.
    pub fn zeroed(&self, prefixes: &[&str]) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let t = if prefixes.iter().any(|p| k.starts_with(p)) {
                    Tensor::zeros(v.shape()).with_requires_grad(v.requires_grad())
                } else {
                    v.clone()
                };
                (k.clone(), t)
            })
            .collect();
        Self { entries }
    }

    /// Turn gradient tracking off for matching names (frozen) and on for the rest.
    pub fn with_frozen(&self, prefixes: &[&str]) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.with_requires_grad(!prefixes.iter().any(|p| k.starts_with(p)))))
            .collect();
        Self { entries }
    }

    /// Entries whose names are in `names`, in this set's order.
    pub fn subset(&self, names: &[String]) -> Result<Self> {
        let mut out = Self::new();
        for n in names {
            out.insert(n, self.get(n)?.clone())?;
        }
        Ok(out)
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape() == b.shape() && bits_eq(a.data(), b.data())
            })
    }
}

pub(crate) fn bits_eq<T: Element>(a: &[T], b: &[T]) -> bool {
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.iter().for_each(|v| v.to_le_bytes(&mut ba));
    b.iter().for_each(|v| v.to_le_bytes(&mut bb));
    ba == bb
}

fn missing(name: &str) -> CatsError {
    CatsError::Data(format!("no parameter named `{}`", name))
}

/// Running statistics of every batch-norm layer, keyed by layer path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsSet<T: Element = f32> {
    entries: IndexMap<String, RunningStats<T>>,
}

impl<T: Element> StatsSet<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn initialize(specs: &[(String, usize)]) -> Self {
        Self { entries: specs.iter().map(|(n, c)| (n.clone(), RunningStats::new(*c))).collect() }
    }

    pub fn insert(&mut self, name: &str, stats: RunningStats<T>) {
        self.entries.insert(name.to_string(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&RunningStats<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| CatsError::Data(format!("no batch-norm statistics named `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| CatsError::Data(format!("no batch-norm statistics named `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cast<U: Element>(&self) -> StatsSet<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        StatsSet {
            entries: self
                .entries
                .iter()
                .map(|(k, s)| (k.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var) }))
                .collect(),
        }
    }
}

/// Whether a forward pass normalises with batch or running statistics.
pub enum Phase<'a, T: Element> {
    /// Batch statistics; the running statistics are updated when present.
    Train(Option<&'a mut StatsSet<T>>),
    Eval(&'a StatsSet<T>),
}

impl<T: Element> Phase<'_, T> {
    pub(crate) fn bn_mode(&mut self, name: &str) -> Result<BatchNormMode<'_, T>> {
        Ok(match self {
            Phase::Train(None) => BatchNormMode::Train(None),
            Phase::Train(Some(stats)) => BatchNormMode::Train(Some(stats.get_mut(name)?)),
            Phase::Eval(stats) => BatchNormMode::Eval(stats.get(name)?),
        })
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Parameters plus normalisation statistics: everything a forward pass reads.
#[derive(Debug, Clone)]
pub struct ModelState<T: Element = f32> {
    pub params: ParameterSet<T>,
    pub stats: StatsSet<T>,
}
