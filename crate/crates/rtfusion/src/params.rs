//! Named, ordered store of learnable tensors: the unit of initialization,
//! optimization and checkpointing.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// Layer-norm variance epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

/// Standard deviation of the truncated-Gaussian conv initialization.
pub const INIT_STD: f64 = 0.02;

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Gaussian with the given standard deviation, resampled beyond 2 sigma.
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

impl Init {
    fn sample<E: Scalar>(&self, numel: usize, rng: &mut ChaCha20Rng) -> Vec<E> {
        match *self {
            Init::Zeros => vec![E::zero(); numel],
            Init::Ones => vec![E::one(); numel],
            Init::TruncNormal { std } => (0..numel)
                .map(|_| {
                    loop {
                        let v: f64 = StandardNormal.sample(rng);
                        let v = v * std;
                        if v.abs() <= 2.0 * std {
                            return E::from_f64(v);
                        }
                    }
                })
                .collect(),
        }
    }
}

/// Ordered collection of named parameters. Iteration order is registration
/// order and defines the checkpoint blob layout.
pub struct ParamStore<E: Scalar = f32> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register and initialize a new parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        init: Init,
        rng: &mut ChaCha20Rng,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name: {name}"
            )));
        }
        let tensor = Tensor::var(shape, init.sample(shape.numel(), rng))?;
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter: {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Replace a parameter's values with a fresh tracked leaf.
    pub fn set_data(&mut self, name: &str, data: Vec<E>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter: {name}")))?;
        let shape = self.entries[i].1.shape();
        self.entries[i].1 = Tensor::var(shape, data)?;
        Ok(())
    }

    pub fn set_data_by_index(&mut self, i: usize, data: Vec<E>) -> Result<()> {
        let shape = self.entries[i].1.shape();
        self.entries[i].1 = Tensor::var(shape, data)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor<E>) {
        let (name, t) = &self.entries[i];
        (name, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// View resolving names under `prefix.`.
    pub fn scope<'a>(&'a self, prefix: &str) -> ScopedParams<'a, E> {
        ScopedParams {
            store: self,
            prefix: format!("{prefix}."),
        }
    }

    /// Register a conv layer: `name.weight` (trunc-normal) of shape
    /// `(cout, cin_per_group, kh, kw)` and `name.bias` (zeros).
    pub fn add_conv(
        &mut self,
        name: &str,
        cout: usize,
        cin_per_group: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<()> {
        self.add(
            format!("{name}.weight"),
            Shape::new(cout, cin_per_group, kh, kw),
            Init::TruncNormal { std: INIT_STD },
            rng,
        )?;
        self.add(
            format!("{name}.bias"),
            Shape::new(1, cout, 1, 1),
            Init::Zeros,
            rng,
        )
    }

    /// Register layer-norm affine parameters: `name.gamma` (ones) and
    /// `name.beta` (zeros), one per channel.
    pub fn add_norm(&mut self, name: &str, channels: usize) -> Result<()> {
        let mut unused = ChaCha20Rng::seed_from_u64(0);
        self.add(
            format!("{name}.gamma"),
            Shape::new(1, channels, 1, 1),
            Init::Ones,
            &mut unused,
        )?;
        self.add(
            format!("{name}.beta"),
            Shape::new(1, channels, 1, 1),
            Init::Zeros,
            &mut unused,
        )
    }
}

/// Read-only view of a [`ParamStore`] under a name prefix.
pub struct ScopedParams<'a, E: Scalar = f32> {
    store: &'a ParamStore<E>,
    prefix: String,
}

impl<'a, E: Scalar> ScopedParams<'a, E> {
    pub fn get(&self, rel: &str) -> Result<&'a Tensor<E>> {
        self.store.get(&format!("{}{}", self.prefix, rel))
    }

    pub fn scope(&self, prefix: &str) -> ScopedParams<'a, E> {
        ScopedParams {
            store: self.store,
            prefix: format!("{}{}.", self.prefix, prefix),
        }
    }

    /// Apply the conv layer registered as `name` under this scope.
    pub fn conv(
        &self,
        name: &str,
        x: &Tensor<E>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<E>> {
        let weight = self.get(&format!("{name}.weight"))?;
        let bias = self.get(&format!("{name}.bias"))?;
        x.conv2d(weight, bias, stride, padding, groups)
    }

    /// Apply the channel layer norm registered as `name` under this scope.
    pub fn norm(&self, name: &str, x: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let gamma = self.get(&format!("{name}.gamma"))?;
        let beta = self.get(&format!("{name}.beta"))?;
        x.layer_norm(gamma, beta, eps)
    }
}
