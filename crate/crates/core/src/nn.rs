//! Named parameter storage and the small layers every block is built from.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use transdae_tensor::{Conv2dSpec, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Init {
    /// Zero-mean normal; the standard deviation depends on the init scheme.
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in a fixed order.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        let name = name.into();
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn linear(&mut self, path: &str, d_in: usize, d_out: usize, bias: bool) {
        self.add(join(path, "weight"), &[d_in, d_out], Init::Normal);
        if bias {
            self.add(join(path, "bias"), &[d_out], Init::Zeros);
        }
    }

    pub fn layer_norm(&mut self, path: &str, d: usize) {
        self.add(join(path, "gamma"), &[d], Init::Ones);
        self.add(join(path, "beta"), &[d], Init::Zeros);
    }

    pub fn conv(&mut self, path: &str, spec: &Conv2dSpec, bias: bool) {
        self.add(join(path, "weight"), &spec.weight_shape(), Init::Normal);
        if bias {
            self.add(join(path, "bias"), &[spec.out_channels], Init::Zeros);
        }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Standard deviation used for [`Init::Normal`] parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `N(0, 0.02^2)`.
    #[default]
    Default,
    /// `N(0, 1)`.
    Fidelity,
}

impl InitScheme {
    pub fn std(self) -> f64 {
        match self {
            InitScheme::Default => 0.02,
            InitScheme::Fidelity => 1.0,
        }
    }
}

/// Draws every declared parameter.
///
/// Each parameter gets its own stream keyed by `(seed, name)`, so a parameter
/// shared by two architectures starts from the same values in both.
pub fn initialize<T: Scalar>(specs: &[ParamSpec], seed: u64, scheme: InitScheme) -> ModelParams<T> {
    let normal = Normal::new(0.0, scheme.std()).expect("positive std");
    let mut params = ModelParams::new();
    for spec in specs {
        let tensor = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::ones(spec.shape.clone()),
            Init::Normal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&spec.name));
                Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(normal.sample(&mut rng)))
            }
        };
        params.insert(spec.name.clone(), tensor);
    }
    params
}

/// FNV-1a.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named parameter collection, keyed by dotted path
/// (e.g. `encoder.stage1.block0.channel_attn.w_q.weight`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a parameter leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Same as [`bind`](Self::bind) but as constants: no gradients are tracked.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.constant(t.clone())))
                .collect(),
        }
    }
}

/// Parameters registered on one graph, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars<'a>(vars: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_> {
        Scope {
            params: self,
            prefix: prefix.to_string(),
        }
    }
}

/// A [`BoundParams`] view rooted at a path prefix.
#[derive(Debug, Clone)]
pub struct Scope<'a> {
    params: &'a BoundParams,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            params: self.params,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(&join(&self.prefix, name))
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params.var(&join(&self.prefix, name))
    }

    pub fn linear(&self, name: &str) -> Result<Linear> {
        let s = self.sub(name);
        Ok(Linear {
            weight: s.var("weight")?,
            bias: s.has("bias").then(|| s.var("bias")).transpose()?,
        })
    }

    pub fn layer_norm(&self, name: &str) -> Result<LayerNorm> {
        let s = self.sub(name);
        Ok(LayerNorm {
            gamma: s.var("gamma")?,
            beta: s.var("beta")?,
        })
    }

    pub fn conv(&self, name: &str, spec: Conv2dSpec) -> Result<ConvLayer> {
        let s = self.sub(name);
        Ok(ConvLayer {
            weight: s.var("weight")?,
            bias: s.has("bias").then(|| s.var("bias")).transpose()?,
            spec,
        })
    }
}

/// `y = x W + b` over the last axis of a rank-2 or rank-3 input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(weight: Var, bias: Option<Var>) -> Self {
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() > 3 {
            // fold leading axes into one batch of rows
            let c = shape[shape.len() - 1];
            let rows = shape.iter().product::<usize>() / c;
            let flat = g.reshape(x, &[rows, c])?;
            let y = self.forward(g, flat)?;
            let mut out = shape;
            *out.last_mut().expect("rank > 3") = self.out_dim(g);
            return Ok(g.reshape(y, &out)?);
        }
        let y = g.matmul(x, self.weight)?;
        Ok(match self.bias {
            Some(b) => g.add(y, b)?,
            None => y,
        })
    }

    pub fn out_dim<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.weight)[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: Conv2dSpec,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, self.weight, self.bias, &self.spec)?)
    }
}

/// Rank-3 view `(batch, tokens, channels)` of a rank-2 or rank-3 shape.
pub(crate) fn as_batched(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((1, n, c)),
        [b, n, c] => Ok((b, n, c)),
        _ => Err(Error::Dimension(format!(
            "expected a (tokens, channels) or (batch, tokens, channels) tensor, got {shape:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_resolves_dotted_paths() {
        let mut p = ModelParams::<f64>::new();
        p.insert("a.b.w.weight", Tensor::eye(2));
        p.insert("a.b.w.bias", Tensor::zeros([2]));
        p.insert("a.b.v.weight", Tensor::eye(2));
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let scope = bound.scope("a").sub("b");
        assert!(scope.linear("w").unwrap().bias.is_some());
        assert!(scope.linear("v").unwrap().bias.is_none());
        assert!(matches!(scope.linear("missing"), Err(Error::Contract(_))));
    }

    #[test]
    fn initialize_is_deterministic_and_follows_init_kinds() {
        let mut reg = ParamRegistry::new();
        reg.linear("fc", 3, 4, true);
        reg.layer_norm("ln", 4);
        let a = initialize::<f32>(reg.specs(), 7, InitScheme::Default);
        let b = initialize::<f32>(reg.specs(), 7, InitScheme::Default);
        assert_eq!(a, b);
        assert!(a.get("fc.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("ln.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        let c = initialize::<f32>(reg.specs(), 8, InitScheme::Default);
        assert_ne!(a.get("fc.weight"), c.get("fc.weight"));
    }

    #[test]
    fn linear_applies_bias_per_token() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::eye(2));
        let b = g.constant(Tensor::from_f64([2], &[1.0, -1.0]).unwrap());
        let x = g.constant(Tensor::from_f64([1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let y = Linear::new(w, Some(b)).forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[2., 1., 4., 3.]);
    }
}
