//! Named parameter sets and their binding to an [`Ops`] backend.

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Ops, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Scalar, Tensor};

/// Ordered name -> tensor map. Order is the archive order.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensors<T: Scalar = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for NamedTensors<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Running batch-norm statistics are buffers, not trainable parameters.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Scalar> NamedTensors<T> {
    pub fn new() -> Self {
        NamedTensors {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NamedTensors<U> {
        NamedTensors {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that `self` has exactly the names and dims of `layout`.
    pub fn check_layout(&self, layout: &[(String, Dims)]) -> Result<()> {
        for (name, dims) in layout {
            let t = self.get(name)?;
            if t.dims() != *dims {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has dims {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        if let Some(extra) = self.names().find(|n| !layout.iter().any(|(l, _)| l == n)) {
            return Err(Error::Archive(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Binds every tensor on `ops`: trainable entries as parameters when
    /// `trainable` is set, buffers and everything else as constants.
    pub fn bind<O: Ops<T>>(&self, ops: &O, trainable: bool) -> Result<Bound<O::Node>> {
        let mut nodes = IndexMap::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let node = if trainable && !is_buffer(name) {
                ops.param(t.clone())?
            } else {
                ops.constant(t.clone())?
            };
            nodes.insert(name.clone(), node);
        }
        Ok(Bound { nodes })
    }
}

/// Parameters bound to backend nodes, looked up by name during a forward pass.
#[derive(Debug, Clone)]
pub struct Bound<N> {
    nodes: IndexMap<String, N>,
}

impl<N: Clone> Bound<N> {
    pub fn get(&self, name: &str) -> Result<&N> {
        self.nodes
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn conv(&self, prefix: &str, bias: bool) -> Result<Conv<N>> {
        Ok(Conv {
            weight: self.get(&format!("{prefix}.weight"))?.clone(),
            bias: if bias {
                Some(self.get(&format!("{prefix}.bias"))?.clone())
            } else {
                None
            },
        })
    }
}

impl<N> FromIterator<(String, N)> for Bound<N> {
    fn from_iter<I: IntoIterator<Item = (String, N)>>(iter: I) -> Self {
        Bound {
            nodes: iter.into_iter().collect(),
        }
    }
}

impl Bound<Var> {
    /// Gradients of the trainable entries, zeros where a parameter did not
    /// influence the output.
    pub fn collect_grads<T: Scalar>(
        &self,
        tape: &Tape<T>,
        grads: &Gradients<T>,
    ) -> NamedTensors<T> {
        let mut out = NamedTensors::new();
        for (name, v) in &self.nodes {
            if tape.requires_grad(*v) {
                out.insert(name.clone(), grads.get_or_zeros(*v, tape.value(*v).dims()));
            }
        }
        out
    }
}

/// Convolution weight `[Cout, Cin, K, K]` (or `[Cin, Cout, K, K]` when used
/// transposed) with optional bias `[1, Cout, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<W> {
    pub weight: W,
    pub bias: Option<W>,
}

impl<T: Scalar> Conv<Tensor<T>> {
    /// He-normal weights, zero bias.
    pub fn init(cout: usize, cin: usize, k: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Conv {
            weight: he_normal([cout, cin, k, k], cin * k * k, rng),
            bias: bias.then(|| Tensor::zeros([1, cout, 1, 1])),
        }
    }

    pub fn bind<O: Ops<T>>(&self, ops: &O) -> Result<Conv<O::Node>> {
        Ok(Conv {
            weight: ops.param(self.weight.clone())?,
            bias: self.bias.clone().map(|b| ops.param(b)).transpose()?,
        })
    }
}

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(dims: Dims, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal_scaled(dims, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal_scaled<T: Scalar>(dims: Dims, std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::from_vec(dims, data).expect("sized")
}
