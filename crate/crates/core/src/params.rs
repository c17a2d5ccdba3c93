//! Named parameter registry shared by every model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named collection of parameter tensors.
///
/// The order of insertion is the manifest order used by checkpoints and by
/// the flattened parameter-space vectors of the meta-learning feedback.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Record every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.values.iter().map(|v| g.param(v.clone())).collect())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn map_values(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        for (n, v) in self.names.iter().zip(&mut self.values) {
            f(n, v);
        }
    }

    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients of every bound parameter, in store order.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.0
            .iter()
            .map(|&v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.dims(v).to_vec()))
            })
            .collect()
    }
}

/// `Σ_i ⟨a_i, b_i⟩` over matching parameter lists, accumulated in f64.
pub fn flat_dot<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

pub fn flat_norm<T: Real>(a: &[Tensor<T>]) -> f64 {
    flat_dot(a, a).sqrt()
}

pub(crate) fn uniform<T: Real, R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect()
}
