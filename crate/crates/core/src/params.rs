//! Named parameter storage and its binding onto an autodiff tape.

use std::collections::{BTreeMap, HashMap};

use lpdt_tensor::{AnyTensor, Float, Graph, NamedTensors, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Parameters keyed by their stable serialization name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
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

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn to_named(&self) -> NamedTensors {
        self.tensors.iter().map(|(k, v)| (k.clone(), AnyTensor::from(v.clone()))).collect()
    }

    /// Takes every tensor from `named` whose name is listed in `expected`, checking shapes.
    pub fn from_named(named: &mut NamedTensors, expected: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut store = Self::new();
        for (name, shape) in expected {
            let t = lpdt_tensor::io::take_tensor(named, name, shape)?;
            store.insert(name.clone(), t);
        }
        Ok(store)
    }

    /// Pushes every tensor onto `g` as a leaf; `trainable` decides which
    /// leaves require gradients.
    pub fn bind_into(&self, g: &mut Graph<T>, bound: &mut Bound, trainable: impl Fn(&str) -> bool) {
        for (name, t) in &self.tensors {
            let is_trainable = trainable(name);
            let var = g.leaf(t.clone(), is_trainable);
            bound.vars.insert(name.clone(), var);
            if is_trainable {
                bound.trainable.push(name.clone());
            }
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, v)| other.tensors.get(k).is_some_and(|o| v.bitwise_eq(o)))
    }
}

/// Graph variables for a set of bound parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("parameter '{name}' is not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Names of trainable leaves in binding order.
    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }
}

/// `N(0, std²)` weight, used for transformer and adapter matrices.
pub fn normal_init<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// `U(-1/√fan_in, 1/√fan_in)`, the usual default for small linear layers.
pub fn fan_in_init<T: Float, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

/// `x·w + b` for a 2-D `x`.
pub fn linear<T: Float>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(match b {
        Some(b) => g.add_row(y, b)?,
        None => y,
    })
}
