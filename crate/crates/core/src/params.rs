//! Named, trainable parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    ScaledNormal { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Ordered collection of parameters with unique dotted names
/// (e.g. `glf.level2.query`). Insertion order is the canonical order used by
/// checkpoints and the optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_requires_grad(true),
        });
        Ok(ParamId(id))
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut SplitMix64,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::ScaledNormal { fan_in } => {
                let std = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.normal() * std).collect()
            }
            Init::Normal { std } => (0..n).map(|_| rng.normal() * std).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        self.insert(name, Tensor::from_f64(shape.to_vec(), &data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Zeroes the values of every parameter whose name starts with `prefix`.
    pub fn zero_values(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.b", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a.b", Tensor::zeros(vec![2])).is_err());
        assert_eq!(s.id_of("a.b"), Some(ParamId(0)));
        assert!(s.tensor(ParamId(0)).requires_grad());
    }

    #[test]
    fn scaled_normal_has_expected_spread() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(1);
        let id = s
            .init("w", &[256, 256], Init::ScaledNormal { fan_in: 256 }, &mut rng)
            .unwrap();
        let d = s.tensor(id).data();
        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
        assert!((var * 256.0 - 1.0).abs() < 0.02, "{var}");
    }
}
