use std::ops::Index;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// weights but never touched by the optimizer.
    pub trainable: bool,
}

/// Named, ordered collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element = f32> {
    params: Vec<Param<T>>,
}

/// Tape variables for every entry of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind tape variables created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Record every tensor on the tape. Trainable entries become gradient
    /// leaves; buffers become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Record every tensor as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound { vars }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrite values by name. Every stored name must be present with a
    /// matching shape.
    pub fn load_named(&mut self, records: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut by_name: std::collections::HashMap<_, _> = records.into_iter().collect();
        for p in &mut self.params {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_named",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format("checkpoint", format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}

/// He-uniform: `U(±sqrt(6 / fan_in))`.
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

/// Glorot-uniform: `U(±sqrt(6 / (fan_in + fan_out)))`.
pub fn glorot_uniform<T: Element>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}
