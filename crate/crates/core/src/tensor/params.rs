use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// A named trainable array, stored outside any graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<Float>,
}

impl Param {
    pub fn new(shape: &[usize], data: Vec<Float>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("data length {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: Float) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn normal(shape: &[usize], std: Float, rng: &mut Stream) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| rng.normal() * std).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore(BTreeMap<String, Param>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Param) {
        self.0.insert(name.into(), p);
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.0.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.0.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.0.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.0.values().map(Param::len).sum()
    }

    /// Parameters whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.0.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

/// Per-parameter gradients, accumulated additively.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vec<Float>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[Float]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<Float>)> {
        self.0.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.0.insert(k.clone(), g.clone());
                }
            }
        }
    }

    pub fn global_norm(&self) -> Float {
        self.0.values().flatten().map(|g| g * g).sum::<Float>().sqrt()
    }

    pub fn scale(&mut self, s: Float) {
        self.0.values_mut().flatten().for_each(|g| *g *= s);
    }

    /// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip(&mut self, max_norm: Float) -> Float {
        let norm = self.global_norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().flatten().all(|g| g.is_finite())
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Materializes stored parameters as graph leaves for one forward pass.
///
/// Each parameter becomes a single leaf no matter how often it is requested,
/// so repeated uses accumulate into one gradient.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, Tensor>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self { store, trainable, leaves: RefCell::new(BTreeMap::new()) }
    }

    /// Inference binding: no leaf requires gradient, so no graph is kept.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, false)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let t = if self.trainable {
            Tensor::leaf(p.data.clone(), &p.shape)?
        } else {
            Tensor::new(p.data.clone(), &p.shape)?
        };
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn gradients(&self) -> Gradients {
        Gradients(
            self.leaves
                .borrow()
                .iter()
                .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g.clone())))
                .collect(),
        )
    }
}
