//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// How freshly registered weights are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the first extent.
    Uniform,
    Zeros,
    Ones,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers `name` with the given shape and initialisation.
    ///
    /// `fan_in` overrides the fan-in used by [`Init::Uniform`].
    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        fan_in: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Uniform => {
                let fan = fan_in.unwrap_or(shape[0]).max(1);
                let bound = 1.0 / (fan as f64).sqrt();
                (0..numel).map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound))).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::arg(format!("parameter {name} registered twice")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i]).ok_or_else(|| Error::arg(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::arg(format!("unknown parameter {name}"))),
        }
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Names variables created elsewhere (one per parameter, in
    /// registration order), e.g. by a gradient checker.
    pub fn bound_from(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::dim(format!("{} variables for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(Bound { vars: vars.to_vec(), index: self.index.clone() })
    }

    /// Replaces the tensors with `tensors`, checking count and shapes.
    pub fn assign(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim(format!("{} tensors for {} parameters", tensors.len(), self.tensors.len())));
        }
        for ((name, old), new) in self.names.iter().zip(&self.tensors).zip(&tensors) {
            if old.shape() != new.shape() {
                return Err(Error::dim(format!("parameter {name}: shape {:?} vs {:?}", new.shape(), old.shape())));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Tape variables of a bound [`ParamStore`], addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| Error::arg(format!("unknown parameter {name}")))
    }

    /// Variables in registration order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in registration order; zeros for parameters the loss did
    /// not reach.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tape.value(v).numel()],
            })
            .collect()
    }
}
