//! Named learnable tensors shared by the backbone and the matcher.

use std::rc::Rc;

use gmrw_tape::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Flat registry of parameters; modules keep indices into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<S>>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.values.push(Rc::new(value));
        self.values.len() - 1
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> usize {
        let t = Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            S::lit(z * std)
        });
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.values[i]
    }

    pub fn set(&mut self, i: usize, value: Tensor<S>) {
        assert_eq!(value.shape(), self.values[i].shape(), "parameter {} shape", self.names[i]);
        self.values[i] = Rc::new(value);
    }

    /// Mutable access, copying only if a tape still holds the tensor.
    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<S> {
        Rc::make_mut(&mut self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn var<'t>(&self, tape: &'t Tape<S>, i: usize) -> Var<'t, S> {
        tape.param(i, Rc::clone(&self.values[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
