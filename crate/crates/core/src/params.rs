//! Named parameter storage shared by the model components.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Receives decoupled weight decay. False for norm gains and biases.
    pub decay: bool,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight matrix `rows×cols` with N(0, std²) entries.
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> ParamId {
        let value = rng.normal_tensor(&[rows, cols], std);
        self.add(name, value, true)
    }

    /// Weight with a fan-in scaled init, `std = 1/sqrt(fan_in)`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        self.weight(name, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[rows, cols]), true)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[1, len]), false)
    }

    /// RMSNorm gain, initialized to one.
    pub fn gain(&mut self, name: &str, len: usize) -> ParamId {
        self.add(name, Tensor::full(&[1, len], 1.0), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            let src = other.get(id);
            if src.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    /// Puts every parameter on `tape`, tracked or not.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Binding<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if track {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    /// Builds a store from raw `(name, tensor, decay)` triples.
    pub fn from_parts(parts: Vec<(String, Tensor, bool)>) -> Self {
        ParamStore {
            params: parts
                .into_iter()
                .map(|(name, value, decay)| Param { name, value, decay })
                .collect(),
        }
    }
}

/// Parameters as tape variables for one forward pass.
pub struct Binding<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Leaves in store order; index `i` matches parameter `i`.
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Binding { vars }
    }
}
