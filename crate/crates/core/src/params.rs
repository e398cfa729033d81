use std::collections::HashMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Gradients keyed by parameter name, in parameter order.
pub type NamedGrads = Vec<(String, Vec<f64>)>;

/// Ordered collection of named parameter arrays.
///
/// Frozen auxiliary arrays (noise draws, masks) live here too with
/// `trainable == false`, so a checkpoint captures everything needed to
/// rebuild a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        if let Some(p) = self.params.iter_mut().find(|p| p.name == name) {
            p.value = value;
            p.trainable = trainable;
        } else {
            self.params.push(Param {
                name,
                value,
                trainable,
            });
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        for p in other.params {
            self.insert(p.name, p.value, p.trainable);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Places every parameter on `tape`; trainable ones track gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = if p.trainable {
                    tape.leaf(p.value.clone().with_grad(true))
                } else {
                    tape.constant(p.value.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Places every parameter on `tape` as a constant (evaluation only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|p| (p.name.clone(), tape.constant(p.value.clone())))
            .collect();
        Bindings { vars }
    }

    /// Gradients of every trainable parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape, bound: &Bindings) -> Result<NamedGrads> {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| {
                let v = bound.get(&p.name)?;
                let g = tape
                    .grad(v)
                    .ok_or_else(|| Error::State(format!("no gradient for {}", p.name)))?;
                Ok((p.name.clone(), g.to_vec()))
            })
            .collect()
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }
}
