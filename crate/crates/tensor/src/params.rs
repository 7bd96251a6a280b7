use std::collections::HashMap;

use crate::array::Array;
use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    /// Branch tag used for gradient gating (e.g. "shape", "pose").
    pub group: String,
    pub value: Array,
}

/// Named model weights, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: &str, value: Array) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        self.by_name.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group: group.to_string(),
            value,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on `tape`: as a leaf when `trainable(group)` holds,
    /// otherwise as a constant that never receives a gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut train = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let t = trainable(&p.group);
            vars.push(if t {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            });
            train.push(t);
        }
        Bound { vars, train }
    }

    pub fn bind_all(&self, tape: &mut Tape) -> Bound {
        self.bind(tape, |_| true)
    }

    /// Overwrites values from `(name, array)` pairs; every name must exist
    /// with the same shape.
    pub fn load_values(&mut self, values: Vec<(String, Array)>) -> Result<()> {
        for (name, value) in values {
            let i = *self
                .by_name
                .get(&name)
                .ok_or_else(|| invalid("param_store", format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[i];
            if p.value.shape() != value.shape() {
                return Err(invalid(
                    "param_store",
                    format!("`{name}`: stored shape {:?}, loaded {:?}", p.value.shape(), value.shape()),
                ));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// The tape nodes of a [`ParamStore`] for one step.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    train: Vec<bool>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub(crate) fn var_at(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.train[i]
    }
}
