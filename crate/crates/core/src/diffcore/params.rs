use std::ops::Index;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

/// Optimizer parameter group; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Position,
    Feature,
    Network,
    Sh,
    Opacity,
    /// Per-point scale and rotation in the SH path.
    Geometry,
    /// Stored and checkpointed but never updated by the optimizer.
    Frozen,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Position => "position",
            Group::Feature => "feature",
            Group::Network => "network",
            Group::Sh => "sh",
            Group::Opacity => "opacity",
            Group::Geometry => "geometry",
            Group::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Option<Group> {
        Some(match s {
            "position" => Group::Position,
            "feature" => Group::Feature,
            "network" => Group::Network,
            "sh" => Group::Sh,
            "opacity" => Group::Opacity,
            "geometry" => Group::Geometry,
            "frozen" => Group::Frozen,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: Group,
    /// One row per Gaussian; densification edits these rows.
    pub per_point: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, group: Group, per_point: bool) -> ParamId {
        self.params.push(Param { name: name.to_string(), value, group, per_point });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Record every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                    per_point: p.per_point,
                })
                .collect(),
        }
    }
}

/// Parameters bound to tape leaves for one pass.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps existing vars, one per parameter in store order. Lets gradient
    /// checks feed perturbed parameter values through model code.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients in parameter order, after the tape's backward pass.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}
