//! Linear layers and small MLPs over [`ParamStore`] parameters.

use rand::Rng;

use super::params::{Bound, Group, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform fan-in init: bound `sqrt(6 / fan_in)` when a ReLU follows,
    /// `sqrt(3 / fan_in)` otherwise. Bias starts at zero.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        relu_follows: bool,
        rng: &mut R,
    ) -> Self {
        let gain = if relu_follows { 6.0 } else { 3.0 };
        let bound = (gain / fan_in as f64).sqrt();
        let w: Vec<T> =
            (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        let weight = store.add(
            &format!("{name}.weight"),
            Tensor::new(&[fan_in, fan_out], w).expect("linear weight shape"),
            Group::Network,
            false,
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), Group::Network, false);
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(p[self.weight])?.add(p[self.bias])
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], i + 1 < n, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}
