use serde::{Deserialize, Serialize};

use crate::diffcore::{Group, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Constant learning rate per parameter group. The position rate is
/// multiplied by the scene extent before use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub feature: f64,
    pub network: f64,
    pub sh: f64,
    pub opacity: f64,
    pub geometry: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates { position: 1.6e-4, feature: 2.5e-3, network: 2.5e-3, sh: 2.5e-3, opacity: 0.05, geometry: 5e-3 }
    }
}

impl LearningRates {
    pub fn get(&self, group: Group) -> f64 {
        match group {
            Group::Position => self.position,
            Group::Feature => self.feature,
            Group::Network => self.network,
            Group::Sh => self.sh,
            Group::Opacity => self.opacity,
            Group::Geometry => self.geometry,
            Group::Frozen => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.position, self.feature, self.network, self.sh, self.opacity, self.geometry];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("learning rates must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros(), v: zeros(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }

    /// One bias-corrected update of every non-frozen parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: &LearningRates) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (T::lit(self.beta1), T::lit(self.beta2), T::lit(self.eps));
        for ((id, g), (m, v)) in store.ids().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let param = store.param_mut(id);
            if g.shape() != param.value.shape() || m.shape() != param.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} is {:?} but gradient is {:?} and moments {:?}",
                    param.name,
                    param.value.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            let rate = lr.get(param.group);
            if rate == 0.0 {
                continue;
            }
            let step_size = T::lit(rate / c1);
            let c2 = T::lit(c2);
            let p = param.value.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= step_size * *m / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rebuild the moment rows of a per-point parameter after densification.
    /// `sources[r]` is the old row behind new row `r`, or `None` for a fresh
    /// row with zero moments.
    pub fn remap_rows(&mut self, id: ParamId, sources: &[Option<usize>]) {
        for t in [&mut self.m[id.0], &mut self.v[id.0]] {
            *t = remap(t, sources, T::zero());
        }
    }
}

/// Gather rows of `t` by `sources`, filling `None` rows with `fill`.
pub(crate) fn remap<T: Real>(t: &Tensor<T>, sources: &[Option<usize>], fill: T) -> Tensor<T> {
    let mut shape = t.shape().to_vec();
    shape[0] = sources.len();
    let cols = t.cols();
    let mut data = Vec::with_capacity(sources.len() * cols);
    for s in sources {
        match s {
            Some(i) => data.extend_from_slice(t.row(*i)),
            None => data.extend(std::iter::repeat_n(fill, cols)),
        }
    }
    Tensor::new(&shape, data).expect("remapped rows keep the column count")
}
