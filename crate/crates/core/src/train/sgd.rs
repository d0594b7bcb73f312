//! SGD with momentum and L2 weight decay, one rate per parameter group.

use crate::param::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::LearningRates;

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// `v ← μv + g + λp; p ← p − lr·v`, then clears the gradients.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, rates: LearningRates) {
    let (mu, wd) = (T::lit(state.momentum), T::lit(state.weight_decay));
    for (p, v) in store.iter_mut().zip(state.velocity.iter_mut()) {
        let lr = T::lit(match p.group {
            ParamGroup::Backbone => rates.backbone,
            ParamGroup::Classifier => rates.classifier,
        });
        let (pv, g) = (p.value.data_mut(), p.grad.data());
        for ((w, &gi), vi) in pv.iter_mut().zip(g).zip(v.data_mut()) {
            *vi = mu * *vi + gi + wd * *w;
            *w -= lr * *vi;
        }
    }
    store.zero_grad();
}
