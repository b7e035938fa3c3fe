use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::segnet::NetworkParams;
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← momentum·v + (g + wd·θ)`, `θ ← θ − lr·v` for every parameter.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, _) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::shape("sgd_step", format!("no gradient for {name}")))?;
        if !g.is_finite() {
            return Err(Error::NonFinite("sgd_step"));
        }
    }
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != theta.shape() {
            return Err(Error::shape("sgd_step", format!("{name}: {:?} vs {:?}", g.shape(), theta.shape())));
        }
        let v = state.velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
        for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + (gi + weight_decay * *t);
            *t -= lr * *vi;
        }
    }
    Ok(())
}
