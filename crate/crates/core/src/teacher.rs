//! Mean-teacher state: EMA-tracked parameters and input noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::segnet::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: NetworkParams,
    pub decay: f64,
}

impl TeacherState {
    pub fn new(params: NetworkParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(TeacherState { params, decay })
    }

    /// `θ_t ← decay·θ_t + (1 − decay)·θ_s` for every parameter.
    pub fn ema_update(&mut self, student: &NetworkParams) -> Result<()> {
        let decay = self.decay;
        for ((name, t), (sname, s)) in self.params.iter_mut().zip(student.iter()) {
            if name != sname || t.shape() != s.shape() {
                return Err(Error::shape("ema_update", format!("{name} vs {sname}")));
            }
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        Ok(())
    }
}

/// `volume + clamp(ε, −clip, clip)` with `ε ~ N(0, noise_std²)` per voxel.
pub fn perturb_input<R: Rng + ?Sized>(volume: &Tensor, noise_std: f64, clip: f64, rng: &mut R) -> Result<Tensor> {
    if noise_std < 0.0 || clip <= 0.0 {
        return Err(Error::InvalidArgument(format!("noise std {noise_std}, clip {clip}")));
    }
    let mut out = volume.clone();
    if noise_std == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for v in out.data_mut() {
        *v += normal.sample(rng).clamp(-clip, clip);
    }
    Ok(out)
}
