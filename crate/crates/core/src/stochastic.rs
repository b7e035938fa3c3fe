//! Low-rank multivariate Gaussian over logits and the Monte-Carlo
//! log-likelihood loss built on it.
//!
//! Logits of one volume are flattened voxel-major, class-minor: entry
//! `v * C + c`. The covariance is `F Fᵀ + diag(d)` with `F` of shape
//! `[V*C, r]`; it is never materialized.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::segnet::NetworkOutput;
use crate::tensor::{Tape, Tensor, Var};

/// Lower bound added to the softplus of the raw diagonal head.
pub const DIAG_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GaussianLogitDistribution {
    /// `[V*C]`
    pub mu: Var,
    /// `[V*C, r]`
    pub factor: Var,
    /// `[V*C]`, every entry `>= DIAG_FLOOR`
    pub diag: Var,
    sqrt_diag: Var,
    pub voxels: usize,
    pub classes: usize,
    pub rank: usize,
}

/// `[1, K, H, W, D]` head as `[V, K]`.
fn channels_last(tape: &mut Tape, head: Var) -> Result<(Var, usize, usize)> {
    let shape = tape.value(head).shape().to_vec();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::shape("build_distribution", format!("expected a single-volume head, got {shape:?}")));
    }
    let k = shape[1];
    let v = shape[2] * shape[3] * shape[4];
    let flat = tape.reshape(head, &[k, v])?;
    Ok((tape.transpose(flat)?, v, k))
}

pub fn build_distribution(tape: &mut Tape, out: &NetworkOutput) -> Result<GaussianLogitDistribution> {
    let (mean, voxels, classes) = channels_last(tape, out.mean)?;
    let (factor, fv, ck) = channels_last(tape, out.factor)?;
    let (diag_raw, dv, dc) = channels_last(tape, out.diag_raw)?;
    if fv != voxels || dv != voxels || dc != classes || ck % classes != 0 {
        return Err(Error::shape("build_distribution", "inconsistent head shapes"));
    }
    let rank = ck / classes;
    let n = voxels * classes;
    let mu = tape.reshape(mean, &[n])?;
    let factor = tape.reshape(factor, &[n, rank])?;
    let diag_flat = tape.reshape(diag_raw, &[n])?;
    let sp = tape.softplus(diag_flat)?;
    let diag = tape.add_scalar(sp, DIAG_FLOOR)?;
    let sqrt_diag = tape.sqrt(diag)?;
    Ok(GaussianLogitDistribution { mu, factor, diag, sqrt_diag, voxels, classes, rank })
}

/// Standard-normal draws for one reparameterized sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// length `r`, shared by every logit
    pub low_rank: Vec<f64>,
    /// length `V*C`, independent per logit
    pub diagonal: Vec<f64>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(dist: &GaussianLogitDistribution, rng: &mut R) -> Self {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let low_rank = (0..dist.rank).map(|_| normal()).collect();
        let diagonal = (0..dist.voxels * dist.classes).map(|_| normal()).collect();
        Noise { low_rank, diagonal }
    }
}

/// `mu + F ε1 + sqrt(d) ⊙ ε2` for each supplied noise pair.
pub fn sample_with_noise(tape: &mut Tape, dist: &GaussianLogitDistribution, noise: &[Noise]) -> Result<Vec<Var>> {
    let n = dist.voxels * dist.classes;
    noise
        .iter()
        .map(|eps| {
            if eps.low_rank.len() != dist.rank || eps.diagonal.len() != n {
                return Err(Error::shape("sample_logits", "noise does not match the distribution"));
            }
            let e1 = tape.constant(Tensor::new(vec![dist.rank, 1], eps.low_rank.clone())?);
            let e2 = tape.constant(Tensor::vector(eps.diagonal.clone()));
            let low = tape.matmul(dist.factor, e1)?;
            let low = tape.reshape(low, &[n])?;
            let diag = tape.mul(dist.sqrt_diag, e2)?;
            let g = tape.add(dist.mu, low)?;
            tape.add(g, diag)
        })
        .collect()
}

pub fn sample_logits<R: Rng + ?Sized>(
    tape: &mut Tape,
    dist: &GaussianLogitDistribution,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Var>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let noise: Vec<Noise> = (0..samples).map(|_| Noise::draw(dist, rng)).collect();
    sample_with_noise(tape, dist, &noise)
}

/// Dense one-hot `[V, C]` from class indices.
pub fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l as usize] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn check_one_hot(labels: &Tensor, voxels: usize, classes: usize) -> Result<()> {
    if labels.shape() != [voxels, classes] {
        return Err(Error::shape("supervised_loss_au", format!("labels {:?} vs [{voxels}, {classes}]", labels.shape())));
    }
    for row in labels.data().chunks(classes) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(Error::InvalidArgument("labels are not one-hot".into()));
        }
    }
    Ok(())
}

/// `log p(y | g) = Σ_i Σ_c y_ic log softmax(g_i)_c` for one logit sample `[V*C]`.
pub fn log_likelihood(tape: &mut Tape, logits: Var, labels: Var, voxels: usize, classes: usize) -> Result<Var> {
    let g = tape.reshape(logits, &[voxels, classes])?;
    let logp = tape.log_softmax(g)?;
    let picked = tape.mul(logp, labels)?;
    tape.sum(picked)
}

/// `-logsumexp_s log p(y | g_s) + log S` over already drawn samples.
pub fn supervised_loss_from_samples(
    tape: &mut Tape,
    samples: &[Var],
    labels: &Tensor,
    voxels: usize,
    classes: usize,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    check_one_hot(labels, voxels, classes)?;
    let y = tape.constant(labels.clone());
    let ll = samples
        .iter()
        .map(|&g| log_likelihood(tape, g, y, voxels, classes))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&ll)?;
    let lse = tape.logsumexp(stacked)?;
    let neg = tape.neg(lse)?;
    tape.add_scalar(neg, (samples.len() as f64).ln())
}

/// Monte-Carlo negative log-likelihood with `samples` reparameterized draws.
pub fn supervised_loss_au<R: Rng + ?Sized>(
    tape: &mut Tape,
    dist: &GaussianLogitDistribution,
    labels: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<Var> {
    check_one_hot(labels, dist.voxels, dist.classes)?;
    let g = sample_logits(tape, dist, samples, rng)?;
    supervised_loss_from_samples(tape, &g, labels, dist.voxels, dist.classes)
}
