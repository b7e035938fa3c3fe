//! Boundary-aware and prototype-aware contrastive losses.

mod boundary;
mod prototype;

pub use boundary::{extract_boundary, sample_boundary_pixels, two_sided_boundary, BoundaryIndexSet};
pub use prototype::{ClassPrototype, Prototypes, FEATURE_DIM};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp_slice, sigmoid, softmax_in_place, softplus, Tape, Tensor, Var};

/// `(channels, voxels)` of a channel-major feature map, `[F, ...]` or `[1, F, ...]`.
fn feature_layout(shape: &[usize]) -> Result<(usize, usize)> {
    let body = match shape {
        [1, rest @ ..] if rest.len() >= 2 => rest,
        s if s.len() >= 2 => s,
        _ => return Err(Error::shape("features", format!("need [F, ...], got {shape:?}"))),
    };
    Ok((body[0], body[1..].iter().product()))
}

/// Supervised contrastive loss over the sampled boundary voxels `nb`.
///
/// Summed over anchors; the denominator of anchor `i` runs over `nb ∖ {i}`
/// and anchors without a same-class partner contribute nothing.
pub fn bcl_loss(tape: &mut Tape, proj: Var, nb: &BoundaryIndexSet, tau1: f64) -> Result<Var> {
    if nb.len() < 2 {
        return Err(Error::InvalidArgument(format!("boundary set of size {}", nb.len())));
    }
    if nb.labels.len() != nb.len() {
        return Err(Error::InvalidArgument("boundary labels and indices differ in length".into()));
    }
    if tau1 <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {tau1}")));
    }
    let (f, v) = feature_layout(tape.value(proj).shape())?;
    if let Some(&bad) = nb.indices.iter().find(|&&i| i >= v) {
        return Err(Error::InvalidArgument(format!("boundary index {bad} outside {v} voxels")));
    }
    let n = nb.len();
    let indices = nb.indices.clone();
    let labels = nb.labels.clone();
    let gather = move |data: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; n * f];
        for (a, &i) in indices.iter().enumerate() {
            for k in 0..f {
                g[a * f + k] = data[k * v + i];
            }
        }
        g
    };
    let sims = move |g: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                s[a * n + b] = g[a * f..(a + 1) * f].iter().zip(&g[b * f..(b + 1) * f]).map(|(x, y)| x * y).sum::<f64>() / tau1;
            }
        }
        s
    };
    // d loss / d sim[a][b], and the loss itself
    let coefficients = move |s: &[f64]| -> (f64, Vec<f64>) {
        let mut w = vec![0.0; n * n];
        let mut loss = 0.0;
        let mut row = Vec::with_capacity(n - 1);
        for a in 0..n {
            let positives: Vec<usize> = (0..n).filter(|&b| b != a && labels[b] == labels[a]).collect();
            if positives.is_empty() {
                continue;
            }
            row.clear();
            row.extend((0..n).filter(|&b| b != a).map(|b| s[a * n + b]));
            let lse = logsumexp_slice(&row);
            let inv = 1.0 / positives.len() as f64;
            loss += lse - inv * positives.iter().map(|&p| s[a * n + p]).sum::<f64>();
            softmax_in_place(&mut row);
            for (b, p) in (0..n).filter(|&b| b != a).zip(&row) {
                w[a * n + b] += p;
            }
            for &p in &positives {
                w[a * n + p] -= inv;
            }
        }
        (loss, w)
    };

    let g = gather(tape.value(proj).data());
    let (value, _) = coefficients(&sims(&g));
    let indices = nb.indices.clone();
    tape.record("bcl_loss", &[proj], Tensor::scalar(value), move |ctx| {
        let g = gather(ctx.inputs[0].data());
        let (_, w) = coefficients(&sims(&g));
        let up = ctx.grad[0] / tau1;
        let mut grad = vec![0.0; ctx.inputs[0].numel()];
        for (a, &i) in indices.iter().enumerate() {
            for b in 0..n {
                let c = up * (w[a * n + b] + w[b * n + a]);
                if c == 0.0 {
                    continue;
                }
                for k in 0..f {
                    grad[k * v + i] += c * g[b * f + k];
                }
            }
        }
        vec![Some(grad)]
    })
}

/// Prototype contrastive loss, averaged over every voxel of `proj`.
///
/// Per voxel with class `p` and opposite class `n`:
/// `fᵀσ_p f + softplus(s_n − s_p)` where `s_c = f·μ_c/τ2 + fᵀσ_c f/(2τ2²)`.
pub fn pcl_loss(tape: &mut Tape, proj: Var, labels: &[u8], protos: &Prototypes, tau2: f64) -> Result<Var> {
    if !protos.is_frozen() {
        return Err(Error::Prototype("prototypes must be frozen before use".into()));
    }
    if protos.classes().len() != 2 || protos.classes().iter().any(|c| c.count == 0) {
        return Err(Error::Prototype("need two non-empty class prototypes".into()));
    }
    if tau2 <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {tau2}")));
    }
    let (f, v) = feature_layout(tape.value(proj).shape())?;
    if f != FEATURE_DIM || labels.len() != v {
        return Err(Error::shape("pcl_loss", format!("{f} channels, {v} voxels, {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument("pcl labels must be binary".into()));
    }
    let protos: [ClassPrototype; 2] = [protos.classes()[0].clone(), protos.classes()[1].clone()];
    let labels = labels.to_vec();

    let forward = {
        let protos = protos.clone();
        let labels = labels.clone();
        move |data: &[f64], mut grad: Option<(&mut [f64], f64)>| -> f64 {
            let mut total = 0.0;
            let mut feat = [0.0; FEATURE_DIM];
            let mut sf = [[0.0; FEATURE_DIM]; 2];
            for i in 0..v {
                for k in 0..FEATURE_DIM {
                    feat[k] = data[k * v + i];
                }
                let p = labels[i] as usize;
                let q = [protos[0].quad(&feat), protos[1].quad(&feat)];
                let score = |c: usize| {
                    let dot: f64 = feat.iter().zip(&protos[c].mean).map(|(a, b)| a * b).sum();
                    dot / tau2 + q[c] / (2.0 * tau2 * tau2)
                };
                let z = score(1 - p) - score(p);
                total += q[p] + softplus(z);
                if let Some((g, up)) = grad.as_mut() {
                    for (c, out) in sf.iter_mut().enumerate() {
                        for (a, o) in out.iter_mut().enumerate() {
                            *o = protos[c].cov[a * FEATURE_DIM..(a + 1) * FEATURE_DIM]
                                .iter()
                                .zip(&feat)
                                .map(|(s, x)| s * x)
                                .sum();
                        }
                    }
                    let sz = sigmoid(z);
                    let scale = *up / v as f64;
                    let n = 1 - p;
                    for k in 0..FEATURE_DIM {
                        let ds = |c: usize| protos[c].mean[k] / tau2 + sf[c][k] / (tau2 * tau2);
                        let d = 2.0 * sf[p][k] + sz * (ds(n) - ds(p));
                        g[k * v + i] += scale * d;
                    }
                }
            }
            total / v as f64
        }
    };
    let value = forward(tape.value(proj).data(), None);
    tape.record("pcl_loss", &[proj], Tensor::scalar(value), move |ctx| {
        let mut grad = vec![0.0; ctx.inputs[0].numel()];
        forward(ctx.inputs[0].data(), Some((&mut grad, ctx.grad[0])));
        vec![Some(grad)]
    })
}
