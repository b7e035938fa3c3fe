use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::segnet::{self, NetworkParams};
use crate::tensor::Tensor;

/// Window start positions along one axis: `0, stride, ...`, with the last
/// window clamped to end at the volume edge.
pub fn window_starts(len: usize, crop: usize, stride: usize) -> Result<Vec<usize>> {
    if crop == 0 || crop > len || stride == 0 || stride > crop {
        return Err(Error::InvalidArgument(format!("window {crop} / stride {stride} over length {len}")));
    }
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + crop < len).collect();
    starts.push(len - crop);
    starts.dedup();
    Ok(starts)
}

/// Average per-window logits over every covering window.
///
/// `window` maps a window origin to `[C, crop...]` channel-major logits.
/// Returns `[C, H*W*D]` channel-major fused logits.
pub fn fuse_windows(
    shape: [usize; 3],
    crop: [usize; 3],
    stride: [usize; 3],
    classes: usize,
    mut window: impl FnMut([usize; 3]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let [h, w, d] = shape;
    let v = h * w * d;
    let cv = crop[0] * crop[1] * crop[2];
    let mut acc = vec![0.0; classes * v];
    let mut hits = vec![0u32; v];
    let sx = window_starts(h, crop[0], stride[0])?;
    let sy = window_starts(w, crop[1], stride[1])?;
    let sz = window_starts(d, crop[2], stride[2])?;
    for &x0 in &sx {
        for &y0 in &sy {
            for &z0 in &sz {
                let logits = window([x0, y0, z0])?;
                if logits.len() != classes * cv {
                    return Err(Error::shape("fuse_windows", format!("window gave {} logits", logits.len())));
                }
                for x in 0..crop[0] {
                    for y in 0..crop[1] {
                        for z in 0..crop[2] {
                            let local = (x * crop[1] + y) * crop[2] + z;
                            let global = ((x0 + x) * w + y0 + y) * d + z0 + z;
                            hits[global] += 1;
                            for c in 0..classes {
                                acc[c * v + global] += logits[c * cv + local];
                            }
                        }
                    }
                }
            }
        }
    }
    for c in 0..classes {
        for (a, &n) in acc[c * v..(c + 1) * v].iter_mut().zip(&hits) {
            *a /= f64::from(n);
        }
    }
    Ok(acc)
}

/// Per-voxel argmax of `[C, V]` logits; ties go to the lower class.
pub fn argmax_classes(logits: &[f64], classes: usize) -> Vec<u8> {
    let v = logits.len() / classes;
    (0..v)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if logits[c * v + i] > logits[best * v + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

fn extract(volume: &Tensor, origin: [usize; 3], crop: [usize; 3]) -> Result<Tensor> {
    let s = volume.shape();
    let (w, d) = (s[1], s[2]);
    let mut out = Vec::with_capacity(crop.iter().product());
    for x in 0..crop[0] {
        for y in 0..crop[1] {
            let start = ((origin[0] + x) * w + origin[1] + y) * d + origin[2];
            out.extend_from_slice(&volume.data()[start..start + crop[2]]);
        }
    }
    Tensor::new(vec![1, 1, crop[0], crop[1], crop[2]], out)
}

/// Mean-head logits fused over a sliding window, `[C, V]` channel-major.
pub fn sliding_window_logits(params: &NetworkParams, volume: &Tensor, crop: [usize; 3], stride: [usize; 3]) -> Result<Vec<f64>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::shape("sliding_window", format!("expected [H, W, D], got {s:?}")));
    }
    let shape = [s[0], s[1], s[2]];
    if (0..3).any(|k| crop[k] > shape[k]) {
        return Err(Error::InvalidArgument(format!("crop {crop:?} larger than volume {shape:?}")));
    }
    fuse_windows(shape, crop, stride, params.classes(), |origin| {
        let x = extract(volume, origin, crop)?;
        let (tape, out) = segnet::infer(params, &x)?;
        Ok(tape.value(out.mean).data().to_vec())
    })
}

pub fn predict(params: &NetworkParams, volume: &Tensor, crop: [usize; 3], stride: [usize; 3]) -> Result<Vec<u8>> {
    let logits = sliding_window_logits(params, volume, crop, stride)?;
    Ok(argmax_classes(&logits, params.classes()))
}

/// Attach sliding-window argmax labels to each sample; the samples stay unlabeled.
pub fn generate_pseudo_labels(
    params: &NetworkParams,
    unlabeled: &[VolumeSample],
    crop: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<VolumeSample>> {
    unlabeled
        .iter()
        .map(|s| {
            let label = predict(params, &s.volume, crop, stride)?;
            let mut out = VolumeSample::new(s.id.clone(), s.volume.clone(), Some(label), false)?;
            out.ambiguity = s.ambiguity;
            Ok(out)
        })
        .collect()
}
