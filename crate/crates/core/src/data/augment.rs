use rand::Rng;

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rebuild `s` on `shape`, reading voxel `src(dst)` for every destination voxel.
fn remap(s: &VolumeSample, shape: [usize; 3], src: impl Fn([usize; 3]) -> [usize; 3]) -> Result<VolumeSample> {
    let [_, sw, sd] = s.shape();
    let [h, w, d] = shape;
    let mut order = Vec::with_capacity(h * w * d);
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let [a, b, c] = src([x, y, z]);
                order.push((a * sw + b) * sd + c);
            }
        }
    }
    let data = order.iter().map(|&i| s.volume.data()[i]).collect();
    let label = s.label.as_ref().map(|l| order.iter().map(|&i| l[i]).collect());
    Ok(VolumeSample {
        id: s.id.clone(),
        volume: Tensor::new(vec![h, w, d], data)?,
        label,
        is_labeled: s.is_labeled,
        ambiguity: s.ambiguity,
    })
}

/// Sub-volume of size `crop` at a uniformly drawn offset.
pub fn random_crop<R: Rng + ?Sized>(s: &VolumeSample, crop: [usize; 3], rng: &mut R) -> Result<VolumeSample> {
    let shape = s.shape();
    if (0..3).any(|k| crop[k] == 0 || crop[k] > shape[k]) {
        return Err(Error::InvalidArgument(format!("crop {crop:?} does not fit volume {shape:?}")));
    }
    let off: Vec<usize> = (0..3).map(|k| rng.random_range(0..=shape[k] - crop[k])).collect();
    remap(s, crop, |[x, y, z]| [x + off[0], y + off[1], z + off[2]])
}

/// Mirror along `axis`.
pub fn flip(s: &VolumeSample, axis: usize) -> Result<VolumeSample> {
    if axis > 2 {
        return Err(Error::InvalidArgument(format!("flip axis {axis}")));
    }
    let shape = s.shape();
    remap(s, shape, |mut p| {
        p[axis] = shape[axis] - 1 - p[axis];
        p
    })
}

/// Rotate by `k` quarter turns in the plane of axes `(a, b)`.
pub fn rot90(s: &VolumeSample, k: usize, plane: (usize, usize)) -> Result<VolumeSample> {
    let (a, b) = plane;
    if a > 2 || b > 2 || a == b {
        return Err(Error::InvalidArgument(format!("rotation plane {plane:?}")));
    }
    let mut out = s.clone();
    for _ in 0..k % 4 {
        let src_shape = out.shape();
        let mut shape = src_shape;
        shape.swap(a, b);
        // src[b] = dst[a], src[a] = n_a - 1 - dst[b]
        out = remap(&out, shape, |p| {
            let mut q = p;
            q[b] = p[a];
            q[a] = src_shape[a] - 1 - p[b];
            q
        })?;
    }
    Ok(out)
}

/// Each axis independently mirrored with probability 1/2.
pub fn random_flip<R: Rng + ?Sized>(s: &VolumeSample, rng: &mut R) -> Result<VolumeSample> {
    let mut out = s.clone();
    for axis in 0..3 {
        if rng.random_bool(0.5) {
            out = flip(&out, axis)?;
        }
    }
    Ok(out)
}

/// Random quarter turns in a random axis plane; planes with unequal sides only
/// get even turns so the shape is kept.
pub fn random_rot90<R: Rng + ?Sized>(s: &VolumeSample, rng: &mut R) -> Result<VolumeSample> {
    const PLANES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    let plane = PLANES[rng.random_range(0..3)];
    let mut k = rng.random_range(0..4);
    let shape = s.shape();
    if shape[plane.0] != shape[plane.1] {
        k &= !1;
    }
    rot90(s, k, plane)
}
