use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Voxels added by a one-voxel 26-neighborhood dilation of the foreground.
///
/// `mask` is row-major over `shape` (last axis fastest); nonzero entries are
/// foreground. Returned indices are sorted.
pub fn extract_boundary(mask: &[u8], shape: [usize; 3]) -> Result<Vec<usize>> {
    let [h, w, d] = shape;
    if mask.len() != h * w * d {
        return Err(Error::shape("extract_boundary", format!("{} voxels for shape {shape:?}", mask.len())));
    }
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let i = (x * w + y) * d + z;
                if mask[i] != 0 {
                    continue;
                }
                let touches = neighbors26(x, y, z, shape).any(|j| mask[j] != 0);
                if touches {
                    out.push(i);
                }
            }
        }
    }
    Ok(out)
}

/// Background-side and foreground-side shells together: the outer shell of
/// the foreground plus the outer shell of the background.
pub fn two_sided_boundary(mask: &[u8], shape: [usize; 3]) -> Result<Vec<usize>> {
    let inverse: Vec<u8> = mask.iter().map(|&m| u8::from(m == 0)).collect();
    let mut both = extract_boundary(mask, shape)?;
    both.extend(extract_boundary(&inverse, shape)?);
    both.sort_unstable();
    Ok(both)
}

pub(crate) fn neighbors26(x: usize, y: usize, z: usize, shape: [usize; 3]) -> impl Iterator<Item = usize> {
    let [h, w, d] = shape;
    let range = |c: usize, len: usize| c.saturating_sub(1)..=(c + 1).min(len - 1);
    range(x, h).flat_map(move |a| {
        range(y, w).flat_map(move |b| {
            range(z, d).filter_map(move |c| ((a, b, c) != (x, y, z)).then_some((a * w + b) * d + c))
        })
    })
}

/// Sampled near-boundary voxels with their class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryIndexSet {
    pub indices: Vec<usize>,
    pub labels: Vec<u8>,
}

impl BoundaryIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform sample without replacement of `min(cap, |boundary|)` indices.
pub fn sample_boundary_pixels<R: Rng + ?Sized>(
    boundary: &[usize],
    labels: &[u8],
    cap: usize,
    rng: &mut R,
) -> Result<BoundaryIndexSet> {
    if cap < 2 {
        return Err(Error::InvalidArgument(format!("boundary sample cap {cap} < 2")));
    }
    if let Some(&bad) = boundary.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::InvalidArgument(format!("boundary index {bad} out of bounds")));
    }
    let mut indices: Vec<usize> = if boundary.len() <= cap {
        boundary.to_vec()
    } else {
        index::sample(rng, boundary.len(), cap).into_iter().map(|k| boundary[k]).collect()
    };
    indices.sort_unstable();
    indices.dedup();
    let labels = indices.iter().map(|&i| labels[i]).collect();
    Ok(BoundaryIndexSet { indices, labels })
}
