//! Overlap and surface-distance metrics on binary 3D masks.

use crate::error::{Error, Result};

/// A predicted and a reference mask over the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    pred: Vec<u8>,
    truth: Vec<u8>,
    shape: [usize; 3],
    spacing: [f64; 3],
}

impl SegmentationResult {
    pub fn new(pred: Vec<u8>, truth: Vec<u8>, shape: [usize; 3]) -> Result<Self> {
        Self::with_spacing(pred, truth, shape, [1.0; 3])
    }

    pub fn with_spacing(pred: Vec<u8>, truth: Vec<u8>, shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if pred.len() != n || truth.len() != n {
            return Err(Error::shape(
                "segmentation_result",
                format!("{} / {} voxels for shape {shape:?}", pred.len(), truth.len()),
            ));
        }
        if pred.iter().chain(&truth).any(|&v| v > 1) {
            return Err(Error::InvalidArgument("masks must be binary".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("spacing {spacing:?}")));
        }
        Ok(SegmentationResult { pred, truth, shape, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    fn counts(&self) -> (usize, usize, usize) {
        let inter = self.pred.iter().zip(&self.truth).filter(|(&p, &t)| p == 1 && t == 1).count();
        let p = self.pred.iter().filter(|&&v| v == 1).count();
        let t = self.truth.iter().filter(|&&v| v == 1).count();
        (inter, p, t)
    }
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice(r: &SegmentationResult) -> f64 {
    let (i, p, t) = r.counts();
    if p + t == 0 {
        return 1.0;
    }
    2.0 * i as f64 / (p + t) as f64
}

/// `|P∩G| / |P∪G|`; 1 when both masks are empty.
pub fn jaccard(r: &SegmentationResult) -> f64 {
    let (i, p, t) = r.counts();
    let union = p + t - i;
    if union == 0 {
        return 1.0;
    }
    i as f64 / union as f64
}

/// Mask voxels with a face neighbor outside the mask; the grid border counts as outside.
pub fn surface_voxels(mask: &[u8], shape: [usize; 3]) -> Vec<usize> {
    let [h, w, d] = shape;
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let i = (x * w + y) * d + z;
                if mask[i] == 0 {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == h || y + 1 == w || z + 1 == d;
                if edge
                    || mask[i - w * d] == 0
                    || mask[i + w * d] == 0
                    || mask[i - d] == 0
                    || mask[i + d] == 0
                    || mask[i - 1] == 0
                    || mask[i + 1] == 0
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Average surface distance and 95th-percentile Hausdorff distance.
///
/// Both directions are pooled into one set of distances; the percentile is the
/// nearest-rank `ceil(0.95 n)`-th order statistic.
pub fn surface_distances(r: &SegmentationResult) -> Result<(f64, f64)> {
    let sp = surface_voxels(&r.pred, r.shape);
    let st = surface_voxels(&r.truth, r.shape);
    if sp.is_empty() || st.is_empty() {
        return Err(Error::UndefinedSurface("empty mask"));
    }
    let to_truth = squared_edt(&st, r.shape, r.spacing);
    let to_pred = squared_edt(&sp, r.shape, r.spacing);
    let mut pooled: Vec<f64> = sp.iter().map(|&i| to_truth[i].sqrt()).chain(st.iter().map(|&i| to_pred[i].sqrt())).collect();
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok((asd, nearest_rank(&mut pooled, 0.95)))
}

pub(crate) fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Squared Euclidean distance from every voxel to the nearest seed voxel.
fn squared_edt(seeds: &[usize], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = shape;
    let mut f = vec![f64::INFINITY; h * w * d];
    for &s in seeds {
        f[s] = 0.0;
    }
    let strides = [w * d, d, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        for start in 0..h * w * d {
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|k| f[start + k * stride]));
            out.resize(len, 0.0);
            transform_1d(&line, spacing[axis], &mut out);
            for k in 0..len {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

/// Lower envelope of parabolas `(s·(q − p))² + g(p)`.
fn transform_1d(g: &[f64], s: f64, out: &mut [f64]) {
    let n = g.len();
    let sites: Vec<usize> = (0..n).filter(|&p| g[p].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let pos = |p: usize| s * p as f64;
    let cross = |p: usize, q: usize| ((g[q] + pos(q) * pos(q)) - (g[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        loop {
            match v.last() {
                Some(&p) if cross(p, q) <= *z.last().unwrap() => {
                    v.pop();
                    z.pop();
                }
                _ => break,
            }
        }
        z.push(match v.last() {
            Some(&p) => cross(p, q),
            None => f64::NEG_INFINITY,
        });
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let x = pos(q);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let dx = x - pos(v[k]);
        *o = dx * dx + g[v[k]];
    }
}

/// Dice, Jaccard, ASD and 95HD for one case; surface metrics are `None` when undefined.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

impl CaseMetrics {
    pub fn compute(id: &str, r: &SegmentationResult) -> Self {
        let surf = surface_distances(r).ok();
        CaseMetrics {
            id: id.to_string(),
            dice: dice(r),
            jaccard: jaccard(r),
            asd: surf.map(|s| s.0),
            hd95: surf.map(|s| s.1),
        }
    }
}
