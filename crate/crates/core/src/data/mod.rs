//! Synthetic volumes, the SSV1 file format, splits and augmentation.

mod augment;
mod ssv;

pub use augment::{flip, random_crop, random_flip, random_rot90, rot90};
pub use ssv::{load_dataset, read_manifest, read_volume, save_dataset, write_manifest, write_volume, ManifestEntry};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One volume with an optional per-voxel binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// `[H, W, D]` intensities.
    pub volume: Tensor,
    pub label: Option<Vec<u8>>,
    pub is_labeled: bool,
    /// Blur σ used at generation time; not persisted.
    pub ambiguity: f64,
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, volume: Tensor, label: Option<Vec<u8>>, is_labeled: bool) -> Result<Self> {
        if volume.rank() != 3 {
            return Err(Error::shape("volume_sample", format!("expected [H, W, D], got {:?}", volume.shape())));
        }
        if !volume.is_finite() {
            return Err(Error::NonFinite("volume_sample"));
        }
        match &label {
            Some(l) if l.len() != volume.numel() => {
                return Err(Error::shape("volume_sample", "label length differs from volume"));
            }
            Some(l) if l.iter().any(|&c| c > 1) => {
                return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
            }
            None if is_labeled => return Err(Error::InvalidArgument("labeled sample without label".into())),
            _ => {}
        }
        Ok(VolumeSample { id: id.into(), volume, label, is_labeled, ambiguity: 0.0 })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.volume.shape();
        [s[0], s[1], s[2]]
    }

    pub fn foreground_fraction(&self) -> Option<f64> {
        let l = self.label.as_ref()?;
        Some(l.iter().filter(|&&c| c == 1).count() as f64 / l.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Labeled,
    Unlabeled,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Disjointness of the three id lists.
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<&String> = self.labeled.iter().chain(&self.unlabeled).chain(&self.test).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(Error::InvalidArgument("dataset split lists overlap".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        let has = |v: &[String]| v.iter().any(|x| x == id);
        if has(&self.labeled) {
            Some(Split::Labeled)
        } else if has(&self.unlabeled) {
            Some(Split::Unlabeled)
        } else if has(&self.test) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub shape: [usize; 3],
    /// Range of the per-sample Gaussian blur σ, in voxels.
    pub ambiguity: (f64, f64),
    pub noise_std: f64,
}

impl SynthSpec {
    pub fn new(shape: [usize; 3], ambiguity: (f64, f64)) -> Self {
        SynthSpec { shape, ambiguity, noise_std: 0.05 }
    }
}

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.40;

/// `count` volumes of 1–3 ellipsoids, blurred, noised and standardized.
///
/// Samples get ids `case000`, `case001`, ... and carry their crisp label.
pub fn generate_synthetic<R: Rng + ?Sized>(count: usize, spec: &SynthSpec, rng: &mut R) -> Result<Vec<VolumeSample>> {
    let [h, w, d] = spec.shape;
    if spec.shape.iter().any(|&s| s < 4 || s % 2 != 0) {
        return Err(Error::InvalidArgument(format!("synthetic shape {:?} must be even and ≥ 4", spec.shape)));
    }
    let (lo, hi) = spec.ambiguity;
    if !(0.0 <= lo && lo <= hi && hi.is_finite()) || spec.noise_std < 0.0 {
        return Err(Error::InvalidArgument(format!("ambiguity {:?}, noise {}", spec.ambiguity, spec.noise_std)));
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let label = loop {
            let mask = ellipsoids(spec.shape, rng);
            let frac = mask.iter().filter(|&&m| m == 1).count() as f64 / mask.len() as f64;
            if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
                break mask;
            }
        };
        let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut vol: Vec<f64> = label.iter().map(|&m| f64::from(m)).collect();
        gaussian_blur(&mut vol, spec.shape, sigma);
        if spec.noise_std > 0.0 {
            for v in &mut vol {
                *v += noise.sample(rng);
            }
        }
        standardize(&mut vol);
        let volume = Tensor::new(vec![h, w, d], vol)?;
        let mut s = VolumeSample::new(format!("case{n:03}"), volume, Some(label), true)?;
        s.ambiguity = sigma;
        out.push(s);
    }
    Ok(out)
}

fn ellipsoids<R: Rng + ?Sized>(shape: [usize; 3], rng: &mut R) -> Vec<u8> {
    let [h, w, d] = shape;
    let blobs = rng.random_range(1..=3);
    let mut mask = vec![0u8; h * w * d];
    for _ in 0..blobs {
        let mut center = [0.0; 3];
        let mut axes = [0.0; 3];
        for k in 0..3 {
            let len = shape[k] as f64;
            center[k] = rng.random_range(0.25..0.75) * len;
            axes[k] = rng.random_range(0.12..0.28) * len;
        }
        for x in 0..h {
            for y in 0..w {
                for z in 0..d {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let r: f64 = (0..3).map(|k| ((p[k] - center[k]) / axes[k]).powi(2)).sum();
                    if r <= 1.0 {
                        mask[(x * w + y) * d + z] = 1;
                    }
                }
            }
        }
    }
    mask
}

/// Separable Gaussian blur with replicated borders; σ = 0 is the identity.
pub fn gaussian_blur(vol: &mut [f64], shape: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let [h, w, d] = shape;
    let strides = [w * d, d, 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        for start in 0..h * w * d {
            if (start / stride) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|k| vol[start + k * stride]));
            for q in 0..len {
                let mut acc = 0.0;
                for (t, kv) in (-radius..=radius).zip(&kernel) {
                    let src = (q as isize + t).clamp(0, len as isize - 1) as usize;
                    acc += kv * line[src];
                }
                vol[start + q * stride] = acc;
            }
        }
    }
}

/// Shift to zero mean and scale to unit (population) variance.
pub fn standardize(vol: &mut [f64]) {
    let n = vol.len() as f64;
    let mean = vol.iter().sum::<f64>() / n;
    let var = vol.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    vol.iter_mut().for_each(|v| *v = (*v - mean) * inv);
}

/// Assign the first `labeled` samples to the labeled split, the next
/// `unlabeled` to the unlabeled split and the rest to test. Unlabeled samples
/// keep their hidden ground truth only in memory.
pub fn assign_split(samples: &mut [VolumeSample], labeled: usize, unlabeled: usize) -> Result<DatasetSplit> {
    if labeled + unlabeled > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "{labeled} labeled + {unlabeled} unlabeled exceeds {} samples",
            samples.len()
        )));
    }
    let mut split = DatasetSplit::default();
    for (i, s) in samples.iter_mut().enumerate() {
        if i < labeled {
            s.is_labeled = true;
            split.labeled.push(s.id.clone());
        } else if i < labeled + unlabeled {
            s.is_labeled = false;
            split.unlabeled.push(s.id.clone());
        } else {
            s.is_labeled = false;
            split.test.push(s.id.clone());
        }
    }
    Ok(split)
}
