use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};

/// Feature dimension of the projection head.
pub const FEATURE_DIM: usize = 16;

const MAGIC: [u8; 4] = *b"AUAC";

/// Streaming Gaussian statistics of one class in projection space.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototype {
    pub class_id: u32,
    pub count: u64,
    pub mean: [f64; FEATURE_DIM],
    /// Row-major population covariance.
    pub cov: [f64; FEATURE_DIM * FEATURE_DIM],
}

impl ClassPrototype {
    pub fn empty(class_id: u32) -> Self {
        ClassPrototype { class_id, count: 0, mean: [0.0; FEATURE_DIM], cov: [0.0; FEATURE_DIM * FEATURE_DIM] }
    }

    /// Merge a batch with mean `bm`, population covariance `bc` and `n` members.
    pub fn merge(&mut self, n: u64, bm: &[f64; FEATURE_DIM], bc: &[f64; FEATURE_DIM * FEATURE_DIM]) {
        if n == 0 {
            return;
        }
        let big_n = self.count as f64;
        let small_n = n as f64;
        let total = big_n + small_n;
        let mut delta = [0.0; FEATURE_DIM];
        for k in 0..FEATURE_DIM {
            delta[k] = self.mean[k] - bm[k];
        }
        let cross = big_n * small_n / (total * total);
        for a in 0..FEATURE_DIM {
            for b in 0..FEATURE_DIM {
                let i = a * FEATURE_DIM + b;
                self.cov[i] = (big_n * self.cov[i] + small_n * bc[i]) / total + cross * delta[a] * delta[b];
            }
        }
        for k in 0..FEATURE_DIM {
            self.mean[k] = (big_n * self.mean[k] + small_n * bm[k]) / total;
        }
        self.count += n;
    }

    /// `fᵀ σ f`.
    pub fn quad(&self, f: &[f64]) -> f64 {
        let mut q = 0.0;
        for a in 0..FEATURE_DIM {
            let row = &self.cov[a * FEATURE_DIM..(a + 1) * FEATURE_DIM];
            q += f[a] * row.iter().zip(f).map(|(s, x)| s * x).sum::<f64>();
        }
        q
    }
}

/// One prototype per class, plus the freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    classes: Vec<ClassPrototype>,
    frozen: bool,
}

impl Prototypes {
    pub fn new(num_classes: usize) -> Self {
        Prototypes { classes: (0..num_classes as u32).map(ClassPrototype::empty).collect(), frozen: false }
    }

    pub fn classes(&self) -> &[ClassPrototype] {
        &self.classes
    }

    pub fn get(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(class)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Fold one batch of features into the running statistics.
    ///
    /// `feats` is channel-major (`feats[k * V + v]`), `labels` has one class per voxel.
    pub fn update(&mut self, feats: &[f64], labels: &[u8]) -> Result<()> {
        if self.frozen {
            return Err(Error::Prototype("update on frozen prototypes".into()));
        }
        let v = labels.len();
        if v == 0 || feats.len() != FEATURE_DIM * v {
            return Err(Error::shape("update_prototypes", format!("{} features for {v} labels", feats.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.classes.len()) {
            return Err(Error::Prototype(format!("label {bad} with {} classes", self.classes.len())));
        }
        for (c, proto) in self.classes.iter_mut().enumerate() {
            let members: Vec<usize> = (0..v).filter(|&i| labels[i] as usize == c).collect();
            if members.is_empty() {
                continue;
            }
            let n = members.len() as f64;
            let mut mean = [0.0; FEATURE_DIM];
            for (k, m) in mean.iter_mut().enumerate() {
                *m = members.iter().map(|&i| feats[k * v + i]).sum::<f64>() / n;
            }
            let mut cov = [0.0; FEATURE_DIM * FEATURE_DIM];
            let mut centered = [0.0; FEATURE_DIM];
            for &i in &members {
                for k in 0..FEATURE_DIM {
                    centered[k] = feats[k * v + i] - mean[k];
                }
                for a in 0..FEATURE_DIM {
                    for b in a..FEATURE_DIM {
                        cov[a * FEATURE_DIM + b] += centered[a] * centered[b];
                    }
                }
            }
            for a in 0..FEATURE_DIM {
                for b in a..FEATURE_DIM {
                    let s = cov[a * FEATURE_DIM + b] / n;
                    cov[a * FEATURE_DIM + b] = s;
                    cov[b * FEATURE_DIM + a] = s;
                }
            }
            proto.merge(members.len() as u64, &mean, &cov);
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MAGIC)?;
        for p in &self.classes {
            w.write_all(&p.class_id.to_le_bytes())?;
            w.write_all(&p.count.to_le_bytes())?;
            binio::write_f64s(w, &p.mean)?;
            binio::write_f64s(w, &p.cov)?;
        }
        Ok(())
    }

    /// Read an AUAC stream. Prototypes read from disk are frozen.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut r = BufReader::new(r);
        binio::read_magic(&mut r, MAGIC)?;
        let mut classes = Vec::new();
        while !binio::at_eof(&mut r)? {
            let class_id = binio::read_u32(&mut r)?;
            let count = binio::read_u64(&mut r)?;
            let mut p = ClassPrototype::empty(class_id);
            p.count = count;
            p.mean.copy_from_slice(&binio::read_f64s(&mut r, FEATURE_DIM)?);
            p.cov.copy_from_slice(&binio::read_f64s(&mut r, FEATURE_DIM * FEATURE_DIM)?);
            if class_id as usize != classes.len() {
                return Err(Error::Prototype(format!("class id {class_id} out of order")));
            }
            classes.push(p);
        }
        Ok(Prototypes { classes, frozen: true })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut File::open(path)?)
    }
}
