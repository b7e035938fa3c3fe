use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{estimate_prototypes, evaluate, generate_pseudo_labels, train_stage1, train_stage2, TrainConfig};
use crate::data::{assign_split, generate_synthetic, DatasetSplit, SynthSpec, VolumeSample};
use crate::error::Result;
use crate::rng::{self, Stream};
use crate::segnet::NetworkParams;

/// Fixed layout of a run directory shared by the CLI verbs.
#[derive(Clone, Debug)]
pub struct RunDirs {
    pub root: PathBuf,
}

impl RunDirs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDirs { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn student(&self) -> PathBuf {
        self.stage1().join("student.auap")
    }

    pub fn teacher(&self) -> PathBuf {
        self.stage1().join("teacher.auap")
    }

    pub fn pseudo(&self) -> PathBuf {
        self.root.join("pseudo")
    }

    pub fn prototypes(&self) -> PathBuf {
        self.root.join("prototypes.auac")
    }

    pub fn stage2(&self) -> PathBuf {
        self.root.join("stage2")
    }

    pub fn stage2_params(&self) -> PathBuf {
        self.stage2().join("params.auap")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn ensure(path: &Path) -> Result<()> {
        std::fs::create_dir_all(path)?;
        Ok(())
    }
}

/// The synthetic dataset described by `cfg`, split labeled / unlabeled / test.
pub fn dataset_from_config(cfg: &TrainConfig) -> Result<(Vec<VolumeSample>, DatasetSplit)> {
    let spec = SynthSpec::new(cfg.volume_shape, (cfg.ambiguity_min, cfg.ambiguity_max));
    let count = cfg.num_labeled + cfg.num_unlabeled + cfg.num_test;
    let mut samples = generate_synthetic(count, &spec, &mut rng::derive(cfg.seed, Stream::Data, 0))?;
    let split = assign_split(&mut samples, cfg.num_labeled, cfg.num_unlabeled)?;
    Ok((samples, split))
}

/// Labeled, unlabeled and test samples, in split order, as stored.
pub fn split_samples(samples: &[VolumeSample], split: &DatasetSplit) -> (Vec<VolumeSample>, Vec<VolumeSample>, Vec<VolumeSample>) {
    let select = |ids: &[String]| -> Vec<VolumeSample> {
        ids.iter().filter_map(|id| samples.iter().find(|s| &s.id == id).cloned()).collect()
    };
    (select(&split.labeled), select(&split.unlabeled), select(&split.test))
}

/// As [`split_samples`], with the labels of unlabeled samples removed.
pub fn partition(samples: &[VolumeSample], split: &DatasetSplit) -> (Vec<VolumeSample>, Vec<VolumeSample>, Vec<VolumeSample>) {
    let (labeled, mut unlabeled, test) = split_samples(samples, split);
    for s in &mut unlabeled {
        s.label = None;
        s.is_labeled = false;
    }
    (labeled, unlabeled, test)
}

/// Mean test Dice of each cumulative ablation step for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seed: u64,
    pub baseline: f64,
    pub aua: f64,
    pub aua_bcl: f64,
    pub pseudo: f64,
    pub full: f64,
}

impl AblationResult {
    pub fn steps(&self) -> [(&'static str, f64); 5] {
        [
            ("supervised baseline", self.baseline),
            ("AUA", self.aua),
            ("AUA + BCL", self.aua_bcl),
            ("AUA + BCL + pseudo labels", self.pseudo),
            ("AUA + BCL + pseudo labels + PCL", self.full),
        ]
    }
}

/// Supervised baseline, AUA, AUA + BCL, then stage two without and with PCL,
/// all on the dataset and seed of `cfg`.
pub fn ablation(cfg: &TrainConfig) -> Result<AblationResult> {
    let (samples, split) = dataset_from_config(cfg)?;
    let (labeled, unlabeled, test) = partition(&samples, &split);
    let score = |p: &NetworkParams| -> Result<f64> { Ok(evaluate(p, &test, cfg.crop, cfg.stride)?.mean.dice) };

    let base_cfg = TrainConfig { lambda_g: 0.0, lambda_c: 0.0, ..cfg.clone() };
    let baseline = score(&train_stage1(&base_cfg, &labeled, &unlabeled)?.student)?;
    let aua_cfg = TrainConfig { lambda_c: 0.0, ..cfg.clone() };
    let aua = score(&train_stage1(&aua_cfg, &labeled, &unlabeled)?.student)?;
    let stage1 = train_stage1(cfg, &labeled, &unlabeled)?;
    let aua_bcl = score(&stage1.student)?;

    let pseudo_set = generate_pseudo_labels(&stage1.student, &unlabeled, cfg.crop, cfg.stride)?;
    let plain_cfg = TrainConfig { lambda_r: 0.0, ..cfg.clone() };
    let pseudo = score(&train_stage2(&plain_cfg, &labeled, &pseudo_set, None)?.0)?;
    let protos = estimate_prototypes(cfg, &stage1.student, &labeled, &pseudo_set)?;
    let full = score(&train_stage2(cfg, &labeled, &pseudo_set, Some(&protos))?.0)?;
    Ok(AblationResult { seed: cfg.seed, baseline, aua, aua_bcl, pseudo, full })
}
