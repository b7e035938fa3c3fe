//! Two-stage training, pseudo-labeling, evaluation and run orchestration.

mod config;
mod evaluate;
mod log;
mod optim;
mod run;
mod stage1;
mod stage2;
mod window;

pub use config::TrainConfig;
pub use evaluate::{evaluate, evaluate_predictions, MetricsSummary, MetricsTable};
pub use log::{read_jsonl, write_jsonl, RunLogRecord};
pub use optim::{sgd_step, SgdState};
pub use run::{ablation, dataset_from_config, partition, split_samples, AblationResult, RunDirs};
pub use stage1::{train_stage1, Stage1Result};
pub use stage2::{cross_entropy_loss, estimate_prototypes, soft_dice_loss, supervised_ced_loss, train_stage2};
pub use window::{argmax_classes, fuse_windows, generate_pseudo_labels, predict, sliding_window_logits, window_starts};

use rand::Rng;

use crate::data::{random_crop, random_flip, random_rot90, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A random (optionally augmented) training crop.
fn draw_crop<R: Rng + ?Sized>(s: &VolumeSample, cfg: &TrainConfig, rng: &mut R) -> Result<VolumeSample> {
    let c = random_crop(s, cfg.crop, rng)?;
    if !cfg.augment {
        return Ok(c);
    }
    let f = random_flip(&c, rng)?;
    random_rot90(&f, rng)
}

/// `[1, 1, H, W, D]` network input.
fn as_input(s: &VolumeSample) -> Result<Tensor> {
    let mut shape = vec![1, 1];
    shape.extend_from_slice(s.volume.shape());
    s.volume.clone().reshape(&shape)
}

fn require_labels<'a>(s: &'a VolumeSample, what: &str) -> Result<&'a [u8]> {
    s.label.as_deref().ok_or_else(|| Error::InvalidArgument(format!("{what} sample {} has no label", s.id)))
}

/// Map a non-finite failure at iteration `t` to a divergence error.
fn diverged<T>(r: Result<T>, t: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::Diverged { iteration: t, detail: format!("non-finite value in {op}") },
        other => other,
    })
}
