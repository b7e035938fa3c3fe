use std::time::Instant;

use rand::Rng;

use super::{as_input, diverged, draw_crop, require_labels, RunLogRecord, SgdState, TrainConfig};
use crate::contrastive::{pcl_loss, Prototypes};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::segnet::{self, NetworkParams, PROJ_DIM};
use crate::stochastic::one_hot;
use crate::tensor::{Tape, Tensor, Var};

/// `[1, C, H, W, D]` head to `[V, C]`.
fn voxel_major(tape: &mut Tape, head: Var) -> Result<Var> {
    let shape = tape.value(head).shape().to_vec();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::shape("voxel_major", format!("expected [1, C, H, W, D], got {shape:?}")));
    }
    let v = shape[2] * shape[3] * shape[4];
    let flat = tape.reshape(head, &[shape[1], v])?;
    tape.transpose(flat)
}

/// Mean over voxels of `−log softmax(logits)_y`, logits `[V, C]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    let [v, c] = shape[..] else {
        return Err(Error::shape("cross_entropy", format!("expected [V, C], got {shape:?}")));
    };
    if labels.len() != v {
        return Err(Error::shape("cross_entropy", format!("{} labels for {v} voxels", labels.len())));
    }
    let y = tape.constant(one_hot(labels, c)?);
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(logp, y)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / v as f64)
}

/// `1 − 2 Σ p g / (Σ p + Σ g)` on the `class` column of probabilities `[V, C]`.
pub fn soft_dice_loss(tape: &mut Tape, probs: Var, labels: &[u8], class: usize) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    let [v, c] = shape[..] else {
        return Err(Error::shape("soft_dice", format!("expected [V, C], got {shape:?}")));
    };
    if labels.len() != v || class >= c {
        return Err(Error::shape("soft_dice", format!("{} labels, class {class}, probs {shape:?}", labels.len())));
    }
    let mut select = vec![0.0; v * c];
    let mut target = vec![0.0; v * c];
    for (i, &l) in labels.iter().enumerate() {
        select[i * c + class] = 1.0;
        if l as usize == class {
            target[i * c + class] = 1.0;
        }
    }
    let g_sum = target.iter().sum::<f64>();
    let select = tape.constant(Tensor::new(vec![v, c], select)?);
    let target = tape.constant(Tensor::new(vec![v, c], target)?);
    let pg = tape.mul(probs, target)?;
    let inter = tape.sum(pg)?;
    let p = tape.mul(probs, select)?;
    let p_sum = tape.sum(p)?;
    let denom = tape.add_scalar(p_sum, g_sum)?;
    let ratio = tape.div(inter, denom)?;
    let scaled = tape.scale(ratio, -2.0)?;
    tape.add_scalar(scaled, 1.0)
}

/// Average of cross-entropy and foreground soft Dice on a `[1, C, ...]` logit head.
pub fn supervised_ced_loss(tape: &mut Tape, mean_head: Var, labels: &[u8]) -> Result<Var> {
    let logits = voxel_major(tape, mean_head)?;
    let ce = cross_entropy_loss(tape, logits, labels)?;
    let probs = tape.softmax(logits)?;
    let dice = soft_dice_loss(tape, probs, labels, 1)?;
    let both = tape.add(ce, dice)?;
    tape.scale(both, 0.5)
}

fn pick<'a, R: Rng + ?Sized>(set: &'a [VolumeSample], rng: &mut R) -> &'a VolumeSample {
    &set[rng.random_range(0..set.len())]
}

/// Accumulate class statistics of the projection features of `params` over
/// `proto_iters` batches of labeled and pseudo-labeled crops, then freeze.
pub fn estimate_prototypes(
    cfg: &TrainConfig,
    params: &NetworkParams,
    labeled: &[VolumeSample],
    pseudo: &[VolumeSample],
) -> Result<Prototypes> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(Error::InvalidArgument("no samples for prototype estimation".into()));
    }
    let mut protos = Prototypes::new(params.classes());
    for it in 0..cfg.proto_iters {
        let mut r = rng::derive(cfg.seed, Stream::Prototypes, it as u64);
        let mut crops = Vec::new();
        for (set, n) in [(labeled, cfg.labeled_batch), (pseudo, cfg.unlabeled_batch)] {
            if set.is_empty() {
                continue;
            }
            for _ in 0..n {
                crops.push(draw_crop(pick(set, &mut r), cfg, &mut r)?);
            }
        }
        for crop in &crops {
            let labels = require_labels(crop, "prototype")?;
            let (tape, out) = segnet::infer(params, &as_input(crop)?)?;
            protos.update(tape.value(out.proj).data(), labels)?;
        }
    }
    protos.freeze();
    Ok(protos)
}

/// Stage two: fresh network trained on labeled and pseudo-labeled crops with
/// `L_sup_ced + λ_r·L_PCL`, averaged over the crops of each batch.
pub fn train_stage2(
    cfg: &TrainConfig,
    labeled: &[VolumeSample],
    pseudo: &[VolumeSample],
    protos: Option<&Prototypes>,
) -> Result<(NetworkParams, Vec<RunLogRecord>)> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("stage 2 needs labeled samples".into()));
    }
    for s in labeled {
        require_labels(s, "labeled")?;
    }
    for s in pseudo {
        require_labels(s, "pseudo-labeled")?;
    }
    let protos = if cfg.lambda_r > 0.0 {
        let p = protos.ok_or_else(|| Error::Prototype("lambda_r > 0 needs prototypes".into()))?;
        if !p.is_frozen() {
            return Err(Error::Prototype("prototypes must be frozen before stage 2".into()));
        }
        Some(p)
    } else {
        None
    };
    let classes = 2;
    let mut params =
        NetworkParams::init_with_gain(classes, cfg.rank, cfg.init_gain, &mut rng::derive(cfg.seed, Stream::Stage2Init, 0))?;
    let mut sgd = SgdState::new();
    let mut log = Vec::with_capacity(cfg.t_max);
    let start = Instant::now();

    for t in 0..cfg.t_max {
        let lr = cfg.lr_at(t);
        let mut r = rng::derive(cfg.seed, Stream::Stage2Batch, t as u64);
        let mut crops = Vec::new();
        for _ in 0..cfg.labeled_batch {
            crops.push(draw_crop(pick(labeled, &mut r), cfg, &mut r)?);
        }
        if !pseudo.is_empty() {
            for _ in 0..cfg.unlabeled_batch {
                crops.push(draw_crop(pick(pseudo, &mut r), cfg, &mut r)?);
            }
        }

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let mut ced_terms = Vec::new();
        let mut pcl_terms = Vec::new();
        for crop in &crops {
            let labels = require_labels(crop, "training")?;
            let x = tape.constant(as_input(crop)?);
            let out = diverged(segnet::forward(&mut tape, &bound, x), t)?;
            ced_terms.push(diverged(supervised_ced_loss(&mut tape, out.mean, labels), t)?);
            if let Some(p) = protos {
                debug_assert_eq!(tape.value(out.proj).shape()[1], PROJ_DIM);
                pcl_terms.push(diverged(pcl_loss(&mut tape, out.proj, labels, p, cfg.tau2), t)?);
            }
        }
        let stacked = tape.stack(&ced_terms)?;
        let ced = tape.mean(stacked)?;
        let mut total = ced;
        let pcl = if pcl_terms.is_empty() {
            None
        } else {
            let s = tape.stack(&pcl_terms)?;
            let m = tape.mean(s)?;
            let w = tape.scale(m, cfg.lambda_r)?;
            total = tape.add(total, w)?;
            Some(m)
        };
        diverged(tape.backward(total), t)?;
        let grads = bound.grads(&tape);
        diverged(super::sgd_step(&mut params, &grads, &mut sgd, lr, cfg.momentum, cfg.weight_decay), t)?;

        log.push(RunLogRecord {
            iteration: t,
            stage: 2,
            sup_au: None,
            con: None,
            bcl: None,
            sup_ced: Some(tape.value(ced).data()[0]),
            pcl: pcl.map(|p| tape.value(p).data()[0]),
            total: tape.value(total).data()[0],
            lambda_g: 0.0,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_dice_two_voxel_oracle() {
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.9, 0.1]).unwrap());
        let l = soft_dice_loss(&mut tape, probs, &[1, 0], 1).unwrap();
        let want = 1.0 - 2.0 * 0.7 / (0.7 + 0.1 + 1.0);
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_drives_loss_to_zero() {
        let labels = [0u8, 1, 1, 0, 1, 0, 0, 0];
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2).flat_map(|c| labels.iter().map(move |&l| if l as usize == c { 40.0 } else { -40.0 })).collect();
        let head = tape.leaf(Tensor::new(vec![1, 2, 2, 2, 2], data).unwrap());
        let l = supervised_ced_loss(&mut tape, head, &labels).unwrap();
        assert!(tape.value(l).item().unwrap() < 1e-15);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[5, 2]));
        let l = cross_entropy_loss(&mut tape, logits, &[0, 1, 1, 0, 1]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
