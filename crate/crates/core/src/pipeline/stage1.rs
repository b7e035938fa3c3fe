use std::time::Instant;

use rand::Rng;

use super::{as_input, diverged, draw_crop, require_labels, RunLogRecord, SgdState, TrainConfig};
use crate::consistency::{ged_consistency, RampSchedule};
use crate::contrastive::{bcl_loss, sample_boundary_pixels, two_sided_boundary};
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::segnet::{self, NetworkParams};
use crate::stochastic::{build_distribution, one_hot, sample_logits, supervised_loss_au};
use crate::teacher::{perturb_input, TeacherState};
use crate::tensor::{Tape, Tensor, Var};

pub struct Stage1Result {
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    pub log: Vec<RunLogRecord>,
}

fn pick<'a, R: Rng + ?Sized>(set: &'a [VolumeSample], rng: &mut R) -> &'a VolumeSample {
    &set[rng.random_range(0..set.len())]
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = tape.stack(terms)?;
    Ok(Some(tape.mean(s)?))
}

/// Softmax maps `[V, C]` of each logit sample.
fn soft_maps(tape: &mut Tape, samples: &[Var], voxels: usize, classes: usize) -> Result<Vec<Var>> {
    samples
        .iter()
        .map(|&g| {
            let m = tape.reshape(g, &[voxels, classes])?;
            tape.softmax(m)
        })
        .collect()
}

/// Teacher soft maps for a noise-perturbed copy of `input`, as plain values.
fn teacher_maps(teacher: &NetworkParams, input: &Tensor, cfg: &TrainConfig, t: usize, k: usize) -> Result<Vec<Tensor>> {
    let idx = (t * cfg.unlabeled_batch + k) as u64;
    let noisy = perturb_input(input, cfg.noise_std, cfg.noise_clip, &mut rng::derive(cfg.seed, Stream::TeacherNoise, idx))?;
    let (mut tape, out) = segnet::infer(teacher, &noisy)?;
    let dist = build_distribution(&mut tape, &out)?;
    let mut r = rng::derive(cfg.seed, Stream::TeacherSampling, idx);
    let g = sample_logits(&mut tape, &dist, cfg.samples, &mut r)?;
    let maps = soft_maps(&mut tape, &g, dist.voxels, dist.classes)?;
    Ok(maps.iter().map(|&m| tape.value(m).clone()).collect())
}

/// Stage one: `L_sup_au + λ_g(t)·L_con + λ_c·L_BCL` with a mean teacher.
///
/// The supervised term is divided by the crop's voxel count and the boundary
/// term by the number of sampled boundary voxels; both are then averaged over
/// the labeled crops. The consistency branch is skipped entirely when
/// `lambda_g` is zero, the boundary branch when `lambda_c` is zero.
pub fn train_stage1(cfg: &TrainConfig, labeled: &[VolumeSample], unlabeled: &[VolumeSample]) -> Result<Stage1Result> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs labeled samples".into()));
    }
    for s in labeled {
        require_labels(s, "labeled")?;
    }
    let use_con = cfg.lambda_g > 0.0 && cfg.unlabeled_batch > 0;
    if use_con && unlabeled.is_empty() {
        return Err(Error::InvalidArgument("consistency needs unlabeled samples".into()));
    }
    let classes = 2;
    let mut student = NetworkParams::init_with_gain(classes, cfg.rank, cfg.init_gain, &mut rng::derive(cfg.seed, Stream::Init, 0))?;
    let mut teacher = TeacherState::new(student.clone(), cfg.ema_decay)?;
    let sched = RampSchedule { max_weight: cfg.lambda_g, t_max: cfg.t_max };
    let mut sgd = SgdState::new();
    let mut log = Vec::with_capacity(cfg.t_max);
    let start = Instant::now();

    for t in 0..cfg.t_max {
        let lambda_g = sched.weight(t)?;
        let lr = cfg.lr_at(t);
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape, true);

        let mut batch = rng::derive(cfg.seed, Stream::Batch, t as u64);
        let mut sampling = rng::derive(cfg.seed, Stream::Sampling, t as u64);
        let mut boundary = rng::derive(cfg.seed, Stream::Boundary, t as u64);
        let mut sup_terms = Vec::new();
        let mut bcl_terms = Vec::new();
        for _ in 0..cfg.labeled_batch {
            let crop = draw_crop(pick(labeled, &mut batch), cfg, &mut batch)?;
            let labels = require_labels(&crop, "labeled")?;
            let x = tape.constant(as_input(&crop)?);
            let out = diverged(segnet::forward(&mut tape, &bound, x), t)?;
            let dist = build_distribution(&mut tape, &out)?;
            let y = one_hot(labels, classes)?;
            let sup = diverged(supervised_loss_au(&mut tape, &dist, &y, cfg.samples, &mut sampling), t)?;
            sup_terms.push(tape.scale(sup, 1.0 / dist.voxels as f64)?);
            if cfg.lambda_c > 0.0 {
                let shell = two_sided_boundary(labels, crop.shape())?;
                if shell.len() >= 2 {
                    let nb = sample_boundary_pixels(&shell, labels, cfg.nb_cap, &mut boundary)?;
                    let b = diverged(bcl_loss(&mut tape, out.proj, &nb, cfg.tau1), t)?;
                    bcl_terms.push(tape.scale(b, 1.0 / nb.len() as f64)?);
                }
            }
        }

        let mut con_terms = Vec::new();
        if use_con {
            let mut ubatch = rng::derive(cfg.seed, Stream::UnlabeledBatch, t as u64);
            let mut usampling = rng::derive(cfg.seed, Stream::UnlabeledSampling, t as u64);
            for k in 0..cfg.unlabeled_batch {
                let crop = draw_crop(pick(unlabeled, &mut ubatch), cfg, &mut ubatch)?;
                let input = as_input(&crop)?;
                let target = diverged(teacher_maps(&teacher.params, &input, cfg, t, k), t)?;
                let x = tape.constant(input);
                let out = diverged(segnet::forward(&mut tape, &bound, x), t)?;
                let dist = build_distribution(&mut tape, &out)?;
                let g = sample_logits(&mut tape, &dist, cfg.samples, &mut usampling)?;
                let maps = diverged(soft_maps(&mut tape, &g, dist.voxels, dist.classes), t)?;
                con_terms.push(diverged(ged_consistency(&mut tape, &maps, &target), t)?);
            }
        }

        let sup = mean_of(&mut tape, &sup_terms)?.expect("labeled batch is non-empty");
        let mut total = sup;
        let con = mean_of(&mut tape, &con_terms)?;
        if let Some(c) = con {
            let w = tape.scale(c, lambda_g)?;
            total = tape.add(total, w)?;
        }
        let bcl = mean_of(&mut tape, &bcl_terms)?;
        if let Some(b) = bcl {
            let w = tape.scale(b, cfg.lambda_c)?;
            total = tape.add(total, w)?;
        }
        diverged(tape.backward(total), t)?;
        let grads = bound.grads(&tape);
        diverged(super::sgd_step(&mut student, &grads, &mut sgd, lr, cfg.momentum, cfg.weight_decay), t)?;
        teacher.ema_update(&student)?;

        let value = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
        log.push(RunLogRecord {
            iteration: t,
            stage: 1,
            sup_au: value(Some(sup)),
            con: value(con),
            bcl: value(bcl),
            sup_ced: None,
            pcl: None,
            total: tape.value(total).data()[0],
            lambda_g,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Stage1Result { student, teacher: teacher.params, log })
}
