//! Generalized-energy-distance consistency between student and teacher
//! sample sets, with the generalized Dice distance as the sample metric.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `d(a, b) = 1 - Σ a·b / (Σ a² + Σ b²)` on the tape.
///
/// This is the distance as used by the consistency loss, so `d(y, y) = 0.5`.
pub fn gdice_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "gdice_distance",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    let ab = tape.mul(a, b)?;
    let num = tape.sum(ab)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let sa = tape.sum(aa)?;
    let sb = tape.sum(bb)?;
    let den = tape.add(sa, sb)?;
    let ratio = tape.div(num, den)?;
    let neg = tape.neg(ratio)?;
    tape.add_scalar(neg, 1.0)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Pairwise {
    sq_s: Vec<f64>,
    sq_t: Vec<f64>,
    /// student·student, row-major `S x S`
    ss: Vec<f64>,
    /// student·teacher
    st: Vec<f64>,
    tt: Vec<f64>,
}

fn pairwise(student: &[&[f64]], teacher: &[&[f64]]) -> Pairwise {
    let s = student.len();
    let gram = |x: &[&[f64]], y: &[&[f64]]| {
        let mut g = Vec::with_capacity(s * s);
        for a in x {
            for b in y {
                g.push(dot(a, b));
            }
        }
        g
    };
    Pairwise {
        sq_s: student.iter().map(|a| dot(a, a)).collect(),
        sq_t: teacher.iter().map(|a| dot(a, a)).collect(),
        ss: gram(student, student),
        st: gram(student, teacher),
        tt: gram(teacher, teacher),
    }
}

fn ged_from_pairs(p: &Pairwise) -> f64 {
    let s = p.sq_s.len();
    let mut cross = 0.0;
    let mut within_s = 0.0;
    let mut within_t = 0.0;
    for i in 0..s {
        for j in 0..s {
            cross += 1.0 - p.st[i * s + j] / (p.sq_s[i] + p.sq_t[j]);
            within_s += 1.0 - p.ss[i * s + j] / (p.sq_s[i] + p.sq_s[j]);
            within_t += 1.0 - p.tt[i * s + j] / (p.sq_t[i] + p.sq_t[j]);
        }
    }
    2.0 * cross - within_s - within_t
}

fn check_sets(s: usize, t: usize, len_s: &[usize], len_t: &[usize]) -> Result<()> {
    if s != t {
        return Err(Error::InvalidArgument(format!("sample set sizes differ: {s} vs {t}")));
    }
    if s < 2 {
        return Err(Error::InvalidArgument("need at least two samples per set".into()));
    }
    let n = len_s[0];
    if len_s.iter().chain(len_t).any(|&l| l != n) {
        return Err(Error::shape("ged_consistency", "samples differ in size"));
    }
    Ok(())
}

/// Plain-value consistency loss between two sample sets.
pub fn ged_value(student: &[Tensor], teacher: &[Tensor]) -> Result<f64> {
    let ls: Vec<usize> = student.iter().map(Tensor::numel).collect();
    let lt: Vec<usize> = teacher.iter().map(Tensor::numel).collect();
    check_sets(student.len(), teacher.len(), &ls, &lt)?;
    let s: Vec<&[f64]> = student.iter().map(Tensor::data).collect();
    let t: Vec<&[f64]> = teacher.iter().map(Tensor::data).collect();
    Ok(ged_from_pairs(&pairwise(&s, &t)))
}

/// `2 ΣΣ d(s_i, t_j) - ΣΣ d(s_i, s_j) - ΣΣ d(t_i, t_j)` over all `S²` pairs.
///
/// The teacher set enters as constants; gradients reach the student samples only.
pub fn ged_consistency(tape: &mut Tape, student: &[Var], teacher: &[Tensor]) -> Result<Var> {
    let ls: Vec<usize> = student.iter().map(|&v| tape.value(v).numel()).collect();
    let lt: Vec<usize> = teacher.iter().map(Tensor::numel).collect();
    check_sets(student.len(), teacher.len(), &ls, &lt)?;
    for (v, t) in student.iter().zip(teacher) {
        if tape.value(*v).shape() != t.shape() {
            return Err(Error::shape("ged_consistency", "student and teacher samples differ in shape"));
        }
    }
    let s = student.len();
    let n = ls[0];
    let stacked = tape.stack(student)?;
    let teacher_data: Vec<f64> = teacher.iter().flat_map(|t| t.data().iter().copied()).collect();

    let value = {
        let sv: Vec<&[f64]> = tape.value(stacked).data().chunks(n).collect();
        let tv: Vec<&[f64]> = teacher_data.chunks(n).collect();
        let p = pairwise(&sv, &tv);
        if p.sq_s.iter().chain(&p.sq_t).any(|&q| q <= 0.0) {
            return Err(Error::domain("ged_consistency", "sample with zero mass"));
        }
        ged_from_pairs(&p)
    };

    tape.record("ged_consistency", &[stacked], Tensor::scalar(value), move |ctx| {
        let upstream = ctx.grad[0];
        let sv: Vec<&[f64]> = ctx.inputs[0].data().chunks(n).collect();
        let tv: Vec<&[f64]> = teacher_data.chunks(n).collect();
        let p = pairwise(&sv, &tv);
        let mut grad = vec![0.0; s * n];
        for i in 0..s {
            let g = &mut grad[i * n..(i + 1) * n];
            // ∂d(a, b)/∂a = -b / m + 2 (a·b) a / m²,  m = |a|² + |b|²
            let mut self_coef = 0.0;
            for j in 0..s {
                let m = p.sq_s[i] + p.sq_t[j];
                let w = 2.0 * upstream;
                self_coef += w * 2.0 * p.st[i * s + j] / (m * m);
                let c = -w / m;
                g.iter_mut().zip(tv[j]).for_each(|(gi, b)| *gi += c * b);
            }
            for q in 0..s {
                if q == i {
                    // d(a, a) = 1/2 regardless of a
                    continue;
                }
                let m = p.sq_s[i] + p.sq_s[q];
                // pairs (i, q) and (q, i), both subtracted
                let w = -2.0 * upstream;
                self_coef += w * 2.0 * p.ss[i * s + q] / (m * m);
                let c = -w / m;
                g.iter_mut().zip(sv[q]).for_each(|(gi, b)| *gi += c * b);
            }
            g.iter_mut().zip(sv[i]).for_each(|(gi, a)| *gi += self_coef * a);
        }
        vec![Some(grad)]
    })
}

/// Gaussian ramp-up `max_weight * exp(-5 (1 - t / t_max)²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub max_weight: f64,
    pub t_max: usize,
}

impl RampSchedule {
    pub fn weight(&self, t: usize) -> Result<f64> {
        if self.t_max == 0 || t > self.t_max {
            return Err(Error::InvalidArgument(format!("iteration {t} outside [0, {}]", self.t_max)));
        }
        let phase = 1.0 - t as f64 / self.t_max as f64;
        Ok(self.max_weight * (-5.0 * phase * phase).exp())
    }
}

/// `sup + λ_g(t) · con`.
pub fn aua_loss(tape: &mut Tape, sup: Var, con: Var, t: usize, sched: &RampSchedule) -> Result<Var> {
    let w = sched.weight(t)?;
    let scaled = tape.scale(con, w)?;
    tape.add(sup, scaled)
}
