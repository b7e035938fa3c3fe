//! Shared helpers for the integration tests: central-difference gradient
//! checks over random small instances, and brute-force metric oracles.
#![allow(dead_code)]

use auaseg::consistency::{ged_consistency, gdice_distance};
use auaseg::contrastive::{bcl_loss, pcl_loss, BoundaryIndexSet, Prototypes, FEATURE_DIM};
use auaseg::pipeline::{soft_dice_loss, supervised_ced_loss};
use auaseg::rng;
use auaseg::segnet::{forward, NetworkOutput, NetworkParams};
use auaseg::stochastic::{build_distribution, one_hot, supervised_loss_au};
use auaseg::{Result, Tape, Tensor, Var};
use rand::seq::index;
use rand::Rng;

/// Central-difference steps; a coordinate passes if any of them agrees, so
/// a ReLU kink inside the larger steps does not count as a mismatch.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 100;

/// `|a - n| / max(|a|, |n|, FLOOR)`
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Worst relative error between tape gradients and central differences of
/// `f`, probing at most `probes` random coordinates of each input.
pub fn gradcheck<F>(inputs: &[Tensor], probes: usize, rng: &mut impl Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| tape.grad(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = f(&mut t, &vs).expect("forward");
        t.value(out).item().expect("scalar")
    };

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= probes { (0..n).collect() } else { index::sample(rng, n, probes).into_vec() };
        for i in coords {
            let x0 = inputs[k].data()[i];
            let mut best = f64::INFINITY;
            for h in STEPS {
                xs[k].data_mut()[i] = x0 + h;
                let up = eval(&xs);
                xs[k].data_mut()[i] = x0 - h;
                let down = eval(&xs);
                xs[k].data_mut()[i] = x0;
                best = best.min(rel_error(analytic[k].data()[i], (up - down) / (2.0 * h)));
                if best <= TOLERANCE {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    worst
}

/// `Σ w ⊙ y` with fixed weights, reducing any output to a scalar.
pub fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

fn small_shape(rng: &mut impl Rng) -> [usize; 3] {
    [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)]
}

fn labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..classes) as u8).collect()
}

/// Frozen two-class prototypes fitted to random features.
pub fn random_prototypes(rng: &mut impl Rng) -> Prototypes {
    let v = 200;
    let feats = Tensor::randn(&[FEATURE_DIM, v], 0.5, rng).into_data();
    let mut l = labels(v, 2, rng);
    l[0] = 0;
    l[1] = 1;
    let mut p = Prototypes::new(2);
    p.update(&feats, &l).unwrap();
    p.freeze();
    p
}

pub type Suite = fn(u64) -> f64;

/// One named gradient check per differentiable operation; each takes an
/// instance seed and returns that instance's worst relative error.
pub fn suites() -> Vec<(&'static str, Suite)> {
    vec![
        ("supervised_loss_au", supervised_au as Suite),
        ("gdice_distance", gdice),
        ("ged_consistency", ged),
        ("bcl_loss", bcl),
        ("pcl_loss", pcl),
        ("soft_dice_loss", soft_dice),
        ("supervised_ced_loss", ced),
        ("conv3d", conv),
        ("conv_transpose3d", conv_transpose),
        ("relu + concat_channels", relu_concat),
        ("normalize_channels", normalize),
        ("segnet forward", network),
    ]
}

fn supervised_au(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let c = r.random_range(2..=3);
    let rank = r.random_range(1..=3);
    let s = small_shape(&mut r);
    let samples = r.random_range(1..=4);
    let v: usize = s.iter().product();
    let y = one_hot(&labels(v, c, &mut r), c).unwrap();
    let head = |k: usize, r: &mut rand_chacha::ChaCha8Rng| Tensor::randn(&[1, k, s[0], s[1], s[2]], 1.0, r);
    let inputs = [head(c, &mut r), head(c * rank, &mut r), head(c, &mut r)];
    let proj = head(16, &mut r);
    let noise_seed = r.random::<u64>();
    gradcheck(&inputs, 12, &mut r, |tape, x| {
        let out = NetworkOutput { mean: x[0], factor: x[1], diag_raw: x[2], proj: tape.constant(proj.clone()) };
        let dist = build_distribution(tape, &out)?;
        supervised_loss_au(tape, &dist, &y, samples, &mut rng::seeded(noise_seed))
    })
}

fn gdice(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let shape = [r.random_range(1..=6), r.random_range(2..=3)];
    let inputs = [Tensor::randn(&shape, 1.0, &mut r), Tensor::randn(&shape, 1.0, &mut r)];
    gradcheck(&inputs, 20, &mut r, |tape, x| gdice_distance(tape, x[0], x[1]))
}

fn ged(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (s, v, c) = (r.random_range(2..=4), r.random_range(1..=5), r.random_range(2..=3));
    let student: Vec<Tensor> = (0..s).map(|_| Tensor::randn(&[v, c], 1.5, &mut r)).collect();
    let teacher: Vec<Tensor> = (0..s)
        .map(|_| {
            let mut t = Tape::new();
            let l = t.constant(Tensor::randn(&[v, c], 1.5, &mut r));
            let p = t.softmax(l).unwrap();
            t.value(p).clone()
        })
        .collect();
    gradcheck(&student, 8, &mut r, |tape, x| {
        let maps = x.iter().map(|&g| tape.softmax(g)).collect::<Result<Vec<_>>>()?;
        ged_consistency(tape, &maps, &teacher)
    })
}

fn bcl(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let v = r.random_range(3..=10);
    let feats = Tensor::randn(&[1, FEATURE_DIM, v, 1, 1], 0.4, &mut r);
    let n = r.random_range(2..=v);
    let mut indices = index::sample(&mut r, v, n).into_vec();
    indices.sort_unstable();
    let mut l = labels(n, 2, &mut r);
    l[0] = l[1];
    let nb = BoundaryIndexSet { indices, labels: l };
    let tau = r.random_range(0.2..1.0);
    gradcheck(&[feats], 40, &mut r, |tape, x| bcl_loss(tape, x[0], &nb, tau))
}

fn pcl(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let protos = random_prototypes(&mut r);
    let v = r.random_range(1..=8);
    let feats = Tensor::randn(&[1, FEATURE_DIM, v, 1, 1], 0.5, &mut r);
    let l = labels(v, 2, &mut r);
    let tau = r.random_range(0.5..100.0);
    gradcheck(&[feats], 40, &mut r, |tape, x| pcl_loss(tape, x[0], &l, &protos, tau))
}

fn soft_dice(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (v, c) = (r.random_range(1..=8), r.random_range(2..=3));
    let probs = Tensor::new(vec![v, c], (0..v * c).map(|_| r.random_range(0.05..1.0)).collect()).unwrap();
    let l = labels(v, c, &mut r);
    let class = r.random_range(0..c);
    gradcheck(&[probs], 30, &mut r, |tape, x| soft_dice_loss(tape, x[0], &l, class))
}

fn ced(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let s = small_shape(&mut r);
    let v: usize = s.iter().product();
    let head = Tensor::randn(&[1, 2, s[0], s[1], s[2]], 1.0, &mut r);
    let l = labels(v, 2, &mut r);
    gradcheck(&[head], 30, &mut r, |tape, x| supervised_ced_loss(tape, x[0], &l))
}

fn conv(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (cin, cout, k) = (r.random_range(1..=3), r.random_range(1..=3), [1, 3][r.random_range(0..2)]);
    let stride = r.random_range(1..=2);
    let pad = if k == 3 { r.random_range(0..=1) } else { 0 };
    let n = r.random_range(3..=5);
    let x = Tensor::randn(&[1, cin, n, n, n], 1.0, &mut r);
    let kern = Tensor::randn(&[cout, cin, k, k, k], 0.5, &mut r);
    let bias = Tensor::randn(&[cout], 0.5, &mut r);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
    let probe = t.conv3d(xv, kv, None, stride, pad).unwrap();
    let w = Tensor::randn(t.value(probe).shape(), 1.0, &mut r);
    gradcheck(&[x, kern, bias], 15, &mut r, |tape, v| {
        let y = tape.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
        weighted_sum(tape, y, &w)
    })
}

fn conv_transpose(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let (cin, cout, k) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=2));
    let stride = r.random_range(1..=2);
    let n = r.random_range(2..=3);
    let x = Tensor::randn(&[1, cin, n, n, n], 1.0, &mut r);
    let kern = Tensor::randn(&[cin, cout, k, k, k], 0.5, &mut r);
    let bias = Tensor::randn(&[cout], 0.5, &mut r);
    let mut t = Tape::new();
    let (xv, kv) = (t.constant(x.clone()), t.constant(kern.clone()));
    let probe = t.conv_transpose3d(xv, kv, None, stride).unwrap();
    let w = Tensor::randn(t.value(probe).shape(), 1.0, &mut r);
    gradcheck(&[x, kern, bias], 15, &mut r, |tape, v| {
        let y = tape.conv_transpose3d(v[0], v[1], Some(v[2]), stride)?;
        weighted_sum(tape, y, &w)
    })
}

fn relu_concat(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let s = small_shape(&mut r);
    let (ca, cb) = (r.random_range(1..=3), r.random_range(1..=3));
    let a = Tensor::randn(&[1, ca, s[0], s[1], s[2]], 1.0, &mut r);
    let b = Tensor::randn(&[1, cb, s[0], s[1], s[2]], 1.0, &mut r);
    let w = Tensor::randn(&[1, ca + cb, s[0], s[1], s[2]], 1.0, &mut r);
    gradcheck(&[a, b], 20, &mut r, |tape, v| {
        let ra = tape.relu(v[0])?;
        let y = tape.concat_channels(ra, v[1])?;
        weighted_sum(tape, y, &w)
    })
}

fn normalize(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let s = small_shape(&mut r);
    let c = r.random_range(2..=FEATURE_DIM);
    let x = Tensor::randn(&[1, c, s[0], s[1], s[2]], 1.0, &mut r);
    let w = Tensor::randn(x.shape(), 1.0, &mut r);
    gradcheck(&[x], 20, &mut r, |tape, v| {
        let y = tape.normalize_channels(v[0], 1e-8)?;
        weighted_sum(tape, y, &w)
    })
}

/// Every parameter tensor of the network plus its input, through all four heads.
fn network(seed: u64) -> f64 {
    let mut r = rng::seeded(seed);
    let params = NetworkParams::init_with_gain(2, r.random_range(1..=2), 1.0, &mut r).unwrap();
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for t in &mut inputs {
        t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.05..0.05));
    }
    inputs.push(Tensor::randn(&[1, 1, 8, 8, 8], 1.0, &mut r));
    let k = inputs.len() - 1;
    let probe = {
        let mut t = Tape::new();
        let b = params.bind(&mut t, false);
        let x = t.constant(inputs.last().unwrap().clone());
        let o = forward(&mut t, &b, x).unwrap();
        [o.mean, o.factor, o.diag_raw, o.proj].map(|v| Tensor::randn(t.value(v).shape(), 1.0, &mut r))
    };
    gradcheck(&inputs, 1, &mut r, |tape, v| {
        let bound = params.bind_vars(tape, &v[..k])?;
        let o = forward(tape, &bound, v[k])?;
        let heads = [o.mean, o.factor, o.diag_raw, o.proj];
        let parts = heads.iter().zip(&probe).map(|(&h, w)| weighted_sum(tape, h, w)).collect::<Result<Vec<_>>>()?;
        let s = tape.stack(&parts)?;
        tape.sum(s)
    })
}

/// Surface voxels by definition: foreground with a 6-neighbour that is
/// background or outside the grid.
pub fn brute_surface(mask: &[u8], n: usize) -> Vec<[usize; 3]> {
    let at = |x: isize, y: isize, z: isize| -> u8 {
        let inside = |c: isize| (0..n as isize).contains(&c);
        if inside(x) && inside(y) && inside(z) {
            mask[(x as usize * n + y as usize) * n + z as usize]
        } else {
            0
        }
    };
    let mut out = Vec::new();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                if at(xi, yi, zi) == 0 {
                    continue;
                }
                let steps = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if steps.iter().any(|&(a, b, c)| at(xi + a, yi + b, zi + c) == 0) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Pooled all-pairs surface distances: (mean, nearest-rank 95th percentile).
pub fn brute_surface_distances(pred: &[u8], truth: &[u8], n: usize) -> Option<(f64, f64)> {
    let (sp, st) = (brute_surface(pred, n), brute_surface(truth, n));
    if sp.is_empty() || st.is_empty() {
        return None;
    }
    let dist = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
        (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
    };
    let nearest = |a: &[usize; 3], set: &[[usize; 3]]| set.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = sp.iter().map(|a| nearest(a, &st)).chain(st.iter().map(|a| nearest(a, &sp))).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    let rank = (0.95 * all.len() as f64).ceil() as usize;
    Some((mean, all[rank.max(1) - 1]))
}
