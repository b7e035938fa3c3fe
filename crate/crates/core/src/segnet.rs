//! Two-level 3D encoder–decoder with mean, covariance-factor, covariance-diagonal
//! and projection heads.
//!
//! ```text
//! x ─ enc1(1→8,k3) ─┬───────────────────────────────┐
//!                   └ down(8→16,k3,s2) ─ enc2(16→16) ─ up(16→8,k2,s2) ─ concat ─ dec(16→8,k3)
//!                                                                                 ├ head_mean   (8→C,   k1)
//!                                                                                 ├ head_factor (8→C·r, k1)
//!                                                                                 ├ head_diag   (8→C,   k1)
//!                                                                                 └ proj1 → proj2 → proj3 (16 ch, unit norm)
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const HIDDEN: usize = 8;
pub const WIDE: usize = 16;
pub const PROJ_DIM: usize = 16;
/// Floor on the projection norm before unit normalization.
pub const NORM_EPS: f64 = 1e-8;
/// Weights are drawn from `N(0, (INIT_GAIN * sqrt(2 / fan_in))^2)`.
pub const INIT_GAIN: f64 = 0.01;

const CHECKPOINT_MAGIC: [u8; 4] = *b"AUAP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Conv { stride: usize, pad: usize },
    Transposed { stride: usize },
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    name: &'static str,
    cin: usize,
    cout: usize,
    k: usize,
    kind: Kind,
}

fn layers(classes: usize, rank: usize) -> Vec<Layer> {
    use Kind::*;
    let conv = |name, cin, cout, k, stride, pad| Layer { name, cin, cout, k, kind: Conv { stride, pad } };
    vec![
        conv("enc1", 1, HIDDEN, 3, 1, 1),
        conv("down", HIDDEN, WIDE, 3, 2, 1),
        conv("enc2", WIDE, WIDE, 3, 1, 1),
        Layer { name: "up", cin: WIDE, cout: HIDDEN, k: 2, kind: Transposed { stride: 2 } },
        conv("dec", 2 * HIDDEN, HIDDEN, 3, 1, 1),
        conv("head_mean", HIDDEN, classes, 1, 1, 0),
        conv("head_factor", HIDDEN, classes * rank, 1, 1, 0),
        conv("head_diag", HIDDEN, classes, 1, 1, 0),
        conv("proj1", HIDDEN, PROJ_DIM, 1, 1, 0),
        conv("proj2", PROJ_DIM, PROJ_DIM, 1, 1, 0),
        conv("proj3", PROJ_DIM, PROJ_DIM, 1, 1, 0),
    ]
}

impl Layer {
    fn weight_shape(&self) -> [usize; 5] {
        match self.kind {
            Kind::Conv { .. } => [self.cout, self.cin, self.k, self.k, self.k],
            Kind::Transposed { .. } => [self.cin, self.cout, self.k, self.k, self.k],
        }
    }

    fn fan_in(&self) -> usize {
        self.cin * self.k.pow(3)
    }
}

/// Named weights and biases, kept in canonical (sorted-name) order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    classes: usize,
    rank: usize,
    tensors: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn init<R: Rng + ?Sized>(classes: usize, rank: usize, rng: &mut R) -> Result<Self> {
        Self::init_with_gain(classes, rank, INIT_GAIN, rng)
    }

    /// Weights from `N(0, (gain * sqrt(2 / fan_in))^2)`, biases zero.
    pub fn init_with_gain<R: Rng + ?Sized>(classes: usize, rank: usize, gain: f64, rng: &mut R) -> Result<Self> {
        Self::build(classes, rank, |layer, shape| {
            let std = gain * (2.0 / layer.fan_in() as f64).sqrt();
            Tensor::randn(shape, std, rng)
        })
    }

    pub fn zeros(classes: usize, rank: usize) -> Result<Self> {
        Self::build(classes, rank, |_, shape| Tensor::zeros(shape))
    }

    fn build(classes: usize, rank: usize, mut weight: impl FnMut(&Layer, &[usize]) -> Tensor) -> Result<Self> {
        if classes < 2 || rank == 0 {
            return Err(Error::InvalidArgument(format!("need classes >= 2 and rank >= 1, got {classes}, {rank}")));
        }
        let mut tensors = BTreeMap::new();
        for layer in layers(classes, rank) {
            tensors.insert(format!("{}.weight", layer.name), weight(&layer, &layer.weight_shape()));
            tensors.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.cout]));
        }
        Ok(NetworkParams { classes, rank, tensors })
    }

    /// Rebuild from named tensors, checking every expected shape.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let classes = tensors
            .get("head_mean.bias")
            .map(|t| t.numel())
            .ok_or_else(|| Error::InvalidArgument("missing head_mean.bias".into()))?;
        let factor = tensors
            .get("head_factor.bias")
            .map(|t| t.numel())
            .ok_or_else(|| Error::InvalidArgument("missing head_factor.bias".into()))?;
        if classes == 0 || factor % classes != 0 {
            return Err(Error::InvalidArgument("inconsistent head sizes".into()));
        }
        let expected = Self::zeros(classes, factor / classes)?;
        if expected.tensors.len() != tensors.len() {
            return Err(Error::InvalidArgument("unexpected parameter set".into()));
        }
        for (name, t) in &expected.tensors {
            match tensors.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                _ => return Err(Error::InvalidArgument(format!("parameter {name} missing or misshapen"))),
            }
        }
        Ok(NetworkParams { tensors, ..expected })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Put every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        BoundParams { classes: self.classes, rank: self.rank, vars }
    }

    /// Use variables already on `tape`, one per parameter in [`iter`](Self::iter) order.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!("{} variables for {} parameters", vars.len(), self.tensors.len())));
        }
        let mut bound = BTreeMap::new();
        for ((name, t), &v) in self.tensors.iter().zip(vars) {
            if tape.value(v).shape() != t.shape() {
                return Err(Error::shape("bind_vars", format!("{name}: {:?} vs {:?}", tape.value(v).shape(), t.shape())));
            }
            bound.insert(name.clone(), v);
        }
        Ok(BoundParams { classes: self.classes, rank: self.rank, vars: bound })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            binio::write_f64s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        binio::read_magic(&mut r, CHECKPOINT_MAGIC)?;
        let version = binio::read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(version));
        }
        let mut tensors = BTreeMap::new();
        while !binio::at_eof(&mut r)? {
            let len = binio::read_u16(&mut r)? as usize;
            let mut name = vec![0u8; len];
            binio::read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::InvalidArgument("parameter name is not UTF-8".into()))?;
            let rank = binio::read_u8(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| binio::read_u32(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = crate::tensor::checked_numel(&shape)?;
            let data = binio::read_f64s(&mut r, numel)?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Self::from_tensors(tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Parameters placed on one tape.
pub struct BoundParams {
    classes: usize,
    rank: usize,
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every parameter after a backward pass, by name.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, &v)| (k.clone(), tape.grad(v))).collect()
    }
}

/// The four heads for a batch of volumes.
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// `[N, C, H, W, D]` logit means.
    pub mean: Var,
    /// `[N, C*r, H, W, D]`; channel `c*r + k` is factor column `k` of class `c`.
    pub factor: Var,
    /// `[N, C, H, W, D]`, not yet made positive.
    pub diag_raw: Var,
    /// `[N, 16, H, W, D]`, unit norm per voxel.
    pub proj: Var,
}

fn apply(tape: &mut Tape, p: &BoundParams, layer: &Layer, x: Var) -> Result<Var> {
    let w = p.var(&format!("{}.weight", layer.name));
    let b = p.var(&format!("{}.bias", layer.name));
    match layer.kind {
        Kind::Conv { stride, pad } => tape.conv3d(x, w, Some(b), stride, pad),
        Kind::Transposed { stride } => tape.conv_transpose3d(x, w, Some(b), stride),
    }
}

/// Run the network on `[N, 1, H, W, D]` input with even `H, W, D >= 8`.
pub fn forward(tape: &mut Tape, params: &BoundParams, volume: Var) -> Result<NetworkOutput> {
    let shape = tape.value(volume).shape().to_vec();
    let [_, 1, h, w, d] = shape[..] else {
        return Err(Error::shape("segnet", format!("expected [N, 1, H, W, D], got {shape:?}")));
    };
    if [h, w, d].iter().any(|&s| s % 2 != 0 || s < 8) {
        return Err(Error::shape("segnet", format!("spatial dims must be even and >= 8, got {:?}", [h, w, d])));
    }
    let table = layers(params.classes, params.rank);
    let layer = |name: &str| *table.iter().find(|l| l.name == name).unwrap();

    let conv_relu = |tape: &mut Tape, name: &str, x: Var| -> Result<Var> {
        let y = apply(tape, params, &layer(name), x)?;
        tape.relu(y)
    };
    let e1 = conv_relu(tape, "enc1", volume)?;
    let dn = conv_relu(tape, "down", e1)?;
    let e2 = conv_relu(tape, "enc2", dn)?;
    let up = conv_relu(tape, "up", e2)?;
    let cat = tape.concat_channels(up, e1)?;
    let feat = conv_relu(tape, "dec", cat)?;
    let p1 = conv_relu(tape, "proj1", feat)?;
    let p2 = conv_relu(tape, "proj2", p1)?;

    let mean = apply(tape, params, &layer("head_mean"), feat)?;
    let factor = apply(tape, params, &layer("head_factor"), feat)?;
    let diag_raw = apply(tape, params, &layer("head_diag"), feat)?;
    let p3 = apply(tape, params, &layer("proj3"), p2)?;
    let proj = tape.normalize_channels(p3, NORM_EPS)?;
    Ok(NetworkOutput { mean, factor, diag_raw, proj })
}

/// Forward pass outside of any training graph; returns the head values.
pub fn infer(params: &NetworkParams, volume: &Tensor) -> Result<(Tape, NetworkOutput)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(volume.clone());
    let out = forward(&mut tape, &bound, x)?;
    Ok((tape, out))
}
