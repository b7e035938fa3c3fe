use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Every knob of data generation and both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Iterations of each training stage.
    pub t_max: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub crop: [usize; 3],
    /// Monte-Carlo samples `S`.
    pub samples: usize,
    /// Covariance factor rank `r`.
    pub rank: usize,
    pub lambda_g: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub ema_decay: f64,
    pub noise_std: f64,
    pub noise_clip: f64,
    pub nb_cap: usize,
    pub proto_iters: usize,
    pub stride: [usize; 3],
    pub init_gain: f64,
    pub volume_shape: [usize; 3],
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub num_test: usize,
    pub ambiguity_min: f64,
    pub ambiguity_max: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            t_max: 600,
            lr: 0.01,
            lr_decay: 0.1,
            lr_step: 250,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_batch: 2,
            unlabeled_batch: 2,
            crop: [16; 3],
            samples: 8,
            rank: 5,
            lambda_g: 0.15,
            lambda_c: 0.09,
            lambda_r: 0.1,
            tau1: 0.07,
            tau2: 100.0,
            ema_decay: 0.99,
            noise_std: 0.1,
            noise_clip: 0.2,
            nb_cap: 64,
            proto_iters: 300,
            stride: [8; 3],
            init_gain: 1.0,
            volume_shape: [32; 3],
            num_labeled: 2,
            num_unlabeled: 14,
            num_test: 4,
            ambiguity_min: 0.5,
            ambiguity_max: 2.0,
            augment: true,
        }
    }
}

fn parse_shape(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = v.split('x').map(str::trim).collect();
    let nums = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|e| Error::Config(format!("{key}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    match nums[..] {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!("{key}: expected N or HxWxD, got {v:?}"))),
    }
}

fn shape_str(s: [usize; 3]) -> String {
    format!("{}x{}x{}", s[0], s[1], s[2])
}

macro_rules! fields {
    ($m:ident) => {
        $m!(seed, u64);
        $m!(t_max, usize);
        $m!(lr, f64);
        $m!(lr_decay, f64);
        $m!(lr_step, usize);
        $m!(momentum, f64);
        $m!(weight_decay, f64);
        $m!(labeled_batch, usize);
        $m!(unlabeled_batch, usize);
        $m!(crop, shape);
        $m!(samples, usize);
        $m!(rank, usize);
        $m!(lambda_g, f64);
        $m!(lambda_c, f64);
        $m!(lambda_r, f64);
        $m!(tau1, f64);
        $m!(tau2, f64);
        $m!(ema_decay, f64);
        $m!(noise_std, f64);
        $m!(noise_clip, f64);
        $m!(nb_cap, usize);
        $m!(proto_iters, usize);
        $m!(stride, shape);
        $m!(init_gain, f64);
        $m!(volume_shape, shape);
        $m!(num_labeled, usize);
        $m!(num_unlabeled, usize);
        $m!(num_test, usize);
        $m!(ambiguity_min, f64);
        $m!(ambiguity_max, f64);
        $m!(augment, bool);
    };
}

impl TrainConfig {
    /// Parse `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! try_set {
            ($name:ident, shape) => {
                if key == stringify!($name) {
                    self.$name = parse_shape(key, value)?;
                    return Ok(());
                }
            };
            ($name:ident, $t:ty) => {
                if key == stringify!($name) {
                    self.$name = value.parse::<$t>().map_err(|e| Error::Config(format!("{key}: {e}")))?;
                    return Ok(());
                }
            };
        }
        fields!(try_set);
        Err(Error::Config(format!("unknown key {key:?}")))
    }

    /// Render as a config file that parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! put {
            ($name:ident, shape) => {
                writeln!(out, "{} = {}", stringify!($name), shape_str(self.$name)).unwrap();
            };
            ($name:ident, $t:ty) => {
                writeln!(out, "{} = {}", stringify!($name), self.$name).unwrap();
            };
        }
        fields!(put);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.t_max == 0 || self.lr_step == 0 {
            return bad("t_max and lr_step must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_decay) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr must be positive, lr_decay in [0, 1], momentum in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.lambda_g < 0.0 || self.lambda_c < 0.0 || self.lambda_r < 0.0 {
            return bad("weight decay and loss weights must be non-negative");
        }
        if self.labeled_batch == 0 || self.samples < 2 || self.rank == 0 || self.nb_cap < 2 {
            return bad("labeled_batch, rank positive; samples and nb_cap at least 2");
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) || !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("temperatures must be positive, ema_decay in [0, 1]");
        }
        if self.noise_std < 0.0 || !(self.noise_clip > 0.0) || !(self.init_gain > 0.0) {
            return bad("noise_std >= 0, noise_clip > 0, init_gain > 0");
        }
        for k in 0..3 {
            if self.crop[k] < 8 || !self.crop[k].is_multiple_of(2) || self.crop[k] > self.volume_shape[k] {
                return bad("crop must be even, >= 8 and fit the volume");
            }
            if self.stride[k] == 0 || self.stride[k] > self.crop[k] {
                return bad("stride must be in 1..=crop");
            }
            if !self.volume_shape[k].is_multiple_of(2) {
                return bad("volume_shape must be even");
            }
        }
        if self.num_labeled == 0 || self.num_test == 0 {
            return bad("need labeled and test volumes");
        }
        if !(0.0 <= self.ambiguity_min && self.ambiguity_min <= self.ambiguity_max) {
            return bad("ambiguity range must satisfy 0 <= min <= max");
        }
        Ok(())
    }

    /// `lr · lr_decay^⌊t / lr_step⌋`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay.powi((t / self.lr_step) as i32)
    }
}
