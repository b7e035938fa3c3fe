//! Direct 3D convolution kernels (NCHWD layout) and their tape ops.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `floor((len + 2 pad - k) / stride) + 1`, or `None` if no output fits.
pub fn conv3d_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.k * self.k * self.k
    }
}

/// Output positions `o` with `0 <= o*stride + offset - pad < len`.
#[inline]
fn valid_range(offset: usize, len: usize, out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    let hi = if len + pad > offset { ((len + pad - offset - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

struct Ranges {
    h: (usize, usize),
    w: (usize, usize),
    d: (usize, usize),
}

impl ConvGeometry {
    #[inline]
    fn ranges(&self, kh: usize, kw: usize, kd: usize) -> Ranges {
        let [h, w, d] = self.input;
        let [oh, ow, od] = self.output;
        Ranges {
            h: valid_range(kh, h, oh, self.stride, self.pad),
            w: valid_range(kw, w, ow, self.stride, self.pad),
            d: valid_range(kd, d, od, self.stride, self.pad),
        }
    }

    /// Visit every (output row, input row) pair touched by kernel offset
    /// `(kh, kw, kd)`: the callback gets the output and input row starts plus
    /// the first input column and the valid output column span.
    #[inline]
    fn for_rows(&self, kh: usize, kw: usize, kd: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [_, w, d] = self.input;
        let [_, ow, od] = self.output;
        let r = self.ranges(kh, kw, kd);
        let (s, p) = (self.stride, self.pad);
        for oh in r.h.0..r.h.1 {
            let ih = oh * s + kh - p;
            for ow_ in r.w.0..r.w.1 {
                let iw = ow_ * s + kw - p;
                let orow = (oh * ow + ow_) * od;
                let irow = (ih * w + iw) * d;
                f(orow, irow, r.d.0 * s + kd - p, r.d.0, r.d.1);
            }
        }
    }
}

fn conv3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let k = g.k;
    let s = g.stride;
    let mut out = vec![0.0; g.batch * g.cout * ov];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * ov..(n * g.cout + co + 1) * ov];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.cin {
                let xi = &x[(n * g.cin + ci) * iv..(n * g.cin + ci + 1) * iv];
                let wk = &w[(co * g.cin + ci) * kv..(co * g.cin + ci + 1) * kv];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wv = wk[(kh * k + kw) * k + kd];
                            g.for_rows(kh, kw, kd, |orow, irow, id0, d0, d1| {
                                let dst = &mut o[orow + d0..orow + d1];
                                if s == 1 {
                                    let src = &xi[irow + id0..irow + id0 + (d1 - d0)];
                                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += wv * b);
                                } else {
                                    for (j, a) in dst.iter_mut().enumerate() {
                                        *a += wv * xi[irow + id0 + j * s];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_grad_input(gout: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let k = g.k;
    let s = g.stride;
    let mut gx = vec![0.0; g.batch * g.cin * iv];
    for n in 0..g.batch {
        for ci in 0..g.cin {
            let gi = &mut gx[(n * g.cin + ci) * iv..(n * g.cin + ci + 1) * iv];
            for co in 0..g.cout {
                let go = &gout[(n * g.cout + co) * ov..(n * g.cout + co + 1) * ov];
                let wk = &w[(co * g.cin + ci) * kv..(co * g.cin + ci + 1) * kv];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wv = wk[(kh * k + kw) * k + kd];
                            g.for_rows(kh, kw, kd, |orow, irow, id0, d0, d1| {
                                let src = &go[orow + d0..orow + d1];
                                if s == 1 {
                                    let dst = &mut gi[irow + id0..irow + id0 + (d1 - d0)];
                                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += wv * b);
                                } else {
                                    for (j, b) in src.iter().enumerate() {
                                        gi[irow + id0 + j * s] += wv * b;
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv3d_grad_kernel(gout: &[f64], x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (iv, ov, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let k = g.k;
    let s = g.stride;
    let mut gw = vec![0.0; g.cout * g.cin * kv];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let gk = &mut gw[(co * g.cin + ci) * kv..(co * g.cin + ci + 1) * kv];
            for n in 0..g.batch {
                let go = &gout[(n * g.cout + co) * ov..(n * g.cout + co + 1) * ov];
                let xi = &x[(n * g.cin + ci) * iv..(n * g.cin + ci + 1) * iv];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let mut acc = 0.0;
                            g.for_rows(kh, kw, kd, |orow, irow, id0, d0, d1| {
                                let a = &go[orow + d0..orow + d1];
                                if s == 1 {
                                    let b = &xi[irow + id0..irow + id0 + (d1 - d0)];
                                    acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                                } else {
                                    for (j, p) in a.iter().enumerate() {
                                        acc += p * xi[irow + id0 + j * s];
                                    }
                                }
                            });
                            gk[(kh * k + kw) * k + kd] += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

fn channel_sums(gout: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    let v = gout.len() / (batch * channels);
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += gout[(n * channels + c) * v..(n * channels + c + 1) * v].iter().sum::<f64>();
        }
    }
    gb
}

/// Transposed convolution with zero padding; kernel layout `[Cin, Cout, k, k, k]`.
fn conv_transpose3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    // `g` describes the adjoint direct convolution: its "input" is our output.
    let (big, small, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let mut out = vec![0.0; g.batch * g.cin * big];
    if let Some(b) = bias {
        for n in 0..g.batch {
            for c in 0..g.cin {
                out[(n * g.cin + c) * big..(n * g.cin + c + 1) * big].iter_mut().for_each(|v| *v = b[c]);
            }
        }
    }
    let k = g.k;
    let s = g.stride;
    for n in 0..g.batch {
        for co in 0..g.cin {
            let o = &mut out[(n * g.cin + co) * big..(n * g.cin + co + 1) * big];
            for ci in 0..g.cout {
                let xi = &x[(n * g.cout + ci) * small..(n * g.cout + ci + 1) * small];
                let wk = &w[(ci * g.cin + co) * kv..(ci * g.cin + co + 1) * kv];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wv = wk[(kh * k + kw) * k + kd];
                            g.for_rows(kh, kw, kd, |srow, brow, b0, d0, d1| {
                                for (j, xv) in xi[srow + d0..srow + d1].iter().enumerate() {
                                    o[brow + b0 + j * s] += wv * xv;
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_transpose3d_grad_input(gout: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (big, small, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let k = g.k;
    let s = g.stride;
    let mut gx = vec![0.0; g.batch * g.cout * small];
    for n in 0..g.batch {
        for ci in 0..g.cout {
            let gi = &mut gx[(n * g.cout + ci) * small..(n * g.cout + ci + 1) * small];
            for co in 0..g.cin {
                let go = &gout[(n * g.cin + co) * big..(n * g.cin + co + 1) * big];
                let wk = &w[(ci * g.cin + co) * kv..(ci * g.cin + co + 1) * kv];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let wv = wk[(kh * k + kw) * k + kd];
                            g.for_rows(kh, kw, kd, |srow, brow, b0, d0, d1| {
                                for (j, a) in gi[srow + d0..srow + d1].iter_mut().enumerate() {
                                    *a += wv * go[brow + b0 + j * s];
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv_transpose3d_grad_kernel(gout: &[f64], x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (big, small, kv) = (g.in_volume(), g.out_volume(), g.kernel_volume());
    let k = g.k;
    let s = g.stride;
    let mut gw = vec![0.0; g.cout * g.cin * kv];
    for ci in 0..g.cout {
        for co in 0..g.cin {
            let gk = &mut gw[(ci * g.cin + co) * kv..(ci * g.cin + co + 1) * kv];
            for n in 0..g.batch {
                let go = &gout[(n * g.cin + co) * big..(n * g.cin + co + 1) * big];
                let xi = &x[(n * g.cout + ci) * small..(n * g.cout + ci + 1) * small];
                for kh in 0..k {
                    for kw in 0..k {
                        for kd in 0..k {
                            let mut acc = 0.0;
                            g.for_rows(kh, kw, kd, |srow, brow, b0, d0, d1| {
                                for (j, xv) in xi[srow + d0..srow + d1].iter().enumerate() {
                                    acc += xv * go[brow + b0 + j * s];
                                }
                            });
                            gk[(kh * k + kw) * k + kd] += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

fn dims5(t: &Tensor, op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape()).map_err(|_| Error::shape(op, format!("expected rank 5, got {:?}", t.shape())))
}

fn check_bias(tape: &Tape, bias: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        tape.check(b)?;
        if tape.value(b).shape() != [channels] {
            return Err(Error::shape(op, format!("bias {:?} for {channels} channels", tape.value(b).shape())));
        }
    }
    Ok(())
}

impl Tape {
    /// Cross-correlation of `[N, Cin, H, W, D]` with `[Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let [n, cin, h, w, d] = dims5(self.value(input), "conv3d")?;
        let [cout, kcin, k, k2, k3] = dims5(self.value(kernel), "conv3d")?;
        if kcin != cin || k != k2 || k != k3 {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} vs kernel {:?}", self.value(input).shape(), self.value(kernel).shape()),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::shape("conv3d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv3d stride must be positive".into()));
        }
        check_bias(self, bias, cout, "conv3d")?;
        let out_len = |len| conv3d_output_len(len, k, stride, pad).ok_or_else(|| Error::shape("conv3d", "output dimension < 1"));
        let geom = ConvGeometry {
            batch: n,
            cin,
            cout,
            input: [h, w, d],
            output: [out_len(h)?, out_len(w)?, out_len(d)?],
            k,
            stride,
            pad,
        };
        let data = conv3d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let [oh, ow, od] = geom.output;
        let value = Tensor { shape: vec![n, cout, oh, ow, od], data };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record("conv3d", &inputs, value, move |ctx| {
            let mut grads = vec![
                Some(conv3d_grad_input(ctx.grad, ctx.inputs[1].data(), &geom)),
                Some(conv3d_grad_kernel(ctx.grad, ctx.inputs[0].data(), &geom)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(Some(channel_sums(ctx.grad, geom.batch, geom.cout)));
            }
            grads
        })
    }

    /// Transposed convolution (no padding): `[N, Cin, H, W, D]` with kernel
    /// `[Cin, Cout, k, k, k]` gives `[N, Cout, (H-1)s+k, ...]`.
    pub fn conv_transpose3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let [n, cin, h, w, d] = dims5(self.value(input), "conv_transpose3d")?;
        let [kcin, cout, k, k2, k3] = dims5(self.value(kernel), "conv_transpose3d")?;
        if kcin != cin || k != k2 || k != k3 || stride == 0 {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("input {:?} vs kernel {:?}", self.value(input).shape(), self.value(kernel).shape()),
            ));
        }
        check_bias(self, bias, cout, "conv_transpose3d")?;
        let up = |len: usize| (len - 1) * stride + k;
        // Adjoint geometry: a direct conv from the upsampled grid down to ours.
        let geom = ConvGeometry {
            batch: n,
            cin: cout,
            cout: cin,
            input: [up(h), up(w), up(d)],
            output: [h, w, d],
            k,
            stride,
            pad: 0,
        };
        let data = conv_transpose3d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor { shape: vec![n, cout, up(h), up(w), up(d)], data };
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.record("conv_transpose3d", &inputs, value, move |ctx| {
            let mut grads = vec![
                Some(conv_transpose3d_grad_input(ctx.grad, ctx.inputs[1].data(), &geom)),
                Some(conv_transpose3d_grad_kernel(ctx.grad, ctx.inputs[0].data(), &geom)),
            ];
            if ctx.inputs.len() == 3 {
                grads.push(Some(channel_sums(ctx.grad, geom.batch, geom.cin)));
            }
            grads
        })
    }
}
