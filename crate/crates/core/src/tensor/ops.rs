use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How two operand shapes combine.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    ScalarLeft,
    ScalarRight,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Broadcast, Vec<usize>)> {
    if a.shape == b.shape {
        Ok((Broadcast::Same, a.shape.clone()))
    } else if a.numel() == 1 {
        Ok((Broadcast::ScalarLeft, b.shape.clone()))
    } else if b.numel() == 1 {
        Ok((Broadcast::ScalarRight, a.shape.clone()))
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)))
    }
}

fn reduce_for(mode_is_scalar: bool, g: Vec<f64>) -> Vec<f64> {
    if mode_is_scalar {
        vec![g.iter().sum()]
    } else {
        g
    }
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (mode, shape) = broadcast(name, ta, tb)?;
        let n = shape.iter().product::<usize>();
        let pick = move |t: &Tensor, scalar: bool, i: usize| if scalar { t.data[0] } else { t.data[i] };
        let (sa, sb) = (matches!(mode, Broadcast::ScalarLeft), matches!(mode, Broadcast::ScalarRight));
        let data = (0..n).map(|i| f(pick(ta, sa, i), pick(tb, sb, i))).collect();
        let value = Tensor { shape, data };
        self.record(name, &[a, b], value, move |ctx| {
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            let n = ctx.grad.len();
            let mut ga = Vec::with_capacity(n);
            let mut gb = Vec::with_capacity(n);
            for i in 0..n {
                let (x, y) = (pick(ta, sa, i), pick(tb, sb, i));
                ga.push(ctx.grad[i] * dfa(x, y));
                gb.push(ctx.grad[i] * dfb(x, y));
            }
            vec![Some(reduce_for(sa, ga)), Some(reduce_for(sb, gb))]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(b)?;
        if self.value(b).data.contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Elementwise map with derivative expressed in terms of input and output.
    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let value = Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| f(x)).collect() };
        self.record(name, &[a], value, move |ctx| {
            let x = ctx.inputs[0];
            let g = ctx
                .grad
                .iter()
                .zip(&x.data)
                .zip(&ctx.output.data)
                .map(|((g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "argument must be positive"));
        }
        self.unary("log", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("sqrt", "argument must be positive"));
        }
        self.unary("sqrt", a, f64::sqrt, |_, y| 0.5 / y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, |x, _| sigmoid(x))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, move |x| x + c, |_, _| 1.0)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data.iter().sum();
        self.record("sum", &[a], Tensor::scalar(s), |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).clone().reshape(shape)?;
        self.record("reshape", &[a], value, |ctx| vec![Some(ctx.grad.to_vec())])
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let &[m, n] = t.shape.as_slice() else {
            return Err(Error::shape("transpose", format!("expected a matrix, got {:?}", t.shape)));
        };
        let value = Tensor { shape: vec![n, m], data: transpose_data(&t.data, m, n) };
        self.record("transpose", &[a], value, move |ctx| vec![Some(transpose_data(ctx.grad, n, m))])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape, tb.shape)));
        }
        let value = Tensor { shape: vec![m, n], data: matmul_data(&ta.data, &tb.data, m, k, n) };
        self.record("matmul", &[a, b], value, move |ctx| {
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            // dA = G B^T, dB = A^T G
            let bt = transpose_data(&tb.data, k, n);
            let ga = matmul_data(ctx.grad, &bt, m, n, k);
            let at = transpose_data(&ta.data, m, k);
            let gb = matmul_data(&at, ctx.grad, k, m, n);
            vec![Some(ga), Some(gb)]
        })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let c = last_axis(t, "softmax")?;
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor { shape: t.shape.clone(), data };
        self.record("softmax", &[a], value, move |ctx| {
            let y = &ctx.output.data;
            let mut g = vec![0.0; y.len()];
            for ((gr, yr), gi) in ctx.grad.chunks(c).zip(y.chunks(c)).zip(g.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gi[j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(g)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let c = last_axis(t, "log_softmax")?;
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let lse = logsumexp_slice(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor { shape: t.shape.clone(), data };
        self.record("log_softmax", &[a], value, move |ctx| {
            let y = &ctx.output.data;
            let mut g = vec![0.0; y.len()];
            for ((gr, yr), gi) in ctx.grad.chunks(c).zip(y.chunks(c)).zip(g.chunks_mut(c)) {
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    gi[j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(g)]
        })
    }

    /// `log(sum(exp(v)))` of a vector, as a rank-0 tensor.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(Error::shape("logsumexp", format!("expected a vector, got {:?}", t.shape)));
        }
        let value = Tensor::scalar(logsumexp_slice(&t.data));
        self.record("logsumexp", &[a], value, |ctx| {
            let lse = ctx.output.data[0];
            let g = ctx.inputs[0].data.iter().map(|&v| ctx.grad[0] * (v - lse).exp()).collect();
            vec![Some(g)]
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        self.check(first)?;
        let inner = self.value(first).shape.clone();
        let mut data = Vec::with_capacity(parts.len() * self.value(first).numel());
        for &p in parts {
            self.check(p)?;
            let t = self.value(p);
            if t.shape != inner {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape, inner)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let len = data.len() / parts.len();
        self.record("stack", parts, Tensor { shape, data }, move |ctx| {
            ctx.grad.chunks(len).map(|c| Some(c.to_vec())).collect()
        })
    }

    /// Concatenate two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() < 2 || ta.rank() != tb.rank() || ta.shape[0] != tb.shape[0] || ta.shape[2..] != tb.shape[2..] {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", ta.shape, tb.shape)));
        }
        let n = ta.shape[0];
        let (ca, cb) = (ta.numel() / n, tb.numel() / n);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for i in 0..n {
            data.extend_from_slice(&ta.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data[i * cb..(i + 1) * cb]);
        }
        let mut shape = ta.shape.clone();
        shape[1] += tb.shape[1];
        self.record("concat_channels", &[a, b], Tensor { shape, data }, move |ctx| {
            let mut ga = Vec::with_capacity(n * ca);
            let mut gb = Vec::with_capacity(n * cb);
            for chunk in ctx.grad.chunks(ca + cb) {
                ga.extend_from_slice(&chunk[..ca]);
                gb.extend_from_slice(&chunk[ca..]);
            }
            vec![Some(ga), Some(gb)]
        })
    }

    /// Divide each voxel's channel vector of an `[N, C, ...]` tensor by
    /// `max(norm, eps)`.
    pub fn normalize_channels(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(Error::shape("normalize_channels", format!("{:?}", t.shape)));
        }
        let (n, c) = (t.shape[0], t.shape[1]);
        let v = t.numel() / (n * c);
        let mut norms = vec![0.0; n * v];
        for b in 0..n {
            for ch in 0..c {
                let row = &t.data[(b * c + ch) * v..(b * c + ch + 1) * v];
                for (acc, x) in norms[b * v..(b + 1) * v].iter_mut().zip(row) {
                    *acc += x * x;
                }
            }
        }
        norms.iter_mut().for_each(|s| *s = s.sqrt().max(eps));
        let mut data = t.data.clone();
        for b in 0..n {
            for ch in 0..c {
                let row = &mut data[(b * c + ch) * v..(b * c + ch + 1) * v];
                row.iter_mut().zip(&norms[b * v..(b + 1) * v]).for_each(|(x, s)| *x /= s);
            }
        }
        let value = Tensor { shape: t.shape.clone(), data };
        self.record("normalize_channels", &[a], value, move |ctx| {
            let y = &ctx.output.data;
            // Above the floor: dx = (g - y (y.g)) / norm; at the floor the map is linear.
            let mut dots = vec![0.0; n * v];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * v;
                    for i in 0..v {
                        dots[b * v + i] += y[off + i] * ctx.grad[off + i];
                    }
                }
            }
            let mut g = vec![0.0; y.len()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * v;
                    for i in 0..v {
                        let s = norms[b * v + i];
                        let proj = if s > eps { y[off + i] * dots[b * v + i] } else { 0.0 };
                        g[off + i] = (ctx.grad[off + i] - proj) / s;
                    }
                }
            }
            vec![Some(g)]
        })
    }
}

fn last_axis(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape.last() {
        Some(&c) if c >= 2 => Ok(c),
        _ => Err(Error::shape(op, format!("need at least 2 classes on the last axis, got {:?}", t.shape))),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp_slice(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn transpose_data(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = data[i * n + j];
        }
    }
    out
}

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            row.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn vals(t: &Tape, v: Var) -> Vec<f64> {
        t.value(v).data().to_vec()
    }

    #[test]
    fn relu_and_exp_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(x).unwrap();
        assert_eq!(vals(&t, r), vec![0.0, 0.0, 2.0]);
        let z = t.constant(Tensor::vector(vec![0.0]));
        let e = t.exp(z).unwrap();
        assert_eq!(vals(&t, e), vec![1.0]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(x).data()[0] - 6.0).abs() < 1e-12);
        // central difference
        let h = 1e-4;
        let fd = ((3.0 + h) * (3.0 + h) - (3.0 - h) * (3.0 - h)) / (2.0 * h);
        assert!((t.grad(x).data()[0] - fd).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
        let y = t.constant(Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(t.div(y, x), Err(Error::Domain { .. })));
        let z = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(x, z), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_broadcast_sums_gradient() {
        let mut t = Tape::new();
        let s = t.leaf(Tensor::scalar(2.0));
        let v = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let p = t.mul(s, v).unwrap();
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).data(), &[6.0]);
        assert_eq!(t.grad(v).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = t.softmax(a).unwrap();
        assert_eq!(vals(&t, s), vec![0.5, 0.5]);
        let b = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let s = t.softmax(b).unwrap();
        assert_eq!(vals(&t, s), vec![0.5, 0.5]);
        let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.softmax(c).unwrap();
        for (got, want) in vals(&t, s).iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert!((got - want).abs() < 1e-7);
        }
        let one = t.constant(Tensor::vector(vec![1.0]));
        assert!(t.softmax(one).is_err());
    }

    #[test]
    fn logsumexp_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = t.logsumexp(a).unwrap();
        assert!((vals(&t, l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let b = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let l = t.logsumexp(b).unwrap();
        assert!((vals(&t, l)[0] - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
        let c = t.constant(Tensor::vector(vec![-1.0, 0.0, 1.0]));
        let l = t.logsumexp(c).unwrap();
        assert!((vals(&t, l)[0] - 1.40760596).abs() < 1e-7);
    }

    #[test]
    fn backward_of_sum_and_constant() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);

        let c = t.constant(Tensor::scalar(4.0));
        t.backward(c).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 0.0, 0.0]);

        let v = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_tape_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.exp(x), Err(Error::ForeignTape)));
        assert!(matches!(b.backward(x), Err(Error::ForeignTape)));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1000.0]));
        assert!(matches!(t.exp(x), Err(Error::NonFinite("exp"))));
    }

    #[test]
    fn normalize_channels_unit_norm_and_zero_floor() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap());
        let y = t.normalize_channels(x, 1e-8).unwrap();
        assert_eq!(vals(&t, y), vec![0.6, 0.0, 0.8, 0.0]);
    }
}
