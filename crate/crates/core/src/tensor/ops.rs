use rand::Rng;

use super::tape::sigmoid;
use super::{axis_split, gemm, DiffArray, Tape, TensorError, Var, CLAMP_MIN};

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Exp { x: Var },
    Log { x: Var },
    Relu { x: Var },
    Softplus { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Square { x: Var },
    Minimum { a: Var, b: Var },
    Maximum { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum { x: Var },
    Mean { x: Var },
    SumAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape { x: Var },
    SelectRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Im2Col { x: Var, geom: ConvGeom },
}

/// Geometry of a square-kernel convolution over an `H×W×C` (channels-last) input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.attach(DiffArray::from_parts(shape, data), op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let shape = v.shape().to_vec();
        self.push_op(shape, data, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        Ok(self.push_op(shape, data, op, &[a, b]))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out, 0.0);
        Ok(self.push_op(vec![m, n], out, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::BadShape(s.to_vec()));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.data(x);
        let mut out = vec![0.0; r * c];
        for p in 0..r {
            for q in 0..c {
                out[q * r + p] = d[p * c + q];
            }
        }
        Ok(self.push_op(vec![c, r], out, Op::Transpose { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise `a / max(b, CLAMP_MIN)`; intended for positive denominators.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", a, b, |x, y| x / y.max(CLAMP_MIN), Op::Div { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("minimum", a, b, f64::min, Op::Minimum { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("maximum", a, b, f64::max, Op::Maximum { a, b })
    }

    /// Adds a vector to every slice along the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(mismatch("add_row", sx, sb));
        }
        let n = sb[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let shape = sx.to_vec();
        Ok(self.push_op(shape, data, Op::AddRow { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    /// Natural log of `max(x, CLAMP_MIN)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(CLAMP_MIN).ln(), Op::Log { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu { x })
    }

    /// `log(1 + e^x)` evaluated as `max(x, 0) + log1p(e^{-|x|})`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square { x })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for q in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + q;
                let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (out[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let mut out = self.data(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        for o in 0..outer {
            for q in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + q;
                let max = (0..len).map(|k| out[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|k| (out[idx(k)] - max).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[idx(k)] -= lse;
                }
            }
        }
        Ok(self.push_op(shape, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes every slice along the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        if sg.len() != 1 || sg != sb || sx.last() != sg.first() {
            return Err(mismatch("layer_norm", sx, sg));
        }
        let n = sg[0];
        let shape = sx.to_vec();
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.data(x).len() / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for row in self.data(x).chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for k in 0..n {
                let h = (row[k] - mean) * r;
                xhat.push(h);
                out.push(h * g[k] + b[k]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push_op(shape, out, op, &[x, gamma, beta]))
    }

    /// Affine map `x·w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sx.last() != sw.first() || sb != [sw[1]] {
            return Err(mismatch("linear", sx, sw));
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.data(x).len() / k;
        let mut shape = sx.to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let mut out: Vec<f64> = self.data(b).repeat(m);
        gemm(m, k, n, self.data(x), (k, 1), self.data(w), (n, 1), &mut out, 1.0);
        Ok(self.push_op(shape, out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Per-row `-log softmax(logits)[target]` as an `[n]` vector.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(mismatch("cross_entropy", s, &[targets.len()]));
        }
        let c = s[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange { index: t, extent: c });
        }
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut out = Vec::with_capacity(targets.len());
        for (row, &t) in self.data(logits).chunks_exact(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            out.push(lse - row[t]);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push_op(vec![targets.len()], out, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_op(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push_op(vec![1], vec![m], Op::Mean { x }, &[x])
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for q in 0..inner {
                    out[o * inner + q] += d[(o * len + k) * inner + q];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (i != axis).then_some(s))
            .collect();
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        Ok(self.push_op(new_shape, out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *xs.first().ok_or(TensorError::BadShape(vec![]))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let op = Op::Concat {
            xs: xs.to_vec(),
            axis,
        };
        Ok(self.push_op(shape, out, op, xs))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if start >= end || end > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                index: end,
                extent: shape[axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&d[from..from + (end - start) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        let op = Op::Slice {
            x,
            axis,
            start,
            end,
        };
        Ok(self.push_op(new_shape, out, op, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != n {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// Gathers slices along axis 0 (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if rows.is_empty() {
            return Err(TensorError::BadShape(vec![0]));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                index: r,
                extent: shape[0],
            });
        }
        let width: usize = shape[1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&d[r * width..(r + 1) * width]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push_op(new_shape, out, op, &[x]))
    }

    /// Inverted dropout with a mask drawn from the tape generator.
    pub fn dropout(&mut self, x: Var, rate: f64, active: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidRate(rate));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        Ok(self.push_op(shape, data, Op::Dropout { x, mask }, &[x]))
    }

    /// Unfolds an `[H, W, C]` input into `[OH·OW, K·K·C]` patches (zero padded).
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var, TensorError> {
        let expect = [geom.height, geom.width, geom.channels];
        if self.shape(x) != expect {
            return Err(mismatch("im2col", self.shape(x), &expect));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.pad < geom.kernel {
            return Err(TensorError::BadShape(expect.to_vec()));
        }
        let (oh, ow) = geom.output_hw();
        let row_len = geom.patch_len();
        let d = self.data(x);
        let mut out = vec![0.0; oh * ow * row_len];
        let c = geom.channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * row_len;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let dst = base + (ky * geom.kernel + kx) * c;
                        let src = (iy as usize * geom.width + ix as usize) * c;
                        out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                    }
                }
            }
        }
        Ok(self.push_op(vec![oh * ow, row_len], out, Op::Im2Col { x, geom }, &[x]))
    }
}

/// Overflow-safe `log(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
