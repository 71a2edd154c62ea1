//! Forward definitions and vector-Jacobian products of every graph operation.

use super::kernels::{self, col2im_add, gemm, im2col, ConvGeom, Mat, OutLayout};
use super::{Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

impl Graph {
    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        Ok(())
    }

    /// `b` must match `a`, be a single element, or match a trailing suffix of `a`'s shape.
    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa == sb || numel(sb) == 1 || (sb.len() <= sa.len() && sa.ends_with(sb));
        if !ok {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.len();
        let data = if nb == av.len() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(av.len());
            for row in av.data().chunks(nb) {
                out.extend(row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)));
            }
            out
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// PReLU with a learned slope broadcast like the right operand of [`Graph::mul`].
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.binary(
            "prelu",
            x,
            slope,
            |v, a| if v > 0.0 { v } else { a * v },
            Op::PRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let scale = if mean { 1.0 / n.max(1) as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::ReduceAxis { x, axis, scale }, "reduce_axis")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k, ta),
            Mat::new(self.value(b).data(), k, n, tb),
            0.0,
            &mut out,
            OutLayout::row_major(n),
        );
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    /// Cross-correlation of `x: [c_in, t]` with `w: [c_out, c_in, k]`, optional bias `[c_out]`,
    /// and zero padding `(left, right)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: (usize, usize)) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[1] || stride == 0 {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cin, len, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
        let padded = len + padding.0 + padding.1;
        if padded < k {
            return Err(Error::InputTooShort {
                op: "conv1d",
                len: padded,
                needed: k,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape {
                    op: "conv1d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let geom = ConvGeom {
            channels: cin,
            len,
            kernel: k,
            stride,
            pad_left: padding.0,
            out_len: (padded - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), geom);
        let mut out = vec![0.0; cout * geom.out_len];
        gemm(
            Mat::new(self.value(w).data(), cout, cin * k, false),
            Mat::new(&cols, cin * k, geom.out_len, false),
            0.0,
            &mut out,
            OutLayout::row_major(geom.out_len),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, row) in out.chunks_mut(geom.out_len).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        let t = Tensor::new(vec![cout, geom.out_len], out)?;
        self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left: padding.0,
            },
            "conv1d",
        )
    }

    /// Transposed convolution of `x: [c_in, t]` with `w: [c_in, c_out, k]`;
    /// output length `(t - 1) * stride + k`.
    pub fn transpose_conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sx[0] != sw[0] || stride == 0 || sx[1] == 0 {
            return Err(Error::Shape {
                op: "transpose_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (cin, t, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
        let out_len = (t - 1) * stride + k;
        let mut cols = vec![0.0; cout * k * t];
        gemm(
            Mat::new(self.value(w).data(), cout * k, cin, true),
            Mat::new(self.value(x).data(), cin, t, false),
            0.0,
            &mut cols,
            OutLayout::row_major(t),
        );
        let geom = ConvGeom {
            channels: cout,
            len: out_len,
            kernel: k,
            stride,
            pad_left: 0,
            out_len: t,
        };
        let mut out = vec![0.0; cout * out_len];
        col2im_add(&cols, geom, &mut out);
        let tensor = Tensor::new(vec![cout, out_len], out)?;
        self.push(tensor, Op::ConvTranspose1d { x, w, stride }, "transpose_conv1d")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let base = self.shape(first).to_vec();
        let mut out = Vec::with_capacity(numel(&base) * inputs.len());
        for &v in inputs {
            if self.shape(v) != base.as_slice() {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: base,
                    rhs: self.shape(v).to_vec(),
                });
            }
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(base);
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Stack(inputs.to_vec()), "stack")
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Narrow { x, axis, start }, "narrow")
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        self.check_axis(x, axis)?;
        let total: usize = sizes.iter().sum();
        if total != self.shape(x)[axis] {
            return Err(Error::Shape {
                op: "split",
                lhs: self.shape(x).to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        if shape.is_empty() {
            let t = self.value(x).clone();
            return self.push(t, Op::Permute(x, vec![]), "permute");
        }
        let data = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::Permute(x, perm.to_vec()), "permute")
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        let m = before + n + after;
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * m * inner];
        for o in 0..outer {
            out[(o * m + before) * inner..(o * m + before + n) * inner]
                .copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = m;
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::Pad { x, axis, before }, "pad")
    }

    /// Normalizes to zero mean and unit variance along `axis`, then applies
    /// `gain` and `bias` (both of length `shape[axis]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::split_axis(&shape, axis);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let mean = (0..n).map(|j| src[idx(j)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|j| (src[idx(j)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = r;
                for j in 0..n {
                    let h = (src[idx(j)] - mean) * r;
                    xhat[idx(j)] = h;
                    out[idx(j)] = h * gv[j] + bv[j];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or(Error::Axis { axis: 0, rank: 0 })?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax(x), "log_softmax")
    }

    /// Cuts `x: [t, f]` into `n` overlapping windows of `chunk` frames
    /// (hop `hop`), right-padding with zeros; output `[chunk, n, f]`.
    pub fn segment(&mut self, x: Var, chunk: usize, hop: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || chunk == 0 || hop == 0 || n == 0 {
            return Err(Error::Shape {
                op: "segment",
                lhs: shape,
                rhs: vec![chunk, hop, n],
            });
        }
        let (t, f) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; chunk * n * f];
        for c in 0..chunk {
            for k in 0..n {
                let frame = k * hop + c;
                if frame < t {
                    out[(c * n + k) * f..(c * n + k + 1) * f].copy_from_slice(&src[frame * f..(frame + 1) * f]);
                }
            }
        }
        let tensor = Tensor::new(vec![chunk, n, f], out)?;
        self.push(tensor, Op::Segment { x, chunk, hop }, "segment")
    }

    /// Inverse of [`Graph::segment`]: sums overlapping windows of `x: [chunk, n, f]`
    /// back onto the frame axis, divides each frame by the number of windows
    /// covering it, and keeps the first `out_len` frames.
    pub fn overlap_add(&mut self, x: Var, hop: usize, out_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || hop == 0 {
            return Err(Error::Shape {
                op: "overlap_add",
                lhs: shape,
                rhs: vec![hop],
            });
        }
        let (chunk, n, f) = (shape[0], shape[1], shape[2]);
        let mut coverage = vec![0.0; out_len];
        for c in 0..chunk {
            for k in 0..n {
                if let Some(slot) = coverage.get_mut(k * hop + c) {
                    *slot += 1.0;
                }
            }
        }
        if coverage.iter().any(|&c| c == 0.0) {
            return Err(Error::Shape {
                op: "overlap_add",
                lhs: shape,
                rhs: vec![out_len],
            });
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; out_len * f];
        for c in 0..chunk {
            for k in 0..n {
                let frame = k * hop + c;
                if frame < out_len {
                    let (dst, s) = (
                        &mut out[frame * f..(frame + 1) * f],
                        &src[(c * n + k) * f..(c * n + k + 1) * f],
                    );
                    dst.iter_mut().zip(s).for_each(|(d, v)| *d += v);
                }
            }
        }
        for (frame, row) in out.chunks_mut(f).enumerate() {
            let inv = 1.0 / coverage[frame];
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(vec![out_len, f], out)?;
        self.push(t, Op::OverlapAdd { x, hop, coverage }, "overlap_add")
    }
}

impl Graph {
    /// Fused LSTM cell update from pre-activation `gates: [b, 4h]` (order i, f, g, o)
    /// and cell state `c: [b, h]`; returns `(h', c')`.
    pub fn lstm_cell(&mut self, gates: Var, c: Var) -> Result<(Var, Var)> {
        let (sg, sc) = (self.shape(gates).to_vec(), self.shape(c).to_vec());
        if sg.len() != 2 || sc.len() != 2 || sg[0] != sc[0] || sg[1] != 4 * sc[1] {
            return Err(Error::Shape {
                op: "lstm_cell",
                lhs: sg,
                rhs: sc,
            });
        }
        let (b, h) = (sc[0], sc[1]);
        let (gv, cv) = (self.value(gates).data(), self.value(c).data());
        let mut acts = vec![0.0; b * 3 * h];
        let mut aux = vec![0.0; b * 2 * h];
        let mut c_next = vec![0.0; b * h];
        let mut h_next = vec![0.0; b * h];
        for r in 0..b {
            let gr = &gv[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let cand = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let cn = f * cv[r * h + j] + i * cand;
                let tc = cn.tanh();
                acts[r * 3 * h + j] = i;
                acts[r * 3 * h + h + j] = f;
                acts[r * 3 * h + 2 * h + j] = cand;
                aux[r * 2 * h + j] = o;
                aux[r * 2 * h + h + j] = tc;
                c_next[r * h + j] = cn;
                h_next[r * h + j] = o * tc;
            }
        }
        let state = self.push(Tensor::new(vec![b, h], c_next)?, Op::LstmState { gates, c, acts }, "lstm_state")?;
        let out = self.push(
            Tensor::new(vec![b, h], h_next)?,
            Op::LstmOutput { gates, state, aux },
            "lstm_output",
        )?;
        Ok((out, state))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn acc<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Accumulates `f(i)` into the broadcast operand `b`, which repeats every `nb` elements.
fn reduce_broadcast(dst: &mut [f64], n: usize, f: impl Fn(usize) -> f64) {
    let nb = dst.len();
    for i in 0..n {
        dst[i % nb] += f(i);
    }
}

pub(super) fn backward_node(nodes: &[Node], i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, adj, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, adj, *b) {
                reduce_broadcast(gb, g.len(), |k| g[k]);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, adj, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = acc(nodes, adj, *b) {
                reduce_broadcast(gb, g.len(), |k| -g[k]);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.len();
            if let Some(ga) = acc(nodes, adj, *a) {
                ga.iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * bv[k % nb]);
            }
            if let Some(gb) = acc(nodes, adj, *b) {
                reduce_broadcast(gb, g.len(), |k| g[k] * av[k]);
            }
        }
        Op::Div(a, b) => {
            let (bv, y) = (val(*b), out.data());
            let nb = bv.len();
            if let Some(ga) = acc(nodes, adj, *a) {
                ga.iter_mut().enumerate().for_each(|(k, d)| *d += g[k] / bv[k % nb]);
            }
            if let Some(gb) = acc(nodes, adj, *b) {
                reduce_broadcast(gb, g.len(), |k| -g[k] * y[k] / bv[k % nb]);
            }
        }
        Op::Neg(x) => {
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if let Some(gx) = acc(nodes, adj, *x) {
                add_into(gx, g);
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut()
                    .enumerate()
                    .for_each(|(k, d)| *d += if xv[k] > 0.0 { g[k] } else { 0.0 });
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut()
                    .enumerate()
                    .for_each(|(k, d)| *d += if xv[k] > 0.0 { g[k] } else { slope * g[k] });
            }
        }
        Op::PRelu(x, slope) => {
            let (xv, sv) = (val(*x), val(*slope));
            let ns = sv.len();
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut()
                    .enumerate()
                    .for_each(|(k, d)| *d += if xv[k] > 0.0 { g[k] } else { sv[k % ns] * g[k] });
            }
            if let Some(gs) = acc(nodes, adj, *slope) {
                reduce_broadcast(gs, g.len(), |k| if xv[k] > 0.0 { 0.0 } else { g[k] * xv[k] });
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut()
                    .enumerate()
                    .for_each(|(k, d)| *d += g[k] * y[k] * (1.0 - y[k]));
            }
        }
        Op::Tanh(x) => {
            let y = out.data();
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut()
                    .enumerate()
                    .for_each(|(k, d)| *d += g[k] * (1.0 - y[k] * y[k]));
            }
        }
        Op::Ln(x) => {
            let xv = val(*x);
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut().enumerate().for_each(|(k, d)| *d += g[k] / xv[k]);
            }
        }
        Op::Exp(x) => {
            let y = out.data();
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * y[k]);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, adj, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::ReduceAxis { x, axis, scale } => {
            let (outer, n, inner) = kernels::split_axis(nodes[x.0].value.shape(), *axis);
            if let Some(gx) = acc(nodes, adj, *x) {
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for j in 0..n {
                        let row = &mut gx[(o * n + j) * inner..(o * n + j + 1) * inner];
                        row.iter_mut().zip(grow).for_each(|(d, s)| *d += scale * s);
                    }
                }
            }
        }
        Op::MatMul { a, b, ta, tb } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let n = if *tb { sb[0] } else { sb[1] };
            let gm = Mat::new(g, m, n, false);
            let am = Mat::new(val(*a), m, k, *ta);
            let bm = Mat::new(val(*b), k, n, *tb);
            if let Some(ga) = acc(nodes, adj, *a) {
                let layout = if *ta {
                    OutLayout::transposed(m)
                } else {
                    OutLayout::row_major(k)
                };
                gemm(gm, bm.t(), 1.0, ga, layout);
            }
            if let Some(gb) = acc(nodes, adj, *b) {
                let layout = if *tb {
                    OutLayout::transposed(k)
                } else {
                    OutLayout::row_major(n)
                };
                gemm(am.t(), gm, 1.0, gb, layout);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            pad_left,
        } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (cin, len, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
            let out_len = out.shape()[1];
            let geom = ConvGeom {
                channels: cin,
                len,
                kernel: k,
                stride: *stride,
                pad_left: *pad_left,
                out_len,
            };
            let gm = Mat::new(g, cout, out_len, false);
            if let Some(gw) = acc(nodes, adj, *w) {
                let cols = im2col(val(*x), geom);
                gemm(
                    gm,
                    Mat::new(&cols, out_len, cin * k, true),
                    1.0,
                    gw,
                    OutLayout::row_major(cin * k),
                );
            }
            if let Some(gx) = acc(nodes, adj, *x) {
                let mut gcols = vec![0.0; cin * k * out_len];
                gemm(
                    Mat::new(val(*w), cin * k, cout, true),
                    gm,
                    0.0,
                    &mut gcols,
                    OutLayout::row_major(out_len),
                );
                col2im_add(&gcols, geom, gx);
            }
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, adj, *b) {
                    for (co, row) in g.chunks(out_len).enumerate() {
                        gb[co] += row.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::ConvTranspose1d { x, w, stride } => {
            let (sx, sw) = (nodes[x.0].value.shape(), nodes[w.0].value.shape());
            let (cin, t, cout, k) = (sx[0], sx[1], sw[1], sw[2]);
            let geom = ConvGeom {
                channels: cout,
                len: out.shape()[1],
                kernel: k,
                stride: *stride,
                pad_left: 0,
                out_len: t,
            };
            let gcols = im2col(g, geom);
            let gcm = Mat::new(&gcols, cout * k, t, false);
            if let Some(gx) = acc(nodes, adj, *x) {
                gemm(
                    Mat::new(val(*w), cin, cout * k, false),
                    gcm,
                    1.0,
                    gx,
                    OutLayout::row_major(t),
                );
            }
            if let Some(gw) = acc(nodes, adj, *w) {
                gemm(
                    Mat::new(val(*x), cin, t, false),
                    gcm.t(),
                    1.0,
                    gw,
                    OutLayout::row_major(cout * k),
                );
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = kernels::split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &v in inputs {
                let n = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = acc(nodes, adj, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        add_into(&mut gv[o * n * inner..(o + 1) * n * inner], src);
                    }
                }
                offset += n;
            }
        }
        Op::Stack(inputs) => {
            for (j, &v) in inputs.iter().enumerate() {
                let n = nodes[v.0].value.len();
                if let Some(gv) = acc(nodes, adj, v) {
                    add_into(gv, &g[j * n..(j + 1) * n]);
                }
            }
        }
        Op::Narrow { x, axis, start } => {
            let (outer, n, inner) = kernels::split_axis(nodes[x.0].value.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(gx) = acc(nodes, adj, *x) {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Op::Permute(x, perm) => {
            if let Some(gx) = acc(nodes, adj, *x) {
                if perm.is_empty() {
                    add_into(gx, g);
                } else {
                    let back = kernels::permute(g, out.shape(), &kernels::inverse_perm(perm));
                    add_into(gx, &back);
                }
            }
        }
        Op::Pad { x, axis, before } => {
            let (outer, n, inner) = kernels::split_axis(nodes[x.0].value.shape(), *axis);
            let m = out.shape()[*axis];
            if let Some(gx) = acc(nodes, adj, *x) {
                for o in 0..outer {
                    add_into(
                        &mut gx[o * n * inner..(o + 1) * n * inner],
                        &g[(o * m + before) * inner..(o * m + before + n) * inner],
                    );
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            xhat,
            inv_std,
        } => {
            let (outer, n, inner) = kernels::split_axis(out.shape(), *axis);
            let gv = val(*gain);
            if let Some(gg) = acc(nodes, adj, *gain) {
                for (k, (gk, h)) in g.iter().zip(xhat).enumerate() {
                    gg[(k / inner) % n] += gk * h;
                }
            }
            if let Some(gb) = acc(nodes, adj, *bias) {
                for (k, gk) in g.iter().enumerate() {
                    gb[(k / inner) % n] += gk;
                }
            }
            if let Some(gx) = acc(nodes, adj, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for j in 0..n {
                            let d = g[idx(j)] * gv[j];
                            m1 += d;
                            m2 += d * xhat[idx(j)];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let r = inv_std[o * inner + i];
                        for j in 0..n {
                            let d = g[idx(j)] * gv[j];
                            gx[idx(j)] += r * (d - m1 - xhat[idx(j)] * m2);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            let n = *out.shape().last().unwrap_or(&1);
            let y = out.data();
            if let Some(gx) = acc(nodes, adj, *x) {
                for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        gxr[j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
        }
        Op::Segment { x, chunk, hop } => {
            let t = nodes[x.0].value.shape()[0];
            let (n, f) = (out.shape()[1], out.shape()[2]);
            if let Some(gx) = acc(nodes, adj, *x) {
                for c in 0..*chunk {
                    for k in 0..n {
                        let frame = k * hop + c;
                        if frame < t {
                            add_into(
                                &mut gx[frame * f..(frame + 1) * f],
                                &g[(c * n + k) * f..(c * n + k + 1) * f],
                            );
                        }
                    }
                }
            }
        }
        Op::LstmState { gates, c, acts } => {
            let h = out.shape()[1];
            let cv = val(*c);
            if let Some(gg) = acc(nodes, adj, *gates) {
                for (r, (gr, ar)) in g.chunks(h).zip(acts.chunks(3 * h)).enumerate() {
                    let dst = &mut gg[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, cand) = (ar[j], ar[h + j], ar[2 * h + j]);
                        dst[j] += gr[j] * cand * i * (1.0 - i);
                        dst[h + j] += gr[j] * cv[r * h + j] * f * (1.0 - f);
                        dst[2 * h + j] += gr[j] * i * (1.0 - cand * cand);
                    }
                }
            }
            if let Some(gc) = acc(nodes, adj, *c) {
                for (r, (gr, ar)) in g.chunks(h).zip(acts.chunks(3 * h)).enumerate() {
                    for j in 0..h {
                        gc[r * h + j] += gr[j] * ar[h + j];
                    }
                }
            }
        }
        Op::LstmOutput { gates, state, aux } => {
            let h = out.shape()[1];
            if let Some(gg) = acc(nodes, adj, *gates) {
                for (r, (gr, xr)) in g.chunks(h).zip(aux.chunks(2 * h)).enumerate() {
                    let dst = &mut gg[r * 4 * h + 3 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (o, tc) = (xr[j], xr[h + j]);
                        dst[j] += gr[j] * tc * o * (1.0 - o);
                    }
                }
            }
            if let Some(gs) = acc(nodes, adj, *state) {
                for (r, (gr, xr)) in g.chunks(h).zip(aux.chunks(2 * h)).enumerate() {
                    for j in 0..h {
                        let (o, tc) = (xr[j], xr[h + j]);
                        gs[r * h + j] += gr[j] * o * (1.0 - tc * tc);
                    }
                }
            }
        }
        Op::OverlapAdd { x, hop, coverage } => {
            let s = nodes[x.0].value.shape();
            let (chunk, n, f) = (s[0], s[1], s[2]);
            if let Some(gx) = acc(nodes, adj, *x) {
                for c in 0..chunk {
                    for k in 0..n {
                        let frame = k * hop + c;
                        if frame < coverage.len() {
                            let inv = 1.0 / coverage[frame];
                            let dst = &mut gx[(c * n + k) * f..(c * n + k + 1) * f];
                            dst.iter_mut()
                                .zip(&g[frame * f..(frame + 1) * f])
                                .for_each(|(d, v)| *d += inv * v);
                        }
                    }
                }
            }
        }
    }
}
